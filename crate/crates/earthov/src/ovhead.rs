//! Global-bias correction and open-vocabulary classification.
//!
//! Frozen VLM patch tokens leak global image semantics from the [CLS] token,
//! which blurs per-pixel class boundaries. Subtracting a λ-scaled copy of
//! the [CLS] row from every patch row (`alleviate_global_bias`) restores
//! local contrast; the corrected rows are then scored by cosine similarity
//! against a vocabulary of grouped synonym embeddings and reduced to one
//! score per class group.

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::params::Params;
use crate::rng::Rng;
use crate::tensor::{l2_norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasConfig {
    /// Intensity of the [CLS] subtraction.
    pub lambda: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig { lambda: 0.3 }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        Ok(())
    }
}

// ── Vocabulary ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroup {
    pub display: String,
    pub synonyms: Vec<String>,
}

/// Ordered class groups with one unit-norm embedding per synonym.
#[derive(Debug, Clone)]
pub struct ClassVocabulary {
    groups: Vec<ClassGroup>,
    /// Flattened synonym embeddings, aligned with `synonym_group`.
    embeddings: Vec<Tensor>,
    synonym_group: Vec<usize>,
    dim: usize,
}

/// Parse `display = syn1 | syn2 | ...` lines; `#` starts a comment.
pub fn parse_vocab_text(text: &str) -> Result<Vec<ClassGroup>> {
    let mut groups = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (display, rest) = line.split_once('=').ok_or_else(|| Error::Input(format!(
            "vocabulary line {}: expected `display = syn1 | syn2`",
            lineno + 1
        )))?;
        let display = display.trim().to_string();
        let synonyms: Vec<String> = rest
            .split('|')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if display.is_empty() || synonyms.is_empty() {
            return Err(Error::Input(format!(
                "vocabulary line {}: empty class name or synonym list",
                lineno + 1
            )));
        }
        groups.push(ClassGroup { display, synonyms });
    }
    if groups.is_empty() {
        return Err(Error::Input("vocabulary has no classes".into()));
    }
    let mut names: Vec<&str> = groups.iter().map(|g| g.display.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("duplicate class display names".into()));
    }
    Ok(groups)
}

impl ClassVocabulary {
    /// Build from groups plus explicit embeddings keyed by synonym string.
    pub fn with_embeddings(groups: Vec<ClassGroup>, emb: &Params, dim: usize) -> Result<Self> {
        let mut embeddings = Vec::new();
        let mut synonym_group = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            for syn in &g.synonyms {
                let e = emb
                    .get(syn)
                    .ok_or_else(|| Error::Config(format!("no embedding for synonym `{syn}`")))?;
                if e.shape() != [dim] {
                    return Err(Error::Config(format!(
                        "embedding `{syn}` has shape {:?}, expected [{dim}]",
                        e.shape()
                    )));
                }
                let norm = l2_norm(e.data());
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "embedding `{syn}` has norm {norm}, must be 1 ± 1e-9"
                    )));
                }
                embeddings.push(e.clone());
                synonym_group.push(gi);
            }
        }
        Ok(ClassVocabulary { groups, embeddings, synonym_group, dim })
    }

    /// Deterministic unit-norm synthesis keyed by the synonym string, for
    /// running without a real text encoder.
    pub fn synthesized(groups: Vec<ClassGroup>, dim: usize) -> Self {
        let mut embeddings = Vec::new();
        let mut synonym_group = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            for syn in &g.synonyms {
                let mut rng = Rng::seed(fnv1a64(syn.as_bytes()));
                let raw = rng.gauss(&[dim], 1.0);
                let norm = l2_norm(raw.data());
                embeddings.push(raw.map(|v| v / norm));
                synonym_group.push(gi);
            }
        }
        ClassVocabulary { groups, embeddings, synonym_group, dim }
    }

    pub fn groups(&self) -> &[ClassGroup] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_synonyms(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, i: usize) -> &Tensor {
        &self.embeddings[i]
    }

    pub fn group_of_synonym(&self, i: usize) -> usize {
        self.synonym_group[i]
    }

    /// Embeddings as a Params keyed by synonym (for writing side files).
    pub fn embeddings_params(&self) -> Params {
        let mut p = Params::new();
        let mut i = 0;
        for g in &self.groups {
            for syn in &g.synonyms {
                if p.get(syn).is_none() {
                    p.push(syn.clone(), self.embeddings[i].clone());
                }
                i += 1;
            }
        }
        p
    }
}

/// FNV-1a, the stable hash keying synthesized embeddings.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ── Operations ───────────────────────────────────────────────────────

/// Subtract λ·row from every row of `patches`; `cls` is replicated.
pub fn alleviate_rows(patches: &Tensor, cls: &[f64], lambda: f64) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 2 || s[1] != cls.len() {
        return Err(Error::Dim(format!(
            "patches {:?} do not match CLS dim {}",
            s,
            cls.len()
        )));
    }
    let (n, c) = (s[0], s[1]);
    let mut out = Vec::with_capacity(n * c);
    for r in 0..n {
        for j in 0..c {
            out.push(patches.at2(r, j) - lambda * cls[j]);
        }
    }
    Tensor::new(vec![n, c], out)
}

/// The token-sequence form: corrected patch rows of `o`, [h·w, c].
pub fn alleviate_global_bias(o: &TokenSequence, cfg: &BiasConfig) -> Result<Tensor> {
    cfg.validate()?;
    let rows = o.tokens.shape()[0];
    if rows < 2 {
        return Err(Error::Dim("token sequence has no patch rows".into()));
    }
    let c = o.dim();
    let patches = Tensor::new(
        vec![rows - 1, c],
        o.tokens.data()[c..].to_vec(),
    )?;
    alleviate_rows(&patches, o.cls(), cfg.lambda)
}

/// Cosine similarity of every patch row against every synonym embedding.
pub fn similarity_logits(patches: &Tensor, vocab: &ClassVocabulary) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 2 || s[1] != vocab.dim() {
        return Err(Error::Dim(format!(
            "patches {:?} do not match vocabulary dim {}",
            s,
            vocab.dim()
        )));
    }
    let (n, c) = (s[0], s[1]);
    let m = vocab.n_synonyms();
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        let row = patches.row(r);
        let norm = l2_norm(row);
        if norm == 0.0 {
            return Err(Error::Contract(format!("patch row {r} has zero norm")));
        }
        for e in 0..m {
            let emb = vocab.embedding(e).data();
            let dot: f64 = (0..c).map(|j| row[j] * emb[j]).sum();
            out.push(dot / norm);
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Per pixel, each group's score is the max over its synonyms.
pub fn group_reduce(logits: &Tensor, vocab: &ClassVocabulary) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != vocab.n_synonyms() {
        return Err(Error::Dim(format!(
            "logits {:?} do not match {} synonyms",
            s,
            vocab.n_synonyms()
        )));
    }
    let (n, m) = (s[0], s[1]);
    let g = vocab.n_groups();
    let mut out = vec![f64::NEG_INFINITY; n * g];
    for r in 0..n {
        for e in 0..m {
            let gi = vocab.group_of_synonym(e);
            let v = logits.at2(r, e);
            if v > out[r * g + gi] {
                out[r * g + gi] = v;
            }
        }
    }
    Tensor::new(vec![n, g], out)
}

/// Row-major argmax over group scores; ties go to the lowest group index.
pub fn segment_argmax(group_scores: &Tensor, h: usize, w: usize) -> Result<SegmentationMask> {
    let s = group_scores.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::Dim(format!("scores {s:?} do not form an {h}x{w} grid")));
    }
    if !group_scores.is_finite() {
        return Err(Error::Contract("non-finite group scores".into()));
    }
    let g = s[1];
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h * w {
        let row = group_scores.row(r);
        let mut best = 0usize;
        for j in 1..g {
            if row[j] > row[best] {
                best = j;
            }
        }
        data.push(best as u8);
    }
    SegmentationMask::new(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_vocab(dim: usize) -> ClassVocabulary {
        let groups = parse_vocab_text("building = building | roof | house\nroad = road\n").unwrap();
        ClassVocabulary::synthesized(groups, dim)
    }

    #[test]
    fn vocab_parsing_and_rejects() {
        let groups = parse_vocab_text("a = x | y\nb = z\n# comment\n").unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].synonyms, vec!["x", "y"]);
        assert!(parse_vocab_text("").is_err());
        assert!(parse_vocab_text("a = x\na = y\n").is_err());
        assert!(parse_vocab_text("justaname\n").is_err());
    }

    #[test]
    fn synthesized_embeddings_are_unit_and_stable() {
        let v1 = two_class_vocab(16);
        let v2 = two_class_vocab(16);
        for i in 0..v1.n_synonyms() {
            assert!((l2_norm(v1.embedding(i).data()) - 1.0).abs() < 1e-12);
            assert_eq!(v1.embedding(i).data(), v2.embedding(i).data());
        }
    }

    #[test]
    fn with_embeddings_validates_norms() {
        let groups = parse_vocab_text("a = x\n").unwrap();
        let mut emb = Params::new();
        emb.push("x", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert!(matches!(
            ClassVocabulary::with_embeddings(groups.clone(), &emb, 2),
            Err(Error::Config(_))
        ));
        let mut unit = Params::new();
        unit.push("x", Tensor::new(vec![2], vec![0.6, 0.8]).unwrap());
        assert!(ClassVocabulary::with_embeddings(groups, &unit, 2).is_ok());
    }

    #[test]
    fn alleviate_matches_spec_examples() {
        let patches = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let cls = [1.0, 0.0];
        // λ = 0 leaves patches unchanged
        let same = alleviate_rows(&patches, &cls, 0.0).unwrap();
        assert_eq!(same.data(), patches.data());
        // λ = 0.3 on the worked example
        let out = alleviate_rows(&patches, &cls, 0.3).unwrap();
        assert_eq!(out.data(), &[0.7, 2.0]);
        // λ = 1 with every patch equal to CLS gives zero
        let eq = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let z = alleviate_rows(&eq, &cls, 1.0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alleviate_token_sequence_form() {
        let tokens = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        let seq = TokenSequence::new(tokens, 1, 2).unwrap();
        let out = alleviate_global_bias(&seq, &BiasConfig { lambda: 0.3 }).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.row(0), &[0.7, 2.0]);
    }

    #[test]
    fn similarity_hits_the_three_reference_points() {
        let groups = parse_vocab_text("a = x\n").unwrap();
        let mut emb = Params::new();
        emb.push("x", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let vocab = ClassVocabulary::with_embeddings(groups, &emb, 2).unwrap();
        let patches = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 5.0], &[-3.0, 0.0]]).unwrap();
        let l = similarity_logits(&patches, &vocab).unwrap();
        assert!((l.at2(0, 0) - 1.0).abs() < 1e-12);
        assert!(l.at2(1, 0).abs() < 1e-12);
        assert!((l.at2(2, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_patch_reports_row_index() {
        let vocab = two_class_vocab(2);
        let patches = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        match similarity_logits(&patches, &vocab) {
            Err(Error::Contract(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn group_reduce_takes_the_max_synonym() {
        let vocab = two_class_vocab(4);
        // synonyms: building, roof, house | road
        let logits = Tensor::from_rows(&[&[0.6, 0.7, 0.1, 0.2]]).unwrap();
        let g = group_reduce(&logits, &vocab).unwrap();
        assert_eq!(g.shape(), &[1, 2]);
        assert!((g.at2(0, 0) - 0.7).abs() < 1e-15);
        assert!((g.at2(0, 1) - 0.2).abs() < 1e-15);
        // permutation within the group does not matter
        let logits2 = Tensor::from_rows(&[&[0.7, 0.1, 0.6, 0.2]]).unwrap();
        assert_eq!(group_reduce(&logits2, &vocab).unwrap().data(), g.data());
    }

    #[test]
    fn argmax_and_tie_break() {
        let scores = Tensor::from_rows(&[&[0.2, 0.9], &[0.5, 0.5], &[0.1, 0.1]]).unwrap();
        let mask = segment_argmax(&scores, 1, 3).unwrap();
        assert_eq!(mask.data(), &[1, 0, 0]);
        let constant = Tensor::full(&[4, 3], 0.25);
        let m2 = segment_argmax(&constant, 2, 2).unwrap();
        assert!(m2.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn argmax_is_invariant_to_positive_embedding_rescale() {
        // cosine + max + argmax are unchanged when all synonym embeddings
        // are rescaled by a positive factor (cosine renormalizes), so the
        // decision depends only on directions.
        let mut rng = Rng::seed(40);
        let groups = parse_vocab_text("a = x | y\nb = z\n").unwrap();
        let vocab = ClassVocabulary::synthesized(groups.clone(), 8);
        let patches = rng.gauss(&[12, 8], 1.0);
        let corrected = alleviate_rows(&patches, &rng.gauss(&[8], 1.0).into_data(), 0.3).unwrap();
        let base = segment_argmax(
            &group_reduce(&similarity_logits(&corrected, &vocab).unwrap(), &vocab).unwrap(),
            3,
            4,
        )
        .unwrap();
        // rescaling embeddings breaks the unit-norm invariant, so compare
        // against raw-dot scoring with scaled embeddings instead
        for scale in [0.25, 4.0] {
            let mut scores = vec![f64::NEG_INFINITY; 12 * 2];
            for r in 0..12 {
                let row = corrected.row(r);
                let norm = l2_norm(row);
                for e in 0..vocab.n_synonyms() {
                    let emb = vocab.embedding(e);
                    let dot: f64 = row.iter().zip(emb.data()).map(|(a, b)| a * b * scale).sum();
                    let gi = vocab.group_of_synonym(e);
                    let v = dot / norm;
                    if v > scores[r * 2 + gi] {
                        scores[r * 2 + gi] = v;
                    }
                }
            }
            let m = segment_argmax(&Tensor::new(vec![12, 2], scores).unwrap(), 3, 4).unwrap();
            assert_eq!(m.data(), base.data());
        }
    }

    #[test]
    fn bias_subtraction_reduces_mean_cls_cosine() {
        // patches = local + β·CLS with β = 0.5: at λ = 0.3 the mean cosine
        // against the CLS direction strictly decreases.
        let mut rng = Rng::seed(0);
        let c = 16;
        let cls = {
            let raw = rng.gauss(&[c], 1.0);
            let n = l2_norm(raw.data());
            raw.map(|v| v / n)
        };
        let beta = 0.5;
        let n = 64;
        let mut rows = Vec::with_capacity(n * c);
        for _ in 0..n {
            let local = rng.gauss(&[c], 0.4);
            for j in 0..c {
                rows.push(local.data()[j] + beta * cls.data()[j]);
            }
        }
        let patches = Tensor::new(vec![n, c], rows).unwrap();
        let corrected = alleviate_rows(&patches, cls.data(), 0.3).unwrap();
        let mean_cos = |t: &Tensor| -> f64 {
            (0..n)
                .map(|r| crate::tensor::cosine(t.row(r), cls.data()).unwrap())
                .sum::<f64>()
                / n as f64
        };
        let before = mean_cos(&patches);
        let after = mean_cos(&corrected);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn pipeline_is_deterministic() {
        let mut rng = Rng::seed(41);
        let vocab = two_class_vocab(8);
        let patches = rng.gauss(&[6, 8], 1.0);
        let run = || {
            let l = similarity_logits(&patches, &vocab).unwrap();
            let g = group_reduce(&l, &vocab).unwrap();
            segment_argmax(&g, 2, 3).unwrap()
        };
        assert_eq!(run(), run());
    }
}
