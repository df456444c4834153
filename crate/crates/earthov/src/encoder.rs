//! ViT-style image encoder with final-block attention surgery.
//!
//! The encoder is a stack of pre-norm transformer blocks over a patch-token
//! sequence with a prepended [CLS] token. For dense open-vocabulary use the
//! last block is replaced at inference time by a "surgery" variant: the FFN
//! and the residual connection are removed and the attention weights come
//! from the sum of q·qᵀ, k·kᵀ and v·vᵀ instead of q·kᵀ, which sharpens
//! spatial localization of the frozen backbone.
//!
//! `encode` exposes three things the rest of the pipeline needs:
//! the token matrix entering the last block (`x_last`), the projected output
//! sequence `o` (whose row 0 is the projected [CLS]), and `o_prime`, the
//! projection of the last block's *input* patch rows, which is what the
//! upsampler consumes.

use crate::error::{Error, Result};
use crate::params::{Params, VarMap};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Token width d.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Embedding width c after the output projection.
    pub proj_dim: usize,
    pub surgery_enabled: bool,
}

impl EncoderConfig {
    /// Desk-scale default: exercises every code path in seconds.
    pub fn desk_default() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            depth: 4,
            embed_dim: 64,
            num_heads: 4,
            proj_dim: 32,
            surgery_enabled: true,
        }
    }

    /// Tiny configuration for gradient checks and fast tests.
    pub fn micro(image_size: usize) -> Self {
        EncoderConfig {
            image_size,
            patch_size: 16,
            depth: 2,
            embed_dim: 16,
            num_heads: 2,
            proj_dim: 8,
            surgery_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.proj_dim == 0 || self.proj_dim > self.embed_dim {
            return Err(Error::Config(format!(
                "proj_dim {} must lie in 1..={}",
                self.proj_dim, self.embed_dim
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Patch-grid side length h (= w).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

/// Token matrix plus its patch-grid geometry. Row 0 is the [CLS] token; rows
/// 1..h·w+1 are patch tokens in row-major patch order.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, h: usize, w: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] != h * w + 1 {
            return Err(Error::Dim(format!(
                "token matrix {:?} does not match {h}x{w} grid (+CLS)",
                tokens.shape()
            )));
        }
        Ok(TokenSequence { tokens, h, w })
    }

    pub fn cls(&self) -> &[f64] {
        self.tokens.row(0)
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

// ── Weights ──────────────────────────────────────────────────────────

/// Seeded synthetic weights. Matrices are Gaussian scaled by 1/sqrt(fan-in),
/// norms start at identity, biases at zero.
pub fn init_encoder_weights(cfg: &EncoderConfig, rng: &mut Rng) -> Params {
    let d = cfg.embed_dim;
    let ff = 4 * d;
    let patch_in = 3 * cfg.patch_size * cfg.patch_size;
    let mut p = Params::new();
    p.push("patch_embed.weight", rng.gauss(&[d, patch_in], 1.0 / (patch_in as f64).sqrt()));
    p.push("patch_embed.bias", Tensor::zeros(&[d]));
    p.push("pos_embed", rng.gauss(&[cfg.tokens(), d], 0.02));
    p.push("cls_token", rng.gauss(&[d], 0.02));
    let dscale = 1.0 / (d as f64).sqrt();
    for b in 0..cfg.depth {
        p.push(format!("block{b}.ln1.gain"), Tensor::full(&[d], 1.0));
        p.push(format!("block{b}.ln1.bias"), Tensor::zeros(&[d]));
        for nm in ["wq", "wk", "wv", "wo"] {
            p.push(format!("block{b}.attn.{nm}"), rng.gauss(&[d, d], dscale));
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            p.push(format!("block{b}.attn.{nm}"), Tensor::zeros(&[d]));
        }
        p.push(format!("block{b}.ln2.gain"), Tensor::full(&[d], 1.0));
        p.push(format!("block{b}.ln2.bias"), Tensor::zeros(&[d]));
        p.push(format!("block{b}.ffn.w1"), rng.gauss(&[d, ff], dscale));
        p.push(format!("block{b}.ffn.b1"), Tensor::zeros(&[ff]));
        p.push(format!("block{b}.ffn.w2"), rng.gauss(&[ff, d], 1.0 / (ff as f64).sqrt()));
        p.push(format!("block{b}.ffn.b2"), Tensor::zeros(&[d]));
    }
    p.push("proj", rng.gauss(&[d, cfg.proj_dim], dscale));
    p
}

/// Shape-check a weight set against a configuration.
pub fn validate_encoder_params(params: &Params, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let patch_in = 3 * cfg.patch_size * cfg.patch_size;
    let mut expect: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![d, patch_in]),
        ("patch_embed.bias".into(), vec![d]),
        ("pos_embed".into(), vec![cfg.tokens(), d]),
        ("cls_token".into(), vec![d]),
        ("proj".into(), vec![d, cfg.proj_dim]),
    ];
    for b in 0..cfg.depth {
        for nm in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
            expect.push((format!("block{b}.{nm}"), vec![d]));
        }
        for nm in ["wq", "wk", "wv", "wo"] {
            expect.push((format!("block{b}.attn.{nm}"), vec![d, d]));
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            expect.push((format!("block{b}.attn.{nm}"), vec![d]));
        }
        expect.push((format!("block{b}.ffn.w1"), vec![d, 4 * d]));
        expect.push((format!("block{b}.ffn.b1"), vec![4 * d]));
        expect.push((format!("block{b}.ffn.w2"), vec![4 * d, d]));
        expect.push((format!("block{b}.ffn.b2"), vec![d]));
    }
    for (name, shape) in expect {
        let t = params.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "weight `{name}` has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

// ── Forward pieces on the tape ───────────────────────────────────────

fn pname(prefix: &str, rest: &str) -> String {
    if prefix.is_empty() {
        rest.to_string()
    } else {
        format!("{prefix}.{rest}")
    }
}

/// Extract non-overlapping patches: [3, H, W] -> [hw, 3·ps·ps] row-major.
pub fn unfold_patches(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dim(format!("expected [3, H, W] image, got {s:?}")));
    }
    let (hh, ww) = (s[1], s[2]);
    if hh % patch_size != 0 || ww % patch_size != 0 {
        return Err(Error::Dim(format!(
            "image {hh}x{ww} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (hh / patch_size, ww / patch_size);
    let mut out = Vec::with_capacity(gh * gw * 3 * patch_size * patch_size);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for py in 0..patch_size {
                    for px in 0..patch_size {
                        out.push(image.at3(c, gy * patch_size + py, gx * patch_size + px));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, 3 * patch_size * patch_size], out)
}

/// Patch embedding + [CLS] + positional embeddings.
pub fn patch_embed_on_tape(
    tape: &mut Tape,
    image: &Tensor,
    vars: &VarMap,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let s = image.shape();
    if s != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Dim(format!(
            "expected [3, {0}, {0}] image, got {s:?}",
            cfg.image_size
        )));
    }
    let unfolded = tape.constant(unfold_patches(image, cfg.patch_size)?)?;
    let embedded = tape.matmul_tb(unfolded, vars.var("patch_embed.weight"))?;
    let embedded = tape.add_row_vec(embedded, vars.var("patch_embed.bias"))?;
    let cls = tape.reshape(vars.var("cls_token"), &[1, cfg.embed_dim])?;
    let tokens = tape.concat_rows(&[cls, embedded])?;
    tape.add(tokens, vars.var("pos_embed"))
}

fn qkv(
    tape: &mut Tape,
    x: Var,
    vars: &VarMap,
    prefix: &str,
) -> Result<(Var, Var, Var)> {
    let normed = tape.layer_norm(
        x,
        vars.var(&pname(prefix, "ln1.gain")),
        vars.var(&pname(prefix, "ln1.bias")),
    )?;
    let mut make = |wn: &str, bn: &str| -> Result<Var> {
        let m = tape.matmul(normed, vars.var(&pname(prefix, wn)))?;
        tape.add_row_vec(m, vars.var(&pname(prefix, bn)))
    };
    Ok((
        make("attn.wq", "attn.bq")?,
        make("attn.wk", "attn.bk")?,
        make("attn.wv", "attn.bv")?,
    ))
}

enum AttnKind {
    /// softmax(q·kᵀ / √dh) · v
    Standard,
    /// softmax((q·qᵀ + k·kᵀ + v·vᵀ) / √dh) · v
    SelfSelf,
}

fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    num_heads: usize,
    kind: AttnKind,
) -> Result<Var> {
    let d = tape.value(q).shape()[1];
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let logits = match kind {
            AttnKind::Standard => tape.matmul_tb(qh, kh)?,
            AttnKind::SelfSelf => {
                let qq = tape.matmul_tb(qh, qh)?;
                let kk = tape.matmul_tb(kh, kh)?;
                let vv = tape.matmul_tb(vh, vh)?;
                let s = tape.add(qq, kk)?;
                tape.add(s, vv)?
            }
        };
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax(logits, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    tape.concat_cols(&heads)
}

/// Full pre-norm transformer block: attention with residual, then FFN with
/// residual.
pub fn standard_block_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &VarMap,
    prefix: &str,
    num_heads: usize,
) -> Result<Var> {
    let (q, k, v) = qkv(tape, x, vars, prefix)?;
    let sa = multi_head_attention(tape, q, k, v, num_heads, AttnKind::Standard)?;
    let sa = tape.matmul(sa, vars.var(&pname(prefix, "attn.wo")))?;
    let sa = tape.add_row_vec(sa, vars.var(&pname(prefix, "attn.bo")))?;
    let y = tape.add(x, sa)?;

    let normed = tape.layer_norm(
        y,
        vars.var(&pname(prefix, "ln2.gain")),
        vars.var(&pname(prefix, "ln2.bias")),
    )?;
    let h1 = tape.matmul(normed, vars.var(&pname(prefix, "ffn.w1")))?;
    let h1 = tape.add_row_vec(h1, vars.var(&pname(prefix, "ffn.b1")))?;
    let h1 = tape.gelu(h1)?;
    let h2 = tape.matmul(h1, vars.var(&pname(prefix, "ffn.w2")))?;
    let h2 = tape.add_row_vec(h2, vars.var(&pname(prefix, "ffn.b2")))?;
    tape.add(y, h2)
}

/// Surgery block: self-self attention, out-projection, no FFN, no residual.
pub fn surgery_block_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &VarMap,
    prefix: &str,
    num_heads: usize,
) -> Result<Var> {
    let (q, k, v) = qkv(tape, x, vars, prefix)?;
    let sa = multi_head_attention(tape, q, k, v, num_heads, AttnKind::SelfSelf)?;
    let sa = tape.matmul(sa, vars.var(&pname(prefix, "attn.wo")))?;
    tape.add_row_vec(sa, vars.var(&pname(prefix, "attn.bo")))
}

/// Tape handles produced by a full encoder forward.
pub struct EncodeVars {
    /// Input to the last block, [(hw+1), d].
    pub x_last: Var,
    /// Projected output sequence, [(hw+1), c]; row 0 is the projected [CLS].
    pub o: Var,
    /// Projection of the last block's input patch rows, [hw, c].
    pub o_prime: Var,
    pub h: usize,
    pub w: usize,
}

pub fn encode_on_tape(
    tape: &mut Tape,
    image: &Tensor,
    vars: &VarMap,
    cfg: &EncoderConfig,
) -> Result<EncodeVars> {
    cfg.validate()?;
    let grid = cfg.grid();
    let mut x = patch_embed_on_tape(tape, image, vars, cfg)?;
    for b in 0..cfg.depth - 1 {
        x = standard_block_on_tape(tape, x, vars, &format!("block{b}"), cfg.num_heads)?;
    }
    let x_last = x;
    let last = format!("block{}", cfg.depth - 1);
    let z = if cfg.surgery_enabled {
        surgery_block_on_tape(tape, x_last, vars, &last, cfg.num_heads)?
    } else {
        standard_block_on_tape(tape, x_last, vars, &last, cfg.num_heads)?
    };
    let o = tape.matmul(z, vars.var("proj"))?;
    let patches = tape.slice_rows(x_last, 1, grid * grid + 1)?;
    let o_prime = tape.matmul(patches, vars.var("proj"))?;
    Ok(EncodeVars { x_last, o, o_prime, h: grid, w: grid })
}

/// Values produced by [`encode`].
pub struct EncodeOut {
    pub x_last: TokenSequence,
    pub o: TokenSequence,
    /// [hw, c]
    pub o_prime: Tensor,
}

/// Pure encoder forward: same `(image, weights)` always yields bit-identical
/// outputs.
pub fn encode(image: &Tensor, weights: &Params, cfg: &EncoderConfig) -> Result<EncodeOut> {
    validate_encoder_params(weights, cfg)?;
    let mut tape = Tape::new();
    let vars = weights.leaves(&mut tape, false)?;
    let ev = encode_on_tape(&mut tape, image, &vars, cfg)?;
    Ok(EncodeOut {
        x_last: TokenSequence::new(tape.value(ev.x_last).clone(), ev.h, ev.w)?,
        o: TokenSequence::new(tape.value(ev.o).clone(), ev.h, ev.w)?,
        o_prime: tape.value(ev.o_prime).clone(),
    })
}

/// Single-block wrappers used by tests and probes; `block` holds bare names
/// (`ln1.gain`, `attn.wq`, ...).
pub fn standard_block(x: &TokenSequence, block: &Params, num_heads: usize) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let vars = block.leaves(&mut tape, false)?;
    let xv = tape.constant(x.tokens.clone())?;
    let out = standard_block_on_tape(&mut tape, xv, &vars, "", num_heads)?;
    TokenSequence::new(tape.value(out).clone(), x.h, x.w)
}

pub fn surgery_block(x: &TokenSequence, block: &Params, num_heads: usize) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let vars = block.leaves(&mut tape, false)?;
    let xv = tape.constant(x.tokens.clone())?;
    let out = surgery_block_on_tape(&mut tape, xv, &vars, "", num_heads)?;
    TokenSequence::new(tape.value(out).clone(), x.h, x.w)
}

/// Spec-level patch embedding wrapper.
pub fn patch_embed(image: &Tensor, weights: &Params, cfg: &EncoderConfig) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let vars = weights.leaves(&mut tape, false)?;
    let v = patch_embed_on_tape(&mut tape, image, &vars, cfg)?;
    TokenSequence::new(tape.value(v).clone(), cfg.grid(), cfg.grid())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_block(d: usize) -> Params {
        let mut p = Params::new();
        p.push("ln1.gain", Tensor::full(&[d], 1.0));
        p.push("ln1.bias", Tensor::zeros(&[d]));
        let eye = {
            let mut m = Tensor::zeros(&[d, d]).into_data();
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            Tensor::new(vec![d, d], m).unwrap()
        };
        for nm in ["wq", "wk", "wv", "wo"] {
            p.push(format!("attn.{nm}"), eye.clone());
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            p.push(format!("attn.{nm}"), Tensor::zeros(&[d]));
        }
        p.push("ln2.gain", Tensor::full(&[d], 1.0));
        p.push("ln2.bias", Tensor::zeros(&[d]));
        p.push("ffn.w1", Tensor::zeros(&[d, 4 * d]));
        p.push("ffn.b1", Tensor::zeros(&[4 * d]));
        p.push("ffn.w2", Tensor::zeros(&[4 * d, d]));
        p.push("ffn.b2", Tensor::zeros(&[d]));
        p
    }

    /// A single token with zero mean and unit variance passes through the
    /// q/k/v embedding essentially unchanged.
    fn unit_token(d: usize) -> Tensor {
        let data: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        Tensor::new(vec![1, d], data).unwrap()
    }

    #[test]
    fn patch_counts_match_grid() {
        let cfg = EncoderConfig::desk_default();
        assert_eq!(cfg.grid(), 14);
        assert_eq!(cfg.tokens(), 197);
        let micro = EncoderConfig::micro(32);
        assert_eq!(micro.grid(), 2);
        assert_eq!(micro.tokens(), 5);

        let mut rng = Rng::seed(0);
        let w = init_encoder_weights(&micro, &mut rng);
        let image = rng.gauss(&[3, 32, 32], 0.5).map(f64::tanh);
        let seq = patch_embed(&image, &w, &micro).unwrap();
        assert_eq!(seq.tokens.shape(), &[5, 16]);
    }

    #[test]
    fn zero_image_and_pos_gives_equal_patch_tokens() {
        let cfg = EncoderConfig::micro(32);
        let mut rng = Rng::seed(1);
        let mut w = init_encoder_weights(&cfg, &mut rng);
        w.set("pos_embed", Tensor::zeros(&[cfg.tokens(), cfg.embed_dim]));
        w.set("patch_embed.bias", {
            let mut rng2 = Rng::seed(9);
            rng2.gauss(&[cfg.embed_dim], 1.0)
        });
        let image = Tensor::zeros(&[3, 32, 32]);
        let seq = patch_embed(&image, &w, &cfg).unwrap();
        let first = seq.tokens.row(1).to_vec();
        for r in 2..cfg.tokens() {
            assert_eq!(seq.tokens.row(r), first.as_slice());
        }
        // and the rows equal the bias itself
        assert_eq!(first, w.get("patch_embed.bias").unwrap().data());
    }

    #[test]
    fn standard_block_single_token_doubles() {
        let d = 8;
        let block = identity_block(d);
        let x = TokenSequence::new(unit_token(d), 1, 0).unwrap(); // lone CLS row
        let y = standard_block(&x, &block, 2).unwrap();
        for (a, b) in y.tokens.data().iter().zip(x.tokens.data()) {
            assert!((a - 2.0 * b).abs() < 1e-4, "{a} vs 2*{b}");
        }
    }

    #[test]
    fn standard_block_zero_input_zero_biases_is_zero() {
        let d = 8;
        let block = identity_block(d);
        let x = TokenSequence::new(Tensor::zeros(&[3, d]), 1, 2).unwrap();
        let y = standard_block(&x, &block, 2).unwrap();
        for &v in y.tokens.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn standard_block_preserves_shape() {
        let d = 16;
        let mut rng = Rng::seed(5);
        let cfg = EncoderConfig::micro(32);
        let w = init_encoder_weights(&cfg, &mut rng);
        let block = w.extract("block0");
        let x = TokenSequence::new(rng.gauss(&[5, d], 1.0), 2, 2).unwrap();
        let y = standard_block(&x, &block, cfg.num_heads).unwrap();
        assert_eq!(y.tokens.shape(), &[5, d]);
    }

    #[test]
    fn surgery_block_single_token_is_projected_value() {
        let d = 8;
        let block = identity_block(d);
        let x = TokenSequence::new(unit_token(d), 1, 0).unwrap();
        let y = surgery_block(&x, &block, 2).unwrap();
        // attention over one element is 1, so output = out-projection of v,
        // and v ≈ LN(token) = token (mean 0, var 1 up to ε)
        for (a, b) in y.tokens.data().iter().zip(x.tokens.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn surgery_block_identical_tokens_get_identical_outputs() {
        let d = 16;
        let cfg = EncoderConfig::micro(32);
        let mut rng = Rng::seed(6);
        let w = init_encoder_weights(&cfg, &mut rng);
        let block = w.extract("block1");
        let row = rng.gauss(&[1, d], 1.0);
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(row.data());
        }
        let x = TokenSequence::new(Tensor::new(vec![3, d], data).unwrap(), 1, 2).unwrap();
        let y = surgery_block(&x, &block, cfg.num_heads).unwrap();
        let first = y.tokens.row(0).to_vec();
        assert_eq!(y.tokens.row(1), first.as_slice());
        assert_eq!(y.tokens.row(2), first.as_slice());
    }

    #[test]
    fn surgery_block_is_permutation_equivariant() {
        let d = 16;
        let cfg = EncoderConfig::micro(32);
        let mut rng = Rng::seed(7);
        let w = init_encoder_weights(&cfg, &mut rng);
        let block = w.extract("block1");
        let x = rng.gauss(&[4, d], 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(x.row(i));
        }
        let xp = Tensor::new(vec![4, d], permuted).unwrap();
        let y = surgery_block(&TokenSequence::new(x, 1, 3).unwrap(), &block, cfg.num_heads)
            .unwrap();
        let yp = surgery_block(&TokenSequence::new(xp, 1, 3).unwrap(), &block, cfg.num_heads)
            .unwrap();
        for (pi, &i) in perm.iter().enumerate() {
            for (a, b) in yp.tokens.row(pi).iter().zip(y.tokens.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_shapes_and_projection_identity() {
        let mut cfg = EncoderConfig::micro(32);
        let mut rng = Rng::seed(8);
        let image = rng.gauss(&[3, 32, 32], 0.4).map(f64::tanh);

        let w = init_encoder_weights(&cfg, &mut rng);
        let out = encode(&image, &w, &cfg).unwrap();
        assert_eq!(out.o_prime.shape(), &[4, cfg.proj_dim]);
        assert_eq!(out.o.tokens.shape(), &[5, cfg.proj_dim]);

        // With depth 1 and proj = identity (c = d), o_prime equals the patch
        // rows of x_last.
        cfg.depth = 1;
        cfg.proj_dim = cfg.embed_dim;
        let mut w1 = init_encoder_weights(&cfg, &mut rng);
        let d = cfg.embed_dim;
        let mut eye = Tensor::zeros(&[d, d]).into_data();
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        w1.set("proj", Tensor::new(vec![d, d], eye).unwrap());
        let out1 = encode(&image, &w1, &cfg).unwrap();
        for r in 0..4 {
            assert_eq!(out1.o_prime.row(r), out1.x_last.tokens.row(r + 1));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig::micro(32);
        let mut rng = Rng::seed(10);
        let w = init_encoder_weights(&cfg, &mut rng);
        let image = rng.gauss(&[3, 32, 32], 0.4).map(f64::tanh);
        let a = encode(&image, &w, &cfg).unwrap();
        let b = encode(&image, &w, &cfg).unwrap();
        assert!(a
            .o
            .tokens
            .data()
            .iter()
            .zip(b.o.tokens.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn surgery_disabled_matches_standard_block() {
        let cfg = EncoderConfig { surgery_enabled: false, ..EncoderConfig::micro(32) };
        let mut rng = Rng::seed(11);
        let w = init_encoder_weights(&cfg, &mut rng);
        let image = rng.gauss(&[3, 32, 32], 0.4).map(f64::tanh);
        let out = encode(&image, &w, &cfg).unwrap();
        let last_block = w.extract(&format!("block{}", cfg.depth - 1));
        let z = standard_block(&out.x_last, &last_block, cfg.num_heads).unwrap();
        // o == z · proj
        let mut tape = Tape::new();
        let zv = tape.constant(z.tokens).unwrap();
        let pv = tape.constant(w.get("proj").unwrap().clone()).unwrap();
        let o = tape.matmul(zv, pv).unwrap();
        for (a, b) in tape.value(o).data().iter().zip(out.o.tokens.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Straight-line recomputation of the surgery path for the CLS row,
    /// entirely with plain loops, checked against `encode`'s O[0].
    #[test]
    fn cls_output_matches_straight_line_recomputation() {
        let cfg = EncoderConfig::micro(32);
        let mut rng = Rng::seed(12);
        let w = init_encoder_weights(&cfg, &mut rng);
        let image = rng.gauss(&[3, 32, 32], 0.4).map(f64::tanh);
        let out = encode(&image, &w, &cfg).unwrap();

        let x = &out.x_last.tokens; // [n, d]
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let heads = cfg.num_heads;
        let dh = d / heads;
        let last = format!("block{}", cfg.depth - 1);
        let get = |nm: &str| w.get(&format!("{last}.{nm}")).unwrap().data().to_vec();
        let (g1, b1) = (get("ln1.gain"), get("ln1.bias"));
        let (wq, wk, wv, wo) = (get("attn.wq"), get("attn.wk"), get("attn.wv"), get("attn.wo"));
        let (bq, bk, bv, bo) = (get("attn.bq"), get("attn.bk"), get("attn.bv"), get("attn.bo"));

        // LN then three linear maps, by hand.
        let mut normed = vec![0.0; n * d];
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for j in 0..d {
                normed[r * d + j] = (row[j] - mean) * inv * g1[j] + b1[j];
            }
        }
        let lin = |wm: &[f64], bb: &[f64]| {
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                for j in 0..d {
                    let mut acc = bb[j];
                    for p in 0..d {
                        acc += normed[r * d + p] * wm[p * d + j];
                    }
                    out[r * d + j] = acc;
                }
            }
            out
        };
        let (q, k, v) = (lin(&wq, &bq), lin(&wk, &bk), lin(&wv, &bv));

        // Self-self attention for row 0, head by head.
        let mut attended = vec![0.0; d];
        for h in 0..heads {
            let c0 = h * dh;
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..dh {
                    s += q[c0 + t] * q[j * d + c0 + t];
                    s += k[c0 + t] * k[j * d + c0 + t];
                    s += v[c0 + t] * v[j * d + c0 + t];
                }
                logits[j] = s / (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                let a = exps[j] / sum;
                for t in 0..dh {
                    attended[c0 + t] += a * v[j * d + c0 + t];
                }
            }
        }
        let mut z0 = vec![0.0; d];
        for j in 0..d {
            let mut acc = bo[j];
            for p in 0..d {
                acc += attended[p] * wo[p * d + j];
            }
            z0[j] = acc;
        }
        let proj = w.get("proj").unwrap();
        let c = cfg.proj_dim;
        for j in 0..c {
            let mut acc = 0.0;
            for p in 0..d {
                acc += z0[p] * proj.at2(p, j);
            }
            let got = out.o.tokens.at2(0, j);
            assert!((acc - got).abs() < 1e-10, "col {j}: {acc} vs {got}");
        }
    }

    #[test]
    fn mismatched_weights_are_config_error() {
        let cfg = EncoderConfig::micro(32);
        let mut rng = Rng::seed(13);
        let mut w = init_encoder_weights(&cfg, &mut rng);
        w.set("proj", Tensor::zeros(&[cfg.embed_dim, cfg.proj_dim]));
        let bigger = EncoderConfig { proj_dim: cfg.proj_dim + 1, ..cfg };
        let image = Tensor::zeros(&[3, 32, 32]);
        assert!(matches!(
            encode(&image, &w, &bigger),
            Err(Error::Config(_))
        ));
    }
}
