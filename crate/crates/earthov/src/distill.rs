//! Cross-modal encoder distillation: a trainable radar-image student learns
//! to mimic a frozen optical teacher on paired images.
//!
//! Three losses align the modalities:
//! - a symmetric InfoNCE term over the batch's projected [CLS] tokens with a
//!   learnable temperature,
//! - a direct cosine term pulling each pair's [CLS] tokens together, and
//! - a region-level cosine term over K×K mean-pooled patch tokens, which
//!   tolerates the imperfect geometric co-registration and speckle of paired
//!   optical/radar imagery better than token-wise matching.
//!
//! Training runs both encoders with their standard final block; the surgery
//! variant is an inference-time modification.

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{Params, VarMap};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// Contrastive temperature at step 0 (learnable, log-parameterized).
    pub tau_init: f64,
    /// Region grid side for local distillation.
    pub region_k: usize,
    pub w_contrast: f64,
    pub w_cls: f64,
    pub w_local: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_init: 0.07,
            region_k: 7,
            w_contrast: 1.0,
            w_cls: 1.0,
            w_local: 1.0,
            steps: 100,
            lr: 1e-4,
            batch: 16,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init.is_finite() && self.tau_init > 0.0) {
            return Err(Error::Config(format!("tau_init {} must be positive", self.tau_init)));
        }
        if self.region_k == 0 {
            return Err(Error::Config("region_k must be at least 1".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("batch and steps must be positive".into()));
        }
        Ok(())
    }
}

/// Paired samples for one step. Pair ids must be unique and images equally
/// sized.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub pairs: Vec<(Tensor, Tensor, String)>,
}

impl DistillBatch {
    pub fn new(pairs: Vec<(Tensor, Tensor, String)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("distillation batch is empty".into()));
        }
        let shape = pairs[0].0.shape().to_vec();
        for (opt, sar, id) in &pairs {
            if opt.shape() != shape.as_slice() || sar.shape() != shape.as_slice() {
                return Err(Error::Dim(format!(
                    "pair `{id}`: images must all be {shape:?}"
                )));
            }
        }
        let mut ids: Vec<&str> = pairs.iter().map(|(_, _, id)| id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("duplicate pair ids in batch".into()));
        }
        Ok(DistillBatch { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

// ── Loss pieces on the tape ──────────────────────────────────────────

/// Row-normalize to unit L2; zero rows are a contract violation.
pub fn l2_normalize_rows_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let sums = tape.row_sum(sq)?;
    if let Some(r) = tape.value(sums).data().iter().position(|&v| v == 0.0) {
        return Err(Error::Contract(format!("row {r} has zero norm")));
    }
    let norms = tape.sqrt(sums)?;
    tape.div_col_vec(x, norms)
}

/// Symmetric InfoNCE over the batch similarity matrix, Eq.-style:
/// -(1/N)·Σᵢ [log softmax-row(i)ᵢ + log softmax-col(i)ᵢ] of cos/τ.
pub fn loss_cls_contrast_on_tape(
    tape: &mut Tape,
    opt_cls: Var,
    sar_cls: Var,
    log_tau: Var,
) -> Result<Var> {
    let n = tape.value(opt_cls).shape()[0];
    let on = l2_normalize_rows_on_tape(tape, opt_cls)?;
    let sn = l2_normalize_rows_on_tape(tape, sar_cls)?;
    let sim = tape.matmul_tb(on, sn)?;
    let neg_log_tau = tape.scale(log_tau, -1.0)?;
    let inv_tau = tape.exp(neg_log_tau)?;
    let scaled = tape.mul_scalar_var(sim, inv_tau)?;
    let rows = tape.log_softmax(scaled, 1)?;
    let cols = tape.log_softmax(scaled, 0)?;
    let dr = tape.diag_sum(rows)?;
    let dc = tape.diag_sum(cols)?;
    let s = tape.add(dr, dc)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Batch-mean of (1 − cosine) between paired rows of two [N, c] matrices.
pub fn loss_cosine_rows_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = l2_normalize_rows_on_tape(tape, a)?;
    let bn = l2_normalize_rows_on_tape(tape, b)?;
    let prod = tape.mul(an, bn)?;
    let cos = tape.row_sum(prod)?;
    let mean = tape.mean_all(cos)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// Region-level distillation: mean over K² tiles of (1 − cosine) between
/// mean-pooled features.
pub fn loss_local_distill_on_tape(
    tape: &mut Tape,
    opt_local: Var,
    sar_local: Var,
    h: usize,
    w: usize,
    k: usize,
) -> Result<Var> {
    if tape.value(opt_local).shape() != tape.value(sar_local).shape() {
        return Err(Error::Dim(format!(
            "local feature maps differ: {:?} vs {:?}",
            tape.value(opt_local).shape(),
            tape.value(sar_local).shape()
        )));
    }
    let po = tape.region_pool(opt_local, h, w, k)?;
    let ps = tape.region_pool(sar_local, h, w, k)?;
    loss_cosine_rows_on_tape(tape, po, ps)
}

// ── Pure wrappers ────────────────────────────────────────────────────

/// Eq.-style symmetric contrastive loss on [N, c] token matrices.
pub fn loss_cls_contrast(opt_cls: &Tensor, sar_cls: &Tensor, tau: f64) -> Result<f64> {
    if opt_cls.shape() != sar_cls.shape() || opt_cls.shape().len() != 2 {
        return Err(Error::Dim("contrastive inputs must be equal [N, c]".into()));
    }
    let mut tape = Tape::new();
    let o = tape.constant(opt_cls.clone())?;
    let s = tape.constant(sar_cls.clone())?;
    let lt = tape.constant(Tensor::scalar(tau.ln()))?;
    let l = loss_cls_contrast_on_tape(&mut tape, o, s, lt)?;
    tape.value(l).item()
}

/// 1 − cosine of two vectors; range [0, 2].
pub fn loss_cls_distill(opt_cls: &Tensor, sar_cls: &Tensor) -> Result<f64> {
    if opt_cls.shape() != sar_cls.shape() || opt_cls.shape().len() != 1 {
        return Err(Error::Dim("cls distillation takes two equal vectors".into()));
    }
    Ok(1.0 - crate::tensor::cosine(opt_cls.data(), sar_cls.data())?)
}

/// Mean feature per K×K tile; boundary tiles absorb remainders.
pub fn region_mean_pool(local: &Tensor, h: usize, w: usize, k: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(local.clone())?;
    let p = tape.region_pool(x, h, w, k)?;
    Ok(tape.value(p).clone())
}

/// Region-pooled cosine distillation loss of two [h·w, c] maps.
pub fn loss_local_distill(
    opt_local: &Tensor,
    sar_local: &Tensor,
    h: usize,
    w: usize,
    k: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let o = tape.constant(opt_local.clone())?;
    let s = tape.constant(sar_local.clone())?;
    let l = loss_local_distill_on_tape(&mut tape, o, s, h, w, k)?;
    tape.value(l).item()
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct DistillLossRow {
    pub step: usize,
    pub contrast: f64,
    pub cls: f64,
    pub local: f64,
    pub total: f64,
    pub tau: f64,
}

const LOG_TAU: &str = "temp.log_tau";

/// One optimizer step over a batch. The teacher is read-only; the student
/// parameter set (which includes the temperature under `temp.log_tau`)
/// is updated in place.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    batch: &DistillBatch,
    teacher: &Params,
    student: &mut Params,
    enc_cfg: &EncoderConfig,
    cfg: &DistillConfig,
    adam: &mut Adam,
    step: usize,
) -> Result<DistillLossRow> {
    cfg.validate()?;
    let train_cfg = EncoderConfig { surgery_enabled: false, ..enc_cfg.clone() };
    let grid = train_cfg.grid();
    if grid < cfg.region_k {
        return Err(Error::Dim(format!(
            "patch grid {grid} is smaller than region_k {}",
            cfg.region_k
        )));
    }
    encoder::validate_encoder_params(teacher, &train_cfg)?;
    encoder::validate_encoder_params(&student.extract("student"), &train_cfg).map_err(|e| {
        Error::Config(format!("student/teacher configuration mismatch: {e}"))
    })?;

    let n = batch.len();
    let c = train_cfg.proj_dim;

    let mut tape = Tape::new();
    let vars = student.leaves(&mut tape, true)?;

    // teacher runs without gradients; stack its projected outputs as constants
    let mut opt_cls_rows = Vec::with_capacity(n * c);
    let mut opt_locals = Vec::with_capacity(n);
    for (opt, _, _) in &batch.pairs {
        let out = encoder::encode(opt, teacher, &train_cfg)?;
        opt_cls_rows.extend_from_slice(out.o.cls());
        let patches = Tensor::new(
            vec![grid * grid, c],
            out.o.tokens.data()[c..].to_vec(),
        )?;
        opt_locals.push(patches);
    }
    let opt_cls = tape.constant(Tensor::new(vec![n, c], opt_cls_rows)?)?;

    // student forward on the tape, per pair
    let mut sar_cls_parts = Vec::with_capacity(n);
    let mut sar_locals = Vec::with_capacity(n);
    for (_, sar, _) in &batch.pairs {
        let ev = encoder::encode_on_tape(&mut tape, sar, &prefixed(&vars), &train_cfg)?;
        let cls = tape.slice_rows(ev.o, 0, 1)?;
        sar_cls_parts.push(cls);
        let patches = tape.slice_rows(ev.o, 1, grid * grid + 1)?;
        sar_locals.push(patches);
    }
    let sar_cls = tape.concat_rows(&sar_cls_parts)?;

    let contrast = loss_cls_contrast_on_tape(&mut tape, opt_cls, sar_cls, vars.var(LOG_TAU))?;

    // batch means of the per-pair cls and local terms
    let mut cls_terms = Vec::with_capacity(n);
    let mut local_terms = Vec::with_capacity(n);
    for i in 0..n {
        let opt_cls_row = tape.slice_rows(opt_cls, i, i + 1)?;
        let cls_l = loss_cosine_rows_on_tape(&mut tape, opt_cls_row, sar_cls_parts[i])?;
        cls_terms.push(cls_l);
        let opt_local = tape.constant(opt_locals[i].clone())?;
        let local_l = loss_local_distill_on_tape(
            &mut tape,
            opt_local,
            sar_locals[i],
            grid,
            grid,
            cfg.region_k,
        )?;
        local_terms.push(local_l);
    }
    let cls_mean = mean_of(&mut tape, &cls_terms)?;
    let local_mean = mean_of(&mut tape, &local_terms)?;

    let wc = tape.scale(contrast, cfg.w_contrast)?;
    let wk = tape.scale(cls_mean, cfg.w_cls)?;
    let wl = tape.scale(local_mean, cfg.w_local)?;
    let partial = tape.add(wc, wk)?;
    let total = tape.add(partial, wl)?;

    tape.backward(total)?;
    let grads = vars.grads(&tape);
    let row = DistillLossRow {
        step,
        contrast: tape.value(contrast).item()?,
        cls: tape.value(cls_mean).item()?,
        local: tape.value(local_mean).item()?,
        total: tape.value(total).item()?,
        tau: vars_tau(student),
    };
    adam.step(student, &grads);

    // contrastive stability guard: τ stays within [1e-3, 1]
    let lt = student.require(LOG_TAU)?.item()?;
    let clamped = lt.clamp((1e-3f64).ln(), 0.0);
    if clamped != lt {
        student.set(LOG_TAU, Tensor::scalar(clamped));
    }
    Ok(row)
}

fn vars_tau(student: &Params) -> f64 {
    student.get(LOG_TAU).map(|t| t.data()[0].exp()).unwrap_or(f64::NAN)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Student parameter names live under `student.`; the VarMap wrapper lets
/// the encoder forward look them up without the prefix.
fn prefixed(vars: &VarMap) -> PrefixedVars<'_> {
    PrefixedVars { inner: vars }
}

struct PrefixedVars<'a> {
    inner: &'a VarMap,
}

impl std::ops::Deref for PrefixedVars<'_> {
    type Target = VarMap;
    fn deref(&self) -> &VarMap {
        self.inner
    }
}

/// Initialize the trainable set: a copy of the teacher under `student.` plus
/// the temperature.
pub fn init_student(teacher: &Params, cfg: &DistillConfig) -> Params {
    let mut p = Params::new();
    p.absorb("student", teacher.clone());
    p.push(LOG_TAU, Tensor::scalar(cfg.tau_init.ln()));
    p
}

/// Full distillation run over a paired corpus. Batches are the first
/// `cfg.batch` pairs when the corpus is small, otherwise a seeded sample per
/// step. Returns the trained student (under `student.`, with `temp.log_tau`)
/// and the loss curve.
pub fn train_distill(
    pairs: &[(Tensor, Tensor)],
    teacher: &Params,
    enc_cfg: &EncoderConfig,
    cfg: &DistillConfig,
) -> Result<(Params, Vec<DistillLossRow>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("paired corpus is empty".into()));
    }
    let mut rng = crate::rng::Rng::seed(cfg.seed);
    let mut student = init_student(teacher, cfg);
    let mut adam = Adam::new(&student, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let chosen: Vec<usize> = if pairs.len() <= cfg.batch {
            (0..pairs.len()).collect()
        } else {
            (0..cfg.batch).map(|_| rng.below(pairs.len())).collect()
        };
        let batch = DistillBatch::new(
            chosen
                .iter()
                .enumerate()
                .map(|(bi, &i)| (pairs[i].0.clone(), pairs[i].1.clone(), format!("{bi}:{i}")))
                .collect(),
        )?;
        let row = distill_step(&batch, teacher, &mut student, enc_cfg, cfg, &mut adam, step)?;
        curve.push(row);
    }
    Ok((student, curve))
}
