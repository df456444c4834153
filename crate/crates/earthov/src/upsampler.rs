//! Guided joint-bilateral feature upsampling with a single shared module.
//!
//! One parameterized JBU operator doubles the resolution of a feature map
//! under RGB guidance; applying it n times with the *same* parameters yields
//! 2ⁿ× upsampling. Per output pixel the kernel is the product of
//!
//! - a spatial Gaussian `exp(-‖p−q‖² / 2τ²_spatial)` over an 11×11 window, and
//! - a range kernel: softmax over the window of MLP-feature dot products
//!   scaled by 1/τ²_range,
//!
//! renormalized to sum to 1, and applied to the bilinearly aligned low-res
//! values (align-corners-false; windows clamp at borders). Both τ factors are
//! learnable, stored as logs so they stay positive.
//!
//! Training pairs the upsampler σ↑ with a learnable stride-2 blur downsampler
//! σ↓ (softmax-normalized taps, so it cannot cheat by rescaling) and a small
//! content retention network that must reconstruct the input image from the
//! upsampled features. The objective is
//! `mean‖lowres − σ↓ⁿ(σ↑ⁿ(lowres))‖² + γ·mean‖image − CRN(σ↑ⁿ(lowres))‖²`,
//! with the first term evaluated across jittered views for consistency.

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{Params, VarMap};
use crate::rng::Rng;
use crate::tape::{plan_bilinear, ResamplePlan, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW_RADIUS: usize = 5; // 11×11 window
pub const GUIDANCE_DIM: usize = 3;
pub const GUIDANCE_HIDDEN: usize = 32;
pub const CRN_HIDDEN: usize = 32;
pub const DOWN_KERNEL: usize = 5;

// ── Parameter bundles ────────────────────────────────────────────────

/// Learnable state of the shared JBU operator.
#[derive(Debug, Clone)]
pub struct JbuParams {
    pub window_radius: usize,
    /// `log_tau_spatial`, `log_tau_range`, `mlp.w1/b1/w2/b2`.
    pub weights: Params,
}

impl JbuParams {
    pub fn init(window_radius: usize, rng: &mut Rng) -> Self {
        let mut w = Params::new();
        w.push("log_tau_spatial", Tensor::scalar(3.0f64.ln()));
        w.push("log_tau_range", Tensor::scalar(0.0));
        w.push("mlp.w1", rng.gauss(&[GUIDANCE_DIM, GUIDANCE_HIDDEN], 1.0 / (GUIDANCE_DIM as f64).sqrt()));
        w.push("mlp.b1", Tensor::zeros(&[GUIDANCE_HIDDEN]));
        w.push("mlp.w2", rng.gauss(&[GUIDANCE_HIDDEN, GUIDANCE_HIDDEN], 1.0 / (GUIDANCE_HIDDEN as f64).sqrt()));
        w.push("mlp.b2", Tensor::zeros(&[GUIDANCE_HIDDEN]));
        JbuParams { window_radius, weights: w }
    }

    pub fn window_side(&self) -> usize {
        2 * self.window_radius + 1
    }

    pub fn taps(&self) -> usize {
        self.window_side() * self.window_side()
    }

    pub fn tau_spatial(&self) -> f64 {
        self.weights.get("log_tau_spatial").unwrap().data()[0].exp()
    }

    pub fn tau_range(&self) -> f64 {
        self.weights.get("log_tau_range").unwrap().data()[0].exp()
    }
}

/// Content retention network: conv(c→32, 3×3) → per-channel norm → conv(32→3,
/// 3×3) → tanh, so outputs live in [-1, 1] like the normalized input image.
#[derive(Debug, Clone)]
pub struct CrnParams {
    pub in_channels: usize,
    pub weights: Params,
}

impl CrnParams {
    pub fn init(in_channels: usize, rng: &mut Rng) -> Self {
        let mut w = Params::new();
        let fan1 = in_channels * 9;
        w.push("conv1.weight", rng.gauss(&[CRN_HIDDEN, in_channels, 3, 3], 1.0 / (fan1 as f64).sqrt()));
        w.push("conv1.bias", Tensor::zeros(&[CRN_HIDDEN]));
        w.push("norm.gain", Tensor::full(&[CRN_HIDDEN], 1.0));
        w.push("norm.bias", Tensor::zeros(&[CRN_HIDDEN]));
        let fan2 = CRN_HIDDEN * 9;
        w.push("conv2.weight", rng.gauss(&[3, CRN_HIDDEN, 3, 3], 1.0 / (fan2 as f64).sqrt()));
        w.push("conv2.bias", Tensor::zeros(&[3]));
        CrnParams { in_channels, weights: w }
    }
}

/// One softmax-normalized 5×5 blur per 2× step, taps shared across channels.
/// Normalization keeps σ↓ an averaging filter; it cannot shrink the
/// reconstruction loss by scaling energy.
#[derive(Debug, Clone)]
pub struct DownsamplerParams {
    pub steps: usize,
    pub weights: Params,
}

impl DownsamplerParams {
    pub fn init(steps: usize) -> Self {
        let mut w = Params::new();
        for i in 0..steps {
            // zero logits = uniform averaging start
            w.push(format!("step{i}.taps_raw"), Tensor::zeros(&[DOWN_KERNEL * DOWN_KERNEL]));
        }
        DownsamplerParams { steps, weights: w }
    }
}

/// The full trainable upsampling stack.
#[derive(Debug, Clone)]
pub struct SimFeatUpParams {
    pub jbu: JbuParams,
    pub crn: CrnParams,
    pub down: DownsamplerParams,
}

impl SimFeatUpParams {
    pub fn init(channels: usize, window_radius: usize, steps: usize, rng: &mut Rng) -> Self {
        SimFeatUpParams {
            jbu: JbuParams::init(window_radius, rng),
            crn: CrnParams::init(channels, rng),
            down: DownsamplerParams::init(steps),
        }
    }

    /// Flatten under the `jbu.` / `crn.` / `down.` prefixes.
    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.absorb("jbu", self.jbu.weights.clone());
        p.absorb("crn", self.crn.weights.clone());
        p.absorb("down", self.down.weights.clone());
        p
    }

    pub fn from_params(p: &Params, window_radius: usize, channels: usize, steps: usize) -> Result<Self> {
        let jbu = JbuParams { window_radius, weights: p.extract("jbu") };
        let crn = CrnParams { in_channels: channels, weights: p.extract("crn") };
        let down = DownsamplerParams { steps, weights: p.extract("down") };
        for name in [
            "log_tau_spatial",
            "log_tau_range",
            "mlp.w1",
            "mlp.b1",
            "mlp.w2",
            "mlp.b2",
        ] {
            jbu.weights.require(name)?;
        }
        for name in ["conv1.weight", "conv1.bias", "norm.gain", "norm.bias", "conv2.weight", "conv2.bias"] {
            crn.weights.require(name)?;
        }
        for i in 0..steps {
            down.weights.require(&format!("step{i}.taps_raw"))?;
        }
        let c1 = crn.weights.require("conv1.weight")?;
        if c1.shape()[1] != channels {
            return Err(Error::Config(format!(
                "CRN expects {} input channels, weights have {}",
                channels,
                c1.shape()[1]
            )));
        }
        Ok(SimFeatUpParams { jbu, crn, down })
    }
}

// ── Pure kernel functions ────────────────────────────────────────────

/// Spatial Gaussian over the (2r+1)² window offsets; the center tap is
/// exactly 1.
pub fn k_spatial(radius: usize, tau_spatial: f64) -> Tensor {
    let side = 2 * radius + 1;
    let mut out = Vec::with_capacity(side * side);
    for dy in -(radius as isize)..=radius as isize {
        for dx in -(radius as isize)..=radius as isize {
            let d2 = (dy * dy + dx * dx) as f64;
            out.push((-d2 / (2.0 * tau_spatial * tau_spatial)).exp());
        }
    }
    Tensor::new(vec![side * side], out).expect("side² entries")
}

/// Range kernel: softmax over the window of scaled MLP-feature dot products.
/// `guidance_window` holds the window's raw guidance rows, `center` the raw
/// guidance at the window center.
pub fn k_range(guidance_window: &Tensor, center: &Tensor, params: &JbuParams) -> Result<Tensor> {
    let taps = params.taps();
    if guidance_window.shape() != [taps, GUIDANCE_DIM] {
        return Err(Error::Dim(format!(
            "guidance window must be [{taps}, {GUIDANCE_DIM}], got {:?}",
            guidance_window.shape()
        )));
    }
    if center.shape() != [GUIDANCE_DIM] {
        return Err(Error::Dim(format!("center must be [{GUIDANCE_DIM}], got {:?}", center.shape())));
    }
    let mut tape = Tape::new();
    let vars = params.weights.leaves(&mut tape, false)?;
    let all = {
        let mut data = center.data().to_vec();
        data.extend_from_slice(guidance_window.data());
        tape.constant(Tensor::new(vec![taps + 1, GUIDANCE_DIM], data)?)?
    };
    let feats = guidance_mlp_on_tape(&mut tape, all, &vars, "")?;
    let center_f = tape.slice_rows(feats, 0, 1)?;
    let window_f = tape.slice_rows(feats, 1, taps + 1)?;
    let sims = tape.matmul_tb(window_f, center_f)?; // [taps, 1]
    let flat = tape.reshape(sims, &[1, taps])?;
    let inv_tau2 = tape.scale(vars.var("log_tau_range"), -2.0)?;
    let inv_tau2 = tape.exp(inv_tau2)?;
    let logits = tape.mul_scalar_var(flat, inv_tau2)?;
    let soft = tape.softmax(logits, 1)?;
    Ok(Tensor::new(vec![taps], tape.value(soft).data().to_vec())?)
}

// ── Tape-level forward pieces ────────────────────────────────────────

/// Two-layer pointwise MLP over guidance rows: [n, 3] -> [n, 32].
pub fn guidance_mlp_on_tape(tape: &mut Tape, g: Var, vars: &VarMap, prefix: &str) -> Result<Var> {
    let name = |rest: &str| {
        if prefix.is_empty() {
            rest.to_string()
        } else {
            format!("{prefix}.{rest}")
        }
    };
    let h = tape.matmul(g, vars.var(&name("mlp.w1")))?;
    let h = tape.add_row_vec(h, vars.var(&name("mlp.b1")))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, vars.var(&name("mlp.w2")))?;
    tape.add_row_vec(h, vars.var(&name("mlp.b2")))
}

/// Combined JBU weights for every output pixel of an H×W guidance grid:
/// product of spatial and range kernels, renormalized to sum 1 per pixel.
/// Returns [H·W, (2r+1)²].
pub fn jbu_weights_on_tape(
    tape: &mut Tape,
    guidance: &Tensor,
    vars: &VarMap,
    prefix: &str,
    radius: usize,
) -> Result<Var> {
    let name = |rest: &str| {
        if prefix.is_empty() {
            rest.to_string()
        } else {
            format!("{prefix}.{rest}")
        }
    };
    let gs = guidance.shape();
    if gs.len() != 3 || gs[0] != GUIDANCE_DIM {
        return Err(Error::Dim(format!("guidance must be [3, H, W], got {gs:?}")));
    }
    let (h, w) = (gs[1], gs[2]);
    let npix = h * w;
    // [3, H, W] -> [H·W, 3]
    let mut flat = Vec::with_capacity(npix * GUIDANCE_DIM);
    for p in 0..npix {
        for c in 0..GUIDANCE_DIM {
            flat.push(guidance.data()[c * npix + p]);
        }
    }
    let gconst = tape.constant(Tensor::new(vec![npix, GUIDANCE_DIM], flat)?)?;
    let feats = guidance_mlp_on_tape(tape, gconst, vars, prefix)?;
    let sim = tape.tap_dot(feats, h, w, radius)?;
    let inv_tau_r2 = tape.scale(vars.var(&name("log_tau_range")), -2.0)?;
    let inv_tau_r2 = tape.exp(inv_tau_r2)?;
    let logits = tape.mul_scalar_var(sim, inv_tau_r2)?;
    let range_k = tape.softmax(logits, 1)?;

    // spatial kernel as a row vector broadcast over pixels
    let side = 2 * radius + 1;
    let mut d2 = Vec::with_capacity(side * side);
    for dy in -(radius as isize)..=radius as isize {
        for dx in -(radius as isize)..=radius as isize {
            d2.push((dy * dy + dx * dx) as f64);
        }
    }
    let d2 = tape.constant(Tensor::new(vec![side * side], d2)?)?;
    let inv_tau_s2 = tape.scale(vars.var(&name("log_tau_spatial")), -2.0)?;
    let inv_tau_s2 = tape.exp(inv_tau_s2)?;
    let neg_half = tape.scale(inv_tau_s2, -0.5)?;
    let sp_logits = tape.mul_scalar_var(d2, neg_half)?;
    let spatial = tape.exp(sp_logits)?;

    let raw = tape.mul_row_vec(range_k, spatial)?;
    let sums = tape.row_sum(raw)?;
    tape.div_col_vec(raw, sums)
}

/// One guided 2× upsampling step: lowres [c, h, w] with guidance
/// [3, 2h, 2w] -> [c, 2h, 2w].
pub fn jbu_once_on_tape(
    tape: &mut Tape,
    lowres: Var,
    guidance: &Tensor,
    vars: &VarMap,
    prefix: &str,
    radius: usize,
) -> Result<Var> {
    let ls = tape.value(lowres).shape().to_vec();
    if ls.len() != 3 {
        return Err(Error::Dim(format!("lowres must be [c, h, w], got {ls:?}")));
    }
    let gs = guidance.shape();
    if gs.len() != 3 || gs[0] != GUIDANCE_DIM || gs[1] != 2 * ls[1] || gs[2] != 2 * ls[2] {
        return Err(Error::Dim(format!(
            "guidance {gs:?} must be [3, {}, {}]",
            2 * ls[1],
            2 * ls[2]
        )));
    }
    let plan = plan_bilinear(ls[1], ls[2], 2 * ls[1], 2 * ls[2]);
    let aligned = tape.resample(lowres, &plan)?;
    let wts = jbu_weights_on_tape(tape, guidance, vars, prefix, radius)?;
    tape.jbu_filter(aligned, wts, radius)
}

/// n repetitions of the shared JBU step; guidance at each step is the raw
/// image bilinearly resized to that step's target resolution.
pub fn simfeatup_upsample_on_tape(
    tape: &mut Tape,
    lowres: Var,
    image: &Tensor,
    vars: &VarMap,
    prefix: &str,
    radius: usize,
    steps: usize,
) -> Result<Var> {
    let ls = tape.value(lowres).shape().to_vec();
    if ls.len() != 3 {
        return Err(Error::Dim(format!("lowres must be [c, h, w], got {ls:?}")));
    }
    let is = image.shape();
    if is.len() != 3 || is[0] != GUIDANCE_DIM {
        return Err(Error::Dim(format!("image must be [3, H, W], got {is:?}")));
    }
    let factor = 1usize << steps;
    if ls[1] * factor > is[1] || ls[2] * factor > is[2] {
        return Err(Error::Dim(format!(
            "2^{steps}·({}, {}) overshoots the {}x{} image",
            ls[1], ls[2], is[1], is[2]
        )));
    }
    let mut x = lowres;
    for s in 0..steps {
        let (th, tw) = (ls[1] << (s + 1), ls[2] << (s + 1));
        let guidance = plan_bilinear(is[1], is[2], th, tw).apply(image)?;
        x = jbu_once_on_tape(tape, x, &guidance, vars, prefix, radius)?;
    }
    Ok(x)
}

/// CRN forward: [c, H, W] features -> [3, H, W] reconstruction in [-1, 1].
pub fn crn_on_tape(tape: &mut Tape, feats: Var, vars: &VarMap, prefix: &str) -> Result<Var> {
    let name = |rest: &str| {
        if prefix.is_empty() {
            rest.to_string()
        } else {
            format!("{prefix}.{rest}")
        }
    };
    let s = tape.value(feats).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Dim(format!("CRN input must be [c, H, W], got {s:?}")));
    }
    let (hh, ww) = (s[1], s[2]);
    let x = tape.conv2d(feats, vars.var(&name("conv1.weight")), Some(vars.var(&name("conv1.bias"))), 1)?;
    let flat = tape.reshape(x, &[CRN_HIDDEN, hh * ww])?;
    let n = tape.norm_last(flat, 1e-5)?;
    let n = tape.mul_col_vec(n, vars.var(&name("norm.gain")))?;
    let n = tape.add_col_vec(n, vars.var(&name("norm.bias")))?;
    let back = tape.reshape(n, &[CRN_HIDDEN, hh, ww])?;
    let y = tape.conv2d(back, vars.var(&name("conv2.weight")), Some(vars.var(&name("conv2.bias"))), 1)?;
    tape.tanh(y)
}

/// Chain of stride-2 softmax-normalized blurs: [c, H, W] -> [c, H/2ⁿ, W/2ⁿ].
pub fn downsample_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &VarMap,
    prefix: &str,
    steps: usize,
) -> Result<Var> {
    let mut cur = x;
    for i in 0..steps {
        let name = if prefix.is_empty() {
            format!("step{i}.taps_raw")
        } else {
            format!("{prefix}.step{i}.taps_raw")
        };
        let taps = tape.softmax(vars.var(&name), 0)?;
        cur = tape.blur_down(cur, taps, DOWN_KERNEL, 2, 2)?;
    }
    Ok(cur)
}

/// Mean squared difference of two equally shaped tensors.
pub fn mse_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Feature reconstruction loss: mean‖lowres − σ↓ⁿ(hires)‖².
pub fn loss_rec_on_tape(
    tape: &mut Tape,
    lowres: Var,
    hires: Var,
    vars: &VarMap,
    down_prefix: &str,
    steps: usize,
) -> Result<Var> {
    let rec = downsample_on_tape(tape, hires, vars, down_prefix, steps)?;
    if tape.value(rec).shape() != tape.value(lowres).shape() {
        return Err(Error::Dim(format!(
            "downsampled features {:?} do not match lowres {:?}",
            tape.value(rec).shape(),
            tape.value(lowres).shape()
        )));
    }
    mse_on_tape(tape, lowres, rec)
}

/// Image reconstruction loss: mean‖image − CRN(hires)‖². The image must be
/// normalized to [-1, 1].
pub fn loss_img_on_tape(
    tape: &mut Tape,
    image: &Tensor,
    hires: Var,
    vars: &VarMap,
    crn_prefix: &str,
) -> Result<Var> {
    if image.data().iter().any(|v| v.abs() > 1.0 + 1e-9) {
        return Err(Error::Contract(
            "image must be normalized to [-1, 1] before the reconstruction loss".into(),
        ));
    }
    let hs = tape.value(hires).shape().to_vec();
    if image.shape() != [GUIDANCE_DIM, hs[1], hs[2]] {
        return Err(Error::Dim(format!(
            "image {:?} does not match CRN output [3, {}, {}]",
            image.shape(),
            hs[1],
            hs[2]
        )));
    }
    let rec = crn_on_tape(tape, hires, vars, crn_prefix)?;
    let img = tape.constant(image.clone())?;
    mse_on_tape(tape, img, rec)
}

// ── Invertible view jitter ───────────────────────────────────────────

/// Geometric transforms used by the multi-view consistency loss. All are
/// linear resamplings of the pixel grid and carry an explicit inverse (edge
/// effects aside for translation and zoom).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViewTransform {
    Identity,
    HFlip,
    /// Shift content by (dy, dx) pixels, replicating edges.
    Translate { dy: isize, dx: isize },
    /// Scale about the image center; bilinear with edge clamping.
    Zoom { factor: f64 },
}

impl ViewTransform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ViewTransform::Zoom { factor } if !(factor.is_finite() && factor > 0.0) => Err(
                Error::Config(format!("zoom factor {factor} is not invertible")),
            ),
            _ => Ok(()),
        }
    }

    pub fn inverse(&self) -> Result<ViewTransform> {
        self.validate()?;
        Ok(match *self {
            ViewTransform::Identity => ViewTransform::Identity,
            ViewTransform::HFlip => ViewTransform::HFlip,
            ViewTransform::Translate { dy, dx } => ViewTransform::Translate { dy: -dy, dx: -dx },
            ViewTransform::Zoom { factor } => ViewTransform::Zoom { factor: 1.0 / factor },
        })
    }

    /// Sampling plan for applying this transform to an h×w plane.
    pub fn plan(&self, h: usize, w: usize) -> ResamplePlan {
        let mut per_pixel = Vec::with_capacity(h * w);
        match *self {
            ViewTransform::Identity => {
                for p in 0..h * w {
                    per_pixel.push(vec![(p, 1.0)]);
                }
            }
            ViewTransform::HFlip => {
                for y in 0..h {
                    for x in 0..w {
                        per_pixel.push(vec![(y * w + (w - 1 - x), 1.0)]);
                    }
                }
            }
            ViewTransform::Translate { dy, dx } => {
                for y in 0..h {
                    for x in 0..w {
                        let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                        per_pixel.push(vec![(sy * w + sx, 1.0)]);
                    }
                }
            }
            ViewTransform::Zoom { factor } => {
                let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                for y in 0..h {
                    for x in 0..w {
                        let sy = (cy + (y as f64 - cy) / factor).clamp(0.0, h as f64 - 1.0);
                        let sx = (cx + (x as f64 - cx) / factor).clamp(0.0, w as f64 - 1.0);
                        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                        let mut taps = Vec::with_capacity(4);
                        let mut push = |yy: usize, xx: usize, wt: f64| {
                            if wt != 0.0 {
                                taps.push((yy * w + xx, wt));
                            }
                        };
                        push(y0, x0, (1.0 - fy) * (1.0 - fx));
                        push(y0, x1, (1.0 - fy) * fx);
                        push(y1, x0, fy * (1.0 - fx));
                        push(y1, x1, fy * fx);
                        per_pixel.push(taps);
                    }
                }
            }
        }
        ResamplePlan::from_taps(h, w, h, w, per_pixel)
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Dim(format!("transform expects [c, h, w], got {s:?}")));
        }
        self.plan(s[1], s[2]).apply(t)
    }
}

/// Draw a jitter within the configured envelope: flip, |translation| ≤ 8 px,
/// zoom in [0.9, 1.1].
pub fn random_jitter(rng: &mut Rng) -> ViewTransform {
    match rng.below(3) {
        0 => ViewTransform::HFlip,
        1 => ViewTransform::Translate {
            dy: rng.below(17) as isize - 8,
            dx: rng.below(17) as isize - 8,
        },
        _ => ViewTransform::Zoom { factor: 0.9 + 0.2 * rng.f64() },
    }
}

/// Multi-view feature consistency: for each view v, encode v(image) to
/// low-res features and compare against σ↓ⁿ(v(σ↑ⁿ(features))) from the
/// untransformed image. Averaged over views; an identity-only view list
/// reduces to the plain reconstruction loss.
#[allow(clippy::too_many_arguments)]
pub fn multiview_consistency_on_tape(
    tape: &mut Tape,
    image: &Tensor,
    enc_weights: &Params,
    enc_cfg: &EncoderConfig,
    hires: Var,
    vars: &VarMap,
    down_prefix: &str,
    steps: usize,
    views: &[ViewTransform],
) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::Config("multi-view loss needs at least one view".into()));
    }
    for v in views {
        v.validate()?;
    }
    let hs = tape.value(hires).shape().to_vec();
    let mut total: Option<Var> = None;
    for view in views {
        let img_v = view.apply(image)?;
        let enc = encoder::encode(&img_v, enc_weights, enc_cfg)?;
        let lowres_v = tape.constant(tokens_to_feature_map(&enc.o_prime, enc.o.h, enc.o.w)?)?;
        let hires_v = tape.resample(hires, &view.plan(hs[1], hs[2]))?;
        let l = loss_rec_on_tape(tape, lowres_v, hires_v, vars, down_prefix, steps)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    tape.scale(total.unwrap(), 1.0 / views.len() as f64)
}

/// [h·w, c] token rows -> [c, h, w] feature map.
pub fn tokens_to_feature_map(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::Dim(format!("tokens {s:?} do not form an {h}x{w} grid")));
    }
    let c = s[1];
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for j in 0..c {
            out[j * h * w + p] = tokens.at2(p, j);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

// ── Pure wrappers ────────────────────────────────────────────────────

/// One 2× step without gradient tracking.
pub fn jbu_once(lowres: &Tensor, guidance: &Tensor, params: &JbuParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.weights.leaves(&mut tape, false)?;
    let lv = tape.constant(lowres.clone())?;
    let out = jbu_once_on_tape(&mut tape, lv, guidance, &vars, "", params.window_radius)?;
    Ok(tape.value(out).clone())
}

/// 2ⁿ× upsampling with the shared step.
pub fn simfeatup_upsample(
    lowres: &Tensor,
    image: &Tensor,
    params: &JbuParams,
    steps: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.weights.leaves(&mut tape, false)?;
    let lv = tape.constant(lowres.clone())?;
    let out =
        simfeatup_upsample_on_tape(&mut tape, lv, image, &vars, "", params.window_radius, steps)?;
    Ok(tape.value(out).clone())
}

/// Combined per-pixel JBU weights for a guidance plane (diagnostic surface;
/// rows sum to 1).
pub fn jbu_combined_weights(guidance: &Tensor, params: &JbuParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.weights.leaves(&mut tape, false)?;
    let w = jbu_weights_on_tape(&mut tape, guidance, &vars, "", params.window_radius)?;
    Ok(tape.value(w).clone())
}

// ── Training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainUpsamplerConfig {
    pub steps: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Square crop side; must be a multiple of the encoder patch size.
    pub crop: usize,
    pub batch: usize,
    /// Total views per item, including the leading identity view.
    pub views: usize,
    /// 2× upsampling repetitions (2ⁿ·grid = crop).
    pub jbu_steps: usize,
    pub seed: u64,
}

impl Default for TrainUpsamplerConfig {
    fn default() -> Self {
        TrainUpsamplerConfig {
            steps: 200,
            lr: 1e-3,
            gamma: 0.1,
            crop: 64,
            batch: 2,
            views: 2,
            jbu_steps: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UpsamplerLossRow {
    pub step: usize,
    pub rec: f64,
    pub img: f64,
    pub total: f64,
}

/// Train σ↑ / σ↓ / CRN on random crops of a raw-image corpus with a frozen
/// encoder. Returns the trained parameters and the per-step loss curve.
pub fn train_simfeatup(
    corpus: &[Tensor],
    enc_weights: &Params,
    enc_cfg: &EncoderConfig,
    cfg: &TrainUpsamplerConfig,
) -> Result<(SimFeatUpParams, Vec<UpsamplerLossRow>)> {
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    if cfg.crop % enc_cfg.patch_size != 0 {
        return Err(Error::Config(format!(
            "crop {} must be a multiple of the patch size {}",
            cfg.crop, enc_cfg.patch_size
        )));
    }
    let crop_cfg = EncoderConfig { image_size: cfg.crop, ..enc_cfg.clone() };
    let grid = crop_cfg.grid();
    if grid << cfg.jbu_steps != cfg.crop {
        return Err(Error::Config(format!(
            "2^{} · {grid} must equal the crop size {}",
            cfg.jbu_steps, cfg.crop
        )));
    }
    for (i, img) in corpus.iter().enumerate() {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 || s[1] < cfg.crop || s[2] < cfg.crop {
            return Err(Error::Input(format!(
                "corpus image {i} has shape {s:?}, needs [3, ≥{0}, ≥{0}]",
                cfg.crop
            )));
        }
    }

    let mut rng = Rng::seed(cfg.seed);
    let mut model = SimFeatUpParams::init(
        crop_cfg.proj_dim,
        DEFAULT_WINDOW_RADIUS,
        cfg.jbu_steps,
        &mut rng,
    );
    let mut params = model.to_params();
    let mut adam = Adam::new(&params, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut grad_sum: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        let (mut rec_acc, mut img_acc, mut tot_acc) = (0.0, 0.0, 0.0);

        for _ in 0..cfg.batch {
            let img = &corpus[rng.below(corpus.len())];
            let (ih, iw) = (img.shape()[1], img.shape()[2]);
            let oy = rng.below(ih - cfg.crop + 1);
            let ox = rng.below(iw - cfg.crop + 1);
            let crop = crop_image(img, oy, ox, cfg.crop)?;

            let mut views = vec![ViewTransform::Identity];
            for _ in 1..cfg.views {
                views.push(random_jitter(&mut rng));
            }

            let enc = encoder::encode(&crop, enc_weights, &crop_cfg)?;
            let lowres = tokens_to_feature_map(&enc.o_prime, enc.o.h, enc.o.w)?;

            let mut tape = Tape::new();
            let vars = params.leaves(&mut tape, true)?;
            let lv = tape.constant(lowres)?;
            let hires = simfeatup_upsample_on_tape(
                &mut tape,
                lv,
                &crop,
                &vars,
                "jbu",
                model.jbu.window_radius,
                cfg.jbu_steps,
            )?;
            let rec = multiview_consistency_on_tape(
                &mut tape, &crop, enc_weights, &crop_cfg, hires, &vars, "down", cfg.jbu_steps,
                &views,
            )?;
            let img_l = loss_img_on_tape(&mut tape, &crop, hires, &vars, "crn")?;
            let scaled = tape.scale(img_l, cfg.gamma)?;
            let total = tape.add(rec, scaled)?;
            tape.backward(total)?;

            rec_acc += tape.value(rec).item()?;
            img_acc += tape.value(img_l).item()?;
            tot_acc += tape.value(total).item()?;
            for ((_, sum), (_, g)) in grad_sum.iter_mut().zip(vars.grads(&tape)) {
                let merged: Vec<f64> =
                    sum.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                *sum = Tensor::new(sum.shape().to_vec(), merged)?;
            }
        }

        let scale = 1.0 / cfg.batch as f64;
        for (_, g) in grad_sum.iter_mut() {
            *g = g.map(|v| v * scale);
        }
        adam.step(&mut params, &grad_sum);
        curve.push(UpsamplerLossRow {
            step,
            rec: rec_acc * scale,
            img: img_acc * scale,
            total: tot_acc * scale,
        });
    }

    model = SimFeatUpParams::from_params(
        &params,
        model.jbu.window_radius,
        crop_cfg.proj_dim,
        cfg.jbu_steps,
    )?;
    Ok((model, curve))
}

/// Crop `[3, H, W]` to a `side`×`side` window at (oy, ox).
pub fn crop_image(img: &Tensor, oy: usize, ox: usize, side: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || oy + side > s[1] || ox + side > s[2] {
        return Err(Error::Dim(format!(
            "crop {side}² at ({oy}, {ox}) exceeds {s:?}"
        )));
    }
    let mut out = Vec::with_capacity(s[0] * side * side);
    for c in 0..s[0] {
        for y in 0..side {
            for x in 0..side {
                out.push(img.at3(c, oy + y, ox + x));
            }
        }
    }
    Tensor::new(vec![s[0], side, side], out)
}
