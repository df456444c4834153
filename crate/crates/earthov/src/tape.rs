//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every numeric forward pass in the crate — encoder blocks, the guided
//! upsampler, reconstruction and distillation losses — is recorded on a
//! [`Tape`] and differentiated by one shared backward pass, so a single
//! mechanism carries all trainable subsystems.
//!
//! Values are computed eagerly: each op validates shapes, produces its output
//! tensor immediately (rejecting NaN/Inf), and records a node holding the
//! input handles plus whatever the backward rule needs. `backward` walks the
//! nodes in exact reverse recording order and accumulates gradients into
//! leaves marked `requires_grad`.
//!
//! Tensors on the tape are immutable once recorded; gradients accumulate
//! across repeated `backward` calls until [`Tape::reset_grads`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Linear resampling recipe: for each output pixel, a list of
/// (source pixel, weight) taps. Shared by bilinear resize and the invertible
/// view jitters; built once per geometry and reused across channels.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// CSR offsets, length `out_h * out_w + 1`.
    offsets: Vec<u32>,
    taps: Vec<(u32, f64)>,
}

impl ResamplePlan {
    pub fn from_taps(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        per_pixel: Vec<Vec<(usize, f64)>>,
    ) -> Self {
        debug_assert_eq!(per_pixel.len(), out_h * out_w);
        let mut offsets = Vec::with_capacity(per_pixel.len() + 1);
        let mut taps = Vec::new();
        offsets.push(0u32);
        for pixel_taps in &per_pixel {
            for &(src, w) in pixel_taps {
                taps.push((src as u32, w));
            }
            offsets.push(taps.len() as u32);
        }
        ResamplePlan { in_h, in_w, out_h, out_w, offsets, taps }
    }

    fn pixel_taps(&self, p: usize) -> &[(u32, f64)] {
        &self.taps[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }

    /// Apply to a `[c, in_h, in_w]` tensor without touching the tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.in_h || shape[2] != self.in_w {
            return Err(Error::Dim(format!(
                "resample expects [c, {}, {}], got {:?}",
                self.in_h, self.in_w, shape
            )));
        }
        let c = shape[0];
        let (ipix, opix) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let xd = x.data();
        let mut out = vec![0.0; c * opix];
        for ch in 0..c {
            let plane = &xd[ch * ipix..(ch + 1) * ipix];
            let oplane = &mut out[ch * opix..(ch + 1) * opix];
            for p in 0..opix {
                let mut acc = 0.0;
                for &(src, w) in self.pixel_taps(p) {
                    acc += w * plane[src as usize];
                }
                oplane[p] = acc;
            }
        }
        Tensor::new(vec![c, self.out_h, self.out_w], out)
    }
}

/// Bilinear resize plan, align-corners-false, edge-clamped.
pub fn plan_bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> ResamplePlan {
    let mut per_pixel = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * in_h as f64 / out_h as f64 - 0.5)
            .clamp(0.0, (in_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * in_w as f64 / out_w as f64 - 0.5)
                .clamp(0.0, (in_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            let mut taps = Vec::with_capacity(4);
            let mut push = |y: usize, x: usize, w: f64| {
                if w != 0.0 {
                    taps.push((y * in_w + x, w));
                }
            };
            push(y0, x0, (1.0 - fy) * (1.0 - fx));
            push(y0, x1, (1.0 - fy) * fx);
            push(y1, x0, fy * (1.0 - fx));
            push(y1, x1, fy * fx);
            per_pixel.push(taps);
        }
    }
    ResamplePlan::from_taps(in_h, in_w, out_h, out_w, per_pixel)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Sqrt(Var),
    Tanh(Var),
    Gelu(Var),
    ScaleConst(Var, f64),
    AddConst(Var),
    /// Broadcast multiply by a 1-element tensor.
    MulScalarVar(Var, Var),
    Matmul(Var, Var),
    /// a [m,k] · b[n,k]^T -> [m,n]
    MatmulTB(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    /// Mean-0/var-1 normalization of the last axis (no affine).
    NormLast { x: Var, eps: f64 },
    /// x[n,m] + v[m] per row.
    AddRowVec(Var, Var),
    /// x[n,m] * v[m] per row.
    MulRowVec(Var, Var),
    /// x[n,m] * s[n] per column.
    MulColVec(Var, Var),
    /// x[n,m] + s[n] per column.
    AddColVec(Var, Var),
    /// x[n,m] / s[n] per column.
    DivColVec(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// x[n,m] -> [n]
    RowSum(Var),
    /// Sum of the main diagonal of a square matrix -> [1].
    DiagSum(Var),
    SliceRows { x: Var, r0: usize },
    SliceCols { x: Var, c0: usize, c1: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize, stride: usize },
    /// Channel-shared k×k blur with stride, taps [k*k].
    BlurDown { x: Var, taps: Var, k: usize, pad: usize, stride: usize },
    Resample { x: Var, plan: ResamplePlan },
    /// sim[p,t] = g[p] · g[nbr(p,t)] over a (2r+1)^2 clamped window.
    TapDot { g: Var, h: usize, w: usize, radius: usize },
    /// out[c,p] = sum_t wts[p,t] * u[c, nbr(p,t)]
    JbuFilter { u: Var, wts: Var, radius: usize },
    /// Mean-pool an h×w token grid into k×k remainder-absorbing tiles.
    RegionPool { x: Var, h: usize, w: usize, k: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Clamped window neighbor: pixel p=(py,px) on an h×w grid, tap index t over
/// a (2r+1)^2 window; out-of-range neighbors clamp to the border.
#[inline]
fn window_neighbor(p: usize, t: usize, h: usize, w: usize, r: usize) -> usize {
    let side = 2 * r + 1;
    let (py, px) = (p / w, p % w);
    let dy = (t / side) as isize - r as isize;
    let dx = (t % side) as isize - r as isize;
    let qy = (py as isize + dy).clamp(0, h as isize - 1) as usize;
    let qx = (px as isize + dx).clamp(0, w as isize - 1) as usize;
    qy * w + qx
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("same shape"))
    }

    /// Gradient of a node, zero-filled when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.req(a) || self.req(b)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dim(format!(
                "{op}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), data, self.req2(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), data, self.req2(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), data, self.req2(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).map(|x| -x);
        self.push("neg", Op::Neg(a), data, self.req(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), data, self.req(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).map(f64::sqrt);
        self.push("sqrt", Op::Sqrt(a), data, self.req(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).map(f64::tanh);
        self.push("tanh", Op::Tanh(a), data, self.req(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).map(gelu);
        self.push("gelu", Op::Gelu(a), data, self.req(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).map(|x| x * k);
        self.push("scale", Op::ScaleConst(a, k), data, self.req(a))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).map(|x| x + k);
        self.push("add_const", Op::AddConst(a), data, self.req(a))
    }

    /// Broadcast-multiply `a` by the single element of `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let data = self.value(a).map(|x| x * sv);
        self.push("mul_scalar_var", Op::MulScalarVar(a, s), data, self.req2(a, s))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("{op}: expected rank-2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: inner dims {k} vs {k2} disagree"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", Op::Matmul(a, b), t, self.req2(a, b))
    }

    /// a [m,k] · b[n,k]^T -> [m,n]; the similarity-matrix workhorse.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_tb")?;
        let (n, k2) = self.dims2(b, "matmul_tb")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul_tb: inner dims {k} vs {k2} disagree"
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = crate::tensor::dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul_tb", Op::MatmulTB(a, b), t, self.req2(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("transpose", Op::Transpose(a), t, self.req(a))
    }

    // ── Normalization and softmax ────────────────────────────────────

    fn lane_dims(&self, v: Var, axis: usize, op: &str) -> Result<(usize, usize, usize)> {
        let s = self.value(v).shape();
        if axis >= s.len() {
            return Err(Error::Dim(format!("{op}: axis {axis} out of range for {s:?}")));
        }
        if s[axis] == 0 {
            return Err(Error::Dim(format!("{op}: empty axis {axis}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.lane_dims(x, axis, "softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for_each_lane(outer, len, inner, |base, step| {
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(xd[base + k * step]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                let e = (xd[base + k * step] - max).exp();
                out[base + k * step] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * step] /= sum;
            }
        });
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("softmax", Op::Softmax { x, axis }, t, self.req(x))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.lane_dims(x, axis, "log_softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for_each_lane(outer, len, inner, |base, step| {
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(xd[base + k * step]);
            }
            let mut sum = 0.0;
            for k in 0..len {
                sum += (xd[base + k * step] - max).exp();
            }
            let lse = max + sum.ln();
            for k in 0..len {
                out[base + k * step] = xd[base + k * step] - lse;
            }
        });
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("log_softmax", Op::LogSoftmax { x, axis }, t, self.req(x))
    }

    /// Normalize the last axis to mean 0, variance 1 (ε-stabilized), no affine.
    pub fn norm_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let m = *s.last().ok_or_else(|| Error::Dim("norm_last: rank-0".into()))?;
        if m == 0 {
            return Err(Error::Dim("norm_last: zero-length last axis".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for r in 0..xd.len() / m {
            let row = &xd[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                out[r * m + j] = (row[j] - mean) * inv;
            }
        }
        let t = Tensor::new(s, out)?;
        self.push("norm_last", Op::NormLast { x, eps }, t, self.req(x))
    }

    /// LayerNorm: normalize the last axis, then scale/shift by `gain`/`bias`
    /// (both `[last_dim]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let m = *self
            .value(x)
            .shape()
            .last()
            .ok_or_else(|| Error::Dim("layer_norm: rank-0".into()))?;
        if self.value(gain).shape() != [m] || self.value(bias).shape() != [m] {
            return Err(Error::Dim(format!(
                "layer_norm: gain/bias must be [{m}], got {:?}/{:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let n = self.norm_last(x, 1e-5)?;
        let scaled = self.mul_row_vec(n, gain)?;
        self.add_row_vec(scaled, bias)
    }

    // ── Broadcast helpers ────────────────────────────────────────────

    fn rowvec_dims(&self, x: Var, v: Var, op: &str) -> Result<(usize, usize)> {
        let (n, m) = self.dims2(x, op)?;
        if self.value(v).shape() != [m] {
            return Err(Error::Dim(format!(
                "{op}: vector must be [{m}], got {:?}",
                self.value(v).shape()
            )));
        }
        Ok((n, m))
    }

    fn colvec_dims(&self, x: Var, v: Var, op: &str) -> Result<(usize, usize)> {
        let (n, m) = self.dims2(x, op)?;
        if self.value(v).shape() != [n] {
            return Err(Error::Dim(format!(
                "{op}: vector must be [{n}], got {:?}",
                self.value(v).shape()
            )));
        }
        Ok((n, m))
    }

    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, m) = self.rowvec_dims(x, v, "add_row_vec")?;
        let (xd, vd) = (self.value(x).data(), self.value(v).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xd[i * m + j] + vd[j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("add_row_vec", Op::AddRowVec(x, v), t, self.req2(x, v))
    }

    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, m) = self.rowvec_dims(x, v, "mul_row_vec")?;
        let (xd, vd) = (self.value(x).data(), self.value(v).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xd[i * m + j] * vd[j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("mul_row_vec", Op::MulRowVec(x, v), t, self.req2(x, v))
    }

    pub fn mul_col_vec(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, m) = self.colvec_dims(x, s, "mul_col_vec")?;
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xd[i * m + j] * sd[i];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("mul_col_vec", Op::MulColVec(x, s), t, self.req2(x, s))
    }

    pub fn add_col_vec(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, m) = self.colvec_dims(x, s, "add_col_vec")?;
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xd[i * m + j] + sd[i];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("add_col_vec", Op::AddColVec(x, s), t, self.req2(x, s))
    }

    pub fn div_col_vec(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, m) = self.colvec_dims(x, s, "div_col_vec")?;
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xd[i * m + j] / sd[i];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("div_col_vec", Op::DivColVec(x, s), t, self.req2(x, s))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum_all", Op::SumAll(x), Tensor::scalar(s), self.req(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Dim("mean_all: empty tensor".into()));
        }
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.push("mean_all", Op::MeanAll(x), Tensor::scalar(s), self.req(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "row_sum")?;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..n).map(|i| xd[i * m..(i + 1) * m].iter().sum()).collect();
        let t = Tensor::new(vec![n], out)?;
        self.push("row_sum", Op::RowSum(x), t, self.req(x))
    }

    pub fn diag_sum(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2(x, "diag_sum")?;
        if n != m {
            return Err(Error::Dim(format!("diag_sum: non-square [{n}, {m}]")));
        }
        let xd = self.value(x).data();
        let s: f64 = (0..n).map(|i| xd[i * n + i]).sum();
        self.push("diag_sum", Op::DiagSum(x), Tensor::scalar(s), self.req(x))
    }

    // ── Shape surgery ────────────────────────────────────────────────

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var> {
        let (n, m) = self.dims2(x, "slice_rows")?;
        if r0 >= r1 || r1 > n {
            return Err(Error::Dim(format!("slice_rows: [{r0}, {r1}) of {n}")));
        }
        let xd = self.value(x).data();
        let t = Tensor::new(vec![r1 - r0, m], xd[r0 * m..r1 * m].to_vec())?;
        self.push("slice_rows", Op::SliceRows { x, r0 }, t, self.req(x))
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let (n, m) = self.dims2(x, "slice_cols")?;
        if c0 >= c1 || c1 > m {
            return Err(Error::Dim(format!("slice_cols: [{c0}, {c1}) of {m}")));
        }
        let xd = self.value(x).data();
        let w = c1 - c0;
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            out[i * w..(i + 1) * w].copy_from_slice(&xd[i * m + c0..i * m + c1]);
        }
        let t = Tensor::new(vec![n, w], out)?;
        self.push("slice_cols", Op::SliceCols { x, c0, c1 }, t, self.req(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: no parts".into()));
        }
        let n = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = self.dims2(p, "concat_cols")?;
            if pn != n {
                return Err(Error::Dim("concat_cols: row counts differ".into()));
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut base = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..n {
                out[i * total + base..i * total + base + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            base += w;
        }
        let req = parts.iter().any(|&p| self.req(p));
        let t = Tensor::new(vec![n, total], out)?;
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), t, req)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: no parts".into()));
        }
        let m = self.dims2(parts[0], "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pn, pm) = self.dims2(p, "concat_rows")?;
            if pm != m {
                return Err(Error::Dim("concat_rows: column counts differ".into()));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pn;
        }
        let req = parts.iter().any(|&p| self.req(p));
        let t = Tensor::new(vec![rows, m], data)?;
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), t, req)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        self.push("reshape", Op::Reshape(x), t, self.req(x))
    }

    // ── Image kernels ────────────────────────────────────────────────

    /// 2-d cross-correlation, zero padding, unit stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        self.conv2d_strided(x, w, b, pad, 1)
    }

    pub fn conv2d_strided(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d: want x [ci,h,w] and w [co,ci,kh,kw], got {xs:?} and {ws:?}"
            )));
        }
        let (ci, h, iw) = (xs[0], xs[1], xs[2]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ci != wci {
            return Err(Error::Dim(format!("conv2d: channels {ci} vs {wci}")));
        }
        if kh > h + 2 * pad || kw > iw + 2 * pad {
            return Err(Error::Dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                iw + 2 * pad
            )));
        }
        if let Some(bv) = b {
            if self.value(bv).shape() != [co] {
                return Err(Error::Dim(format!(
                    "conv2d: bias must be [{co}], got {:?}",
                    self.value(bv).shape()
                )));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (iw + 2 * pad - kw) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            let bias = b.map_or(0.0, |bv| self.value(bv).data()[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for c in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                acc += wd[((o * ci + c) * kh + ky) * kw + kx]
                                    * xd[(c * h + iy as usize) * iw + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let req = self.req2(x, w) || b.is_some_and(|bv| self.req(bv));
        let t = Tensor::new(vec![co, oh, ow], out)?;
        self.push("conv2d", Op::Conv2d { x, w, b, pad, stride }, t, req)
    }

    /// Stride-s blur whose k×k taps are shared across all channels. Borders
    /// replicate edge pixels, so a taps-sum-1 kernel preserves constant
    /// fields exactly.
    pub fn blur_down(&mut self, x: Var, taps: Var, k: usize, pad: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Dim(format!("blur_down: want [c,h,w], got {xs:?}")));
        }
        if self.value(taps).numel() != k * k {
            return Err(Error::Dim(format!(
                "blur_down: taps must hold {} values",
                k * k
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Dim("blur_down: kernel larger than padded input".into()));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let xd = self.value(x).data();
        let td = self.value(taps).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = ((oy * stride + ky) as isize - pad as isize)
                            .clamp(0, h as isize - 1) as usize;
                        for kx in 0..k {
                            let ix = ((ox * stride + kx) as isize - pad as isize)
                                .clamp(0, w as isize - 1) as usize;
                            acc += td[ky * k + kx] * xd[(ch * h + iy) * w + ix];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let t = Tensor::new(vec![c, oh, ow], out)?;
        let req = self.req2(x, taps);
        self.push("blur_down", Op::BlurDown { x, taps, k, pad, stride }, t, req)
    }

    pub fn resample(&mut self, x: Var, plan: &ResamplePlan) -> Result<Var> {
        let t = plan.apply(self.value(x))?;
        self.push("resample", Op::Resample { x, plan: plan.clone() }, t, self.req(x))
    }

    /// Per-pixel dot products of a feature field with its own clamped
    /// window neighbors: g [h·w, d] -> sim [h·w, (2r+1)^2].
    pub fn tap_dot(&mut self, g: Var, h: usize, w: usize, radius: usize) -> Result<Var> {
        let (n, d) = self.dims2(g, "tap_dot")?;
        if n != h * w {
            return Err(Error::Dim(format!("tap_dot: {n} rows != {h}x{w}")));
        }
        let taps = (2 * radius + 1) * (2 * radius + 1);
        let gd = self.value(g).data();
        let mut out = vec![0.0; n * taps];
        for p in 0..n {
            let gp = &gd[p * d..(p + 1) * d];
            for t in 0..taps {
                let q = window_neighbor(p, t, h, w, radius);
                out[p * taps + t] = crate::tensor::dot(gp, &gd[q * d..(q + 1) * d]);
            }
        }
        let t = Tensor::new(vec![n, taps], out)?;
        self.push("tap_dot", Op::TapDot { g, h, w, radius }, t, self.req(g))
    }

    /// Window-weighted gather: out[c,p] = Σ_t wts[p,t] · u[c, nbr(p,t)].
    pub fn jbu_filter(&mut self, u: Var, wts: Var, radius: usize) -> Result<Var> {
        let us = self.value(u).shape().to_vec();
        if us.len() != 3 {
            return Err(Error::Dim(format!("jbu_filter: want [c,h,w], got {us:?}")));
        }
        let (c, h, w) = (us[0], us[1], us[2]);
        let n = h * w;
        let taps = (2 * radius + 1) * (2 * radius + 1);
        let (wn, wt) = self.dims2(wts, "jbu_filter")?;
        if wn != n || wt != taps {
            return Err(Error::Dim(format!(
                "jbu_filter: weights [{wn}, {wt}] vs expected [{n}, {taps}]"
            )));
        }
        let ud = self.value(u).data();
        let wd = self.value(wts).data();
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            let wrow = &wd[p * taps..(p + 1) * taps];
            for (t, &wv) in wrow.iter().enumerate() {
                let q = window_neighbor(p, t, h, w, radius);
                for ch in 0..c {
                    out[ch * n + p] += wv * ud[ch * n + q];
                }
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        self.push("jbu_filter", Op::JbuFilter { u, wts, radius }, t, self.req2(u, wts))
    }

    /// Mean-pool an h×w grid of token rows into k×k tiles; trailing tiles
    /// absorb any remainder. x [h·w, c] -> [k², c].
    pub fn region_pool(&mut self, x: Var, h: usize, w: usize, k: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "region_pool")?;
        if n != h * w {
            return Err(Error::Dim(format!("region_pool: {n} rows != {h}x{w}")));
        }
        if h < k || w < k {
            return Err(Error::Dim(format!(
                "region_pool: grid {h}x{w} smaller than k={k}"
            )));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; k * k * c];
        for ri in 0..k {
            let (y0, y1) = tile_bounds(h, k, ri);
            for rj in 0..k {
                let (x0, x1) = tile_bounds(w, k, rj);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let o = (ri * k + rj) * c;
                for y in y0..y1 {
                    for x2 in x0..x1 {
                        let row = &xd[(y * w + x2) * c..(y * w + x2 + 1) * c];
                        for j in 0..c {
                            out[o + j] += row[j];
                        }
                    }
                }
                for j in 0..c {
                    out[o + j] /= count;
                }
            }
        }
        let t = Tensor::new(vec![k * k, c], out)?;
        self.push("region_pool", Op::RegionPool { x, h, w, k }, t, self.req(x))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(node) into every reachable `requires_grad` node.
    /// `loss` must be scalar. Repeated calls add up until [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        add_into(self.grads[loss.0].get_or_insert_with(|| vec![0.0; 1]), &[1.0], 1.0);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.dispatch_backward(i, &op, &g)?;
            if matches!(op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    /// Add `g ∘ scale` into the gradient buffer of `v` unless `v` is frozen.
    fn acc(&mut self, v: Var, contributions: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        contributions(buf);
    }

    fn dispatch_backward(&mut self, node: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, |buf| add_into(buf, g, 1.0));
                self.acc(b, |buf| add_into(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(a, |buf| add_into(buf, g, 1.0));
                self.acc(b, |buf| add_into(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let bd = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |buf| {
                    for (k, bv) in bd.iter().enumerate() {
                        buf[k] += g[k] * bv;
                    }
                });
                let ad = self.nodes[a.0].value.data().to_vec();
                self.acc(b, |buf| {
                    for (k, av) in ad.iter().enumerate() {
                        buf[k] += g[k] * av;
                    }
                });
            }
            Op::Neg(a) => self.acc(a, |buf| add_into(buf, g, -1.0)),
            Op::Exp(a) => {
                let yd = self.nodes[node].value.data().to_vec();
                self.acc(a, |buf| {
                    for k in 0..yd.len() {
                        buf[k] += g[k] * yd[k];
                    }
                });
            }
            Op::Sqrt(a) => {
                let yd = self.nodes[node].value.data().to_vec();
                self.acc(a, |buf| {
                    for k in 0..yd.len() {
                        buf[k] += g[k] * 0.5 / yd[k];
                    }
                });
            }
            Op::Tanh(a) => {
                let yd = self.nodes[node].value.data().to_vec();
                self.acc(a, |buf| {
                    for k in 0..yd.len() {
                        buf[k] += g[k] * (1.0 - yd[k] * yd[k]);
                    }
                });
            }
            Op::Gelu(a) => {
                let xd = self.nodes[a.0].value.data().to_vec();
                self.acc(a, |buf| {
                    for k in 0..xd.len() {
                        buf[k] += g[k] * gelu_deriv(xd[k]);
                    }
                });
            }
            Op::ScaleConst(a, c) => self.acc(a, |buf| add_into(buf, g, c)),
            Op::AddConst(a) => self.acc(a, |buf| add_into(buf, g, 1.0)),
            Op::MulScalarVar(a, s) => {
                let sv = self.nodes[s.0].value.data()[0];
                self.acc(a, |buf| add_into(buf, g, sv));
                let ad = self.nodes[a.0].value.data();
                let gs: f64 = ad.iter().zip(g).map(|(x, gy)| x * gy).sum();
                self.acc(s, |buf| buf[0] += gs);
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                // dA = g · Bᵀ
                let bd = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            buf[i * k + p] += acc;
                        }
                    }
                });
                // dB = Aᵀ · g
                let ad = self.nodes[a.0].value.data().to_vec();
                self.acc(b, |buf| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ad[i * k + p] * g[i * n + j];
                            }
                            buf[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::MatmulTB(a, b) => {
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[0];
                // y = A·Bᵀ ⇒ dA = g·B, dB = gᵀ·A
                let bd = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[j * k + p];
                            }
                            buf[i * k + p] += acc;
                        }
                    }
                });
                let ad = self.nodes[a.0].value.data().to_vec();
                self.acc(b, |buf| {
                    for j in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += g[i * n + j] * ad[i * k + p];
                            }
                            buf[j * k + p] += acc;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = {
                    let s = self.nodes[node].value.shape();
                    (s[0], s[1])
                };
                self.acc(a, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = lane_dims_of(self.nodes[node].value.shape(), axis);
                let yd = self.nodes[node].value.data().to_vec();
                self.acc(x, |buf| {
                    for_each_lane(outer, len, inner, |base, step| {
                        let mut dot = 0.0;
                        for k in 0..len {
                            dot += g[base + k * step] * yd[base + k * step];
                        }
                        for k in 0..len {
                            let idx = base + k * step;
                            buf[idx] += yd[idx] * (g[idx] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = lane_dims_of(self.nodes[node].value.shape(), axis);
                let yd = self.nodes[node].value.data().to_vec();
                self.acc(x, |buf| {
                    for_each_lane(outer, len, inner, |base, step| {
                        let mut gsum = 0.0;
                        for k in 0..len {
                            gsum += g[base + k * step];
                        }
                        for k in 0..len {
                            let idx = base + k * step;
                            buf[idx] += g[idx] - yd[idx].exp() * gsum;
                        }
                    });
                });
            }
            Op::NormLast { x, eps } => {
                let xd = self.nodes[x.0].value.data().to_vec();
                let yd = self.nodes[node].value.data().to_vec();
                let m = *self.nodes[node].value.shape().last().unwrap();
                self.acc(x, |buf| {
                    let mf = m as f64;
                    for r in 0..xd.len() / m {
                        let row = &xd[r * m..(r + 1) * m];
                        let yrow = &yd[r * m..(r + 1) * m];
                        let grow = &g[r * m..(r + 1) * m];
                        let mean = row.iter().sum::<f64>() / mf;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / mf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.iter().sum::<f64>() / mf;
                        let gydot = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / mf;
                        for j in 0..m {
                            buf[r * m + j] += inv * (grow[j] - gmean - yrow[j] * gydot);
                        }
                    }
                });
            }
            Op::AddRowVec(x, v) => {
                let (n, m) = {
                    let s = self.nodes[node].value.shape();
                    (s[0], s[1])
                };
                self.acc(x, |buf| add_into(buf, g, 1.0));
                self.acc(v, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j] += g[i * m + j];
                        }
                    }
                });
            }
            Op::MulRowVec(x, v) => {
                let (n, m) = {
                    let s = self.nodes[node].value.shape();
                    (s[0], s[1])
                };
                let vd = self.nodes[v.0].value.data().to_vec();
                self.acc(x, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[i * m + j] * vd[j];
                        }
                    }
                });
                let xd = self.nodes[x.0].value.data().to_vec();
                self.acc(v, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j] += g[i * m + j] * xd[i * m + j];
                        }
                    }
                });
            }
            Op::MulColVec(x, s) => {
                let (n, m) = {
                    let sh = self.nodes[node].value.shape();
                    (sh[0], sh[1])
                };
                let sd = self.nodes[s.0].value.data().to_vec();
                self.acc(x, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[i * m + j] * sd[i];
                        }
                    }
                });
                let xd = self.nodes[x.0].value.data().to_vec();
                self.acc(s, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i] += g[i * m + j] * xd[i * m + j];
                        }
                    }
                });
            }
            Op::AddColVec(x, s) => {
                let (n, m) = {
                    let sh = self.nodes[node].value.shape();
                    (sh[0], sh[1])
                };
                self.acc(x, |buf| add_into(buf, g, 1.0));
                self.acc(s, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::DivColVec(x, s) => {
                let (n, m) = {
                    let sh = self.nodes[node].value.shape();
                    (sh[0], sh[1])
                };
                let sd = self.nodes[s.0].value.data().to_vec();
                self.acc(x, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[i * m + j] / sd[i];
                        }
                    }
                });
                let yd = self.nodes[node].value.data().to_vec();
                self.acc(s, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i] -= g[i * m + j] * yd[i * m + j] / sd[i];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.acc(x, |buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                let gv = g[0] / n;
                self.acc(x, |buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            }
            Op::RowSum(x) => {
                let (n, m) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                self.acc(x, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[i * m + j] += g[i];
                        }
                    }
                });
            }
            Op::DiagSum(x) => {
                let n = self.nodes[x.0].value.shape()[0];
                let gv = g[0];
                self.acc(x, |buf| {
                    for i in 0..n {
                        buf[i * n + i] += gv;
                    }
                });
            }
            Op::SliceRows { x, r0 } => {
                let m = self.nodes[x.0].value.shape()[1];
                self.acc(x, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[r0 * m + k] += gv;
                    }
                });
            }
            Op::SliceCols { x, c0, c1 } => {
                let (n, m) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let w = c1 - c0;
                self.acc(x, |buf| {
                    for i in 0..n {
                        for j in 0..w {
                            buf[i * m + c0 + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(ref parts) => {
                let n = self.nodes[node].value.shape()[0];
                let total = self.nodes[node].value.shape()[1];
                let mut base = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    self.acc(p, |buf| {
                        for i in 0..n {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + base + j];
                            }
                        }
                    });
                    base += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut base = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.acc(p, |buf| add_into(buf, &g[base..base + n], 1.0));
                    base += n;
                }
            }
            Op::Reshape(x) => self.acc(x, |buf| add_into(buf, g, 1.0)),
            Op::Conv2d { x, w, b, pad, stride } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (ci, h, iw) = (xs[0], xs[1], xs[2]);
                let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let os = self.nodes[node].value.shape().to_vec();
                let (oh, ow) = (os[1], os[2]);
                let xd = self.nodes[x.0].value.data().to_vec();
                self.acc(w, |buf| {
                    for o in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(o * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= iw as isize {
                                                continue;
                                            }
                                            buf[((o * ci + c) * kh + ky) * kw + kx] +=
                                                gv * xd[(c * h + iy as usize) * iw + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                let wd = self.nodes[w.0].value.data().to_vec();
                self.acc(x, |buf| {
                    for o in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(o * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= iw as isize {
                                                continue;
                                            }
                                            buf[(c * h + iy as usize) * iw + ix as usize] +=
                                                gv * wd[((o * ci + c) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(bv) = b {
                    self.acc(bv, |buf| {
                        for o in 0..co {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    buf[o] += g[(o * oh + oy) * ow + ox];
                                }
                            }
                        }
                    });
                }
            }
            Op::BlurDown { x, taps, k, pad, stride } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let os = self.nodes[node].value.shape().to_vec();
                let (oh, ow) = (os[1], os[2]);
                let xd = self.nodes[x.0].value.data().to_vec();
                self.acc(taps, |buf| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = ((oy * stride + ky) as isize - pad as isize)
                                        .clamp(0, h as isize - 1)
                                        as usize;
                                    for kx in 0..k {
                                        let ix = ((ox * stride + kx) as isize - pad as isize)
                                            .clamp(0, w as isize - 1)
                                            as usize;
                                        buf[ky * k + kx] += gv * xd[(ch * h + iy) * w + ix];
                                    }
                                }
                            }
                        }
                    }
                });
                let td = self.nodes[taps.0].value.data().to_vec();
                self.acc(x, |buf| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = ((oy * stride + ky) as isize - pad as isize)
                                        .clamp(0, h as isize - 1)
                                        as usize;
                                    for kx in 0..k {
                                        let ix = ((ox * stride + kx) as isize - pad as isize)
                                            .clamp(0, w as isize - 1)
                                            as usize;
                                        buf[(ch * h + iy) * w + ix] += gv * td[ky * k + kx];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Resample { x, ref plan } => {
                let c = self.nodes[x.0].value.shape()[0];
                let ipix = plan.in_h * plan.in_w;
                let opix = plan.out_h * plan.out_w;
                self.acc(x, |buf| {
                    for ch in 0..c {
                        for p in 0..opix {
                            let gv = g[ch * opix + p];
                            if gv == 0.0 {
                                continue;
                            }
                            for &(src, wt) in plan.pixel_taps(p) {
                                buf[ch * ipix + src as usize] += gv * wt;
                            }
                        }
                    }
                });
            }
            Op::TapDot { g: gv, h, w, radius } => {
                let d = self.nodes[gv.0].value.shape()[1];
                let n = h * w;
                let taps = (2 * radius + 1) * (2 * radius + 1);
                let gd = self.nodes[gv.0].value.data().to_vec();
                self.acc(gv, |buf| {
                    for p in 0..n {
                        for t in 0..taps {
                            let gy = g[p * taps + t];
                            if gy == 0.0 {
                                continue;
                            }
                            let q = window_neighbor(p, t, h, w, radius);
                            for j in 0..d {
                                buf[p * d + j] += gy * gd[q * d + j];
                                buf[q * d + j] += gy * gd[p * d + j];
                            }
                        }
                    }
                });
            }
            Op::JbuFilter { u, wts, radius } => {
                let us = self.nodes[u.0].value.shape().to_vec();
                let (c, h, w) = (us[0], us[1], us[2]);
                let n = h * w;
                let taps = (2 * radius + 1) * (2 * radius + 1);
                let ud = self.nodes[u.0].value.data().to_vec();
                self.acc(wts, |buf| {
                    for p in 0..n {
                        for t in 0..taps {
                            let q = window_neighbor(p, t, h, w, radius);
                            let mut acc = 0.0;
                            for ch in 0..c {
                                acc += g[ch * n + p] * ud[ch * n + q];
                            }
                            buf[p * taps + t] += acc;
                        }
                    }
                });
                let wd = self.nodes[wts.0].value.data().to_vec();
                self.acc(u, |buf| {
                    for p in 0..n {
                        for t in 0..taps {
                            let wv = wd[p * taps + t];
                            if wv == 0.0 {
                                continue;
                            }
                            let q = window_neighbor(p, t, h, w, radius);
                            for ch in 0..c {
                                buf[ch * n + q] += g[ch * n + p] * wv;
                            }
                        }
                    }
                });
            }
            Op::RegionPool { x, h, w, k } => {
                let c = self.nodes[x.0].value.shape()[1];
                self.acc(x, |buf| {
                    for ri in 0..k {
                        let (y0, y1) = tile_bounds(h, k, ri);
                        for rj in 0..k {
                            let (x0, x1) = tile_bounds(w, k, rj);
                            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                            let o = (ri * k + rj) * c;
                            for y in y0..y1 {
                                for x2 in x0..x1 {
                                    for j in 0..c {
                                        buf[(y * w + x2) * c + j] += g[o + j] * inv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

/// Tile `ri` of `k` over an axis of length `len`; the last tile absorbs the
/// remainder.
pub fn tile_bounds(len: usize, k: usize, ri: usize) -> (usize, usize) {
    let base = len / k;
    let start = ri * base;
    let end = if ri + 1 == k { len } else { start + base };
    (start, end)
}

fn lane_dims_of(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn add_into(buf: &mut [f64], g: &[f64], scale: f64) {
    for (b, gv) in buf.iter_mut().zip(g) {
        *b += gv * scale;
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Smooth GELU (tanh form).
pub fn gelu(x: f64) -> f64 {
    const C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C1: f64 = 0.044715;
    0.5 * x * (1.0 + (C0 * (x + C1 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C0: f64 = 0.797_884_560_802_865_4;
    const C1: f64 = 0.044715;
    let u = C0 * (x + C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, worst};
    use crate::params::{Params, VarMap};
    use crate::rng::Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Check every input's tape gradient against central differences.
    ///
    /// The scalar objective is sum(build_output ⊙ W) for a fixed non-uniform
    /// W, so gradients do not collapse to row/column sums.
    fn fd_op_check<F>(inputs: &[(&str, Tensor)], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &VarMap) -> Result<Var>,
    {
        let mut params = Params::new();
        for (n, t) in inputs {
            params.push(*n, t.clone());
        }
        let run = |p: &Params| -> Result<(Tape, VarMap, Var)> {
            let mut tape = Tape::new();
            let vars = p.leaves(&mut tape, true)?;
            let out = build(&mut tape, &vars)?;
            let n = tape.value(out).numel();
            let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 0.2).collect();
            let shape = tape.value(out).shape().to_vec();
            let wv = tape.constant(Tensor::new(shape, w)?)?;
            let prod = tape.mul(out, wv)?;
            let loss = tape.sum_all(prod)?;
            Ok((tape, vars, loss))
        };
        let (mut tape, vars, loss) = run(&params).unwrap();
        tape.backward(loss).unwrap();
        let analytic = vars.grads(&tape);
        let mut rng = Rng::seed(7);
        let reports = gradcheck::check_params(
            &params,
            &analytic,
            |p| {
                let (tape, _, loss) = run(p)?;
                tape.value(loss).item()
            },
            1e-5,
            0,
            &mut rng,
        )
        .unwrap();
        let w = worst(&reports);
        assert!(w < tol, "max rel err {w:.3e} over {reports:?}");
    }

    fn rng_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        rng.gauss(shape, 0.8)
    }

    // ── matmul spec examples ─────────────────────────────────────────

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let b = tape.constant(t2(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let y = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0]])).unwrap();
        let b = tape.constant(t2(&[&[3.0], &[4.0]])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dim_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn matmul_grad_matches_frozen_value() {
        // d sum(A·B) / dA for A=[[1,1]], B=[[2],[5]] is [[2, 5]]; the value
        // below was confirmed by central differences with h = 1e-6.
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 1.0]]), true).unwrap();
        let b = tape.constant(t2(&[&[2.0], &[5.0]])).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(a).unwrap();
        assert_eq!(g.data(), &[2.0, 5.0]);

        let mut params = Params::new();
        params.push("a", t2(&[&[1.0, 1.0]]));
        let f = |p: &Params| {
            let mut tape = Tape::new();
            let a = tape.leaf(p.get("a").unwrap().clone(), true)?;
            let b = tape.constant(t2(&[&[2.0], &[5.0]]))?;
            let y = tape.matmul(a, b)?;
            let s = tape.sum_all(y)?;
            tape.value(s).item()
        };
        for (i, expect) in [2.0, 5.0].iter().enumerate() {
            let fd = gradcheck::central_diff(&params, "a", i, 1e-6, &f).unwrap();
            assert!((fd - expect).abs() < 1e-6);
        }
    }

    // ── softmax spec examples ────────────────────────────────────────

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        for c in [-3.0, 0.0, 250.0] {
            let x = tape.constant(Tensor::full(&[3], c)).unwrap();
            let y = tape.softmax(x, 0).unwrap();
            for &v in tape.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_up_to_magnitude_1e3() {
        let mut rng = Rng::seed(3);
        let mut tape = Tape::new();
        for _ in 0..20 {
            let x = tape.constant(rng.gauss(&[4, 6], 1e3)).unwrap();
            let y = tape.softmax(x, 1).unwrap();
            for i in 0..4 {
                let s: f64 = tape.value(y).row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.softmax(x, 2), Err(Error::Dim(_))));
        let empty = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
        assert!(matches!(tape.softmax(empty, 1), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_grad_matches_fd_on_random_length_5() {
        let mut rng = Rng::seed(11);
        fd_op_check(
            &[("x", rng_tensor(&mut rng, &[5]))],
            |tape, v| tape.softmax(v.var("x"), 0),
            1e-6,
        );
    }

    // ── layer_norm spec examples ─────────────────────────────────────

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3], 1.0)).unwrap();
        let gain = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
        let bias = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_keeps_already_normalized_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[&[-1.0, 1.0]])).unwrap();
        let gain = tape.constant(Tensor::full(&[2], 1.0)).unwrap();
        let bias = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        // identical up to the ε in the variance
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_rejects_empty_last_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
        assert!(matches!(tape.norm_last(x, 1e-5), Err(Error::Dim(_))));
    }

    #[test]
    fn layer_norm_grad_matches_fd_on_2x4() {
        let mut rng = Rng::seed(13);
        fd_op_check(
            &[
                ("x", rng_tensor(&mut rng, &[2, 4])),
                ("g", rng_tensor(&mut rng, &[4])),
                ("b", rng_tensor(&mut rng, &[4])),
            ],
            |tape, v| tape.layer_norm(v.var("x"), v.var("g"), v.var("b")),
            1e-5,
        );
    }

    // ── conv2d spec examples ─────────────────────────────────────────

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut rng = Rng::seed(17);
        let mut tape = Tape::new();
        let x = tape.constant(rng.gauss(&[1, 3, 4], 1.0)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let y = tape.conv2d(x, w, None, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_box_kernel_on_constant_image() {
        let mut tape = Tape::new();
        let c = 2.5;
        let x = tape.constant(Tensor::full(&[1, 5, 5], c)).unwrap();
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, w, None, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 3]);
        for &v in tape.value(y).data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_kernel_larger_than_input_is_dim_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
        let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert!(matches!(tape.conv2d(x, w, None, 0), Err(Error::Dim(_))));
    }

    #[test]
    fn conv2d_weight_grad_matches_fd() {
        let mut rng = Rng::seed(19);
        fd_op_check(
            &[
                ("x", rng_tensor(&mut rng, &[1, 4, 4])),
                ("w", rng_tensor(&mut rng, &[1, 1, 2, 2])),
            ],
            |tape, v| tape.conv2d(v.var("x"), v.var("w"), None, 0),
            1e-5,
        );
    }

    #[test]
    fn conv2d_strided_padded_with_bias_matches_fd() {
        let mut rng = Rng::seed(23);
        fd_op_check(
            &[
                ("x", rng_tensor(&mut rng, &[2, 6, 6])),
                ("w", rng_tensor(&mut rng, &[3, 2, 3, 3])),
                ("b", rng_tensor(&mut rng, &[3])),
            ],
            |tape, v| tape.conv2d_strided(v.var("x"), v.var("w"), Some(v.var("b")), 1, 2),
            1e-5,
        );
    }

    // ── backward spec examples ───────────────────────────────────────

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let c = tape.constant(Tensor::scalar(4.0)).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_or_zeros(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap(), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 12.0]);
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 6.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = Rng::seed(29);
            let mut tape = Tape::new();
            let x = tape.leaf(rng.gauss(&[3, 4], 1.0), true).unwrap();
            let w = tape.leaf(rng.gauss(&[4, 2], 1.0), true).unwrap();
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax(y, 1).unwrap();
            let g = tape.gelu(s).unwrap();
            let loss = tape.mean_all(g).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.grad(x).unwrap().data().to_vec(),
                tape.grad(w).unwrap().data().to_vec(),
            )
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1], vec![1e4]).unwrap()).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn frozen_leaves_get_no_grad_buffer() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), false).unwrap();
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    // ── finite-difference sweep over the remaining ops ───────────────

    #[test]
    fn fd_sweep_elementwise() {
        let mut rng = Rng::seed(31);
        let a = rng_tensor(&mut rng, &[3, 4]);
        let b = rng_tensor(&mut rng, &[3, 4]);
        fd_op_check(&[("a", a.clone()), ("b", b.clone())], |t, v| t.add(v.var("a"), v.var("b")), 1e-6);
        fd_op_check(&[("a", a.clone()), ("b", b.clone())], |t, v| t.sub(v.var("a"), v.var("b")), 1e-6);
        fd_op_check(&[("a", a.clone()), ("b", b.clone())], |t, v| t.mul(v.var("a"), v.var("b")), 1e-6);
        fd_op_check(&[("a", a.clone())], |t, v| t.neg(v.var("a")), 1e-6);
        fd_op_check(&[("a", a.clone())], |t, v| t.exp(v.var("a")), 1e-6);
        fd_op_check(&[("a", a.map(|x| x.abs() + 0.5))], |t, v| t.sqrt(v.var("a")), 1e-6);
        fd_op_check(&[("a", a.clone())], |t, v| t.tanh(v.var("a")), 1e-6);
        fd_op_check(&[("a", a.clone())], |t, v| t.gelu(v.var("a")), 1e-6);
        fd_op_check(&[("a", a.clone())], |t, v| t.scale(v.var("a"), -1.7), 1e-6);
        fd_op_check(&[("a", a.clone())], |t, v| t.add_const(v.var("a"), 0.9), 1e-6);
        fd_op_check(
            &[("a", a), ("s", Tensor::scalar(0.6))],
            |t, v| t.mul_scalar_var(v.var("a"), v.var("s")),
            1e-6,
        );
    }

    #[test]
    fn fd_sweep_linalg_and_lanes() {
        let mut rng = Rng::seed(37);
        let a = rng_tensor(&mut rng, &[3, 4]);
        let b = rng_tensor(&mut rng, &[4, 2]);
        let c = rng_tensor(&mut rng, &[5, 4]);
        fd_op_check(&[("a", a.clone()), ("b", b)], |t, v| t.matmul(v.var("a"), v.var("b")), 1e-5);
        fd_op_check(&[("a", a.clone()), ("c", c)], |t, v| t.matmul_tb(v.var("a"), v.var("c")), 1e-5);
        fd_op_check(&[("a", a.clone())], |t, v| t.transpose(v.var("a")), 1e-6);
        fd_op_check(&[("a", a.clone())], |t, v| t.softmax(v.var("a"), 0), 1e-5);
        fd_op_check(&[("a", a.clone())], |t, v| t.log_softmax(v.var("a"), 1), 1e-5);
        fd_op_check(&[("a", a.clone())], |t, v| t.norm_last(v.var("a"), 1e-5), 1e-5);
        fd_op_check(&[("a", a)], |t, v| t.log_softmax(v.var("a"), 0), 1e-5);
    }

    #[test]
    fn fd_sweep_broadcast_and_reductions() {
        let mut rng = Rng::seed(41);
        let x = rng_tensor(&mut rng, &[3, 4]);
        let rv = rng_tensor(&mut rng, &[4]);
        let cv = rng_tensor(&mut rng, &[3]).map(|v| v + 2.5); // keep divisors away from 0
        let sq = rng_tensor(&mut rng, &[4, 4]);
        fd_op_check(&[("x", x.clone()), ("v", rv.clone())], |t, v| t.add_row_vec(v.var("x"), v.var("v")), 1e-6);
        fd_op_check(&[("x", x.clone()), ("v", rv)], |t, v| t.mul_row_vec(v.var("x"), v.var("v")), 1e-6);
        fd_op_check(&[("x", x.clone()), ("s", cv.clone())], |t, v| t.mul_col_vec(v.var("x"), v.var("s")), 1e-6);
        fd_op_check(&[("x", x.clone()), ("s", cv.clone())], |t, v| t.add_col_vec(v.var("x"), v.var("s")), 1e-6);
        fd_op_check(&[("x", x.clone()), ("s", cv)], |t, v| t.div_col_vec(v.var("x"), v.var("s")), 1e-5);
        fd_op_check(&[("x", x.clone())], |t, v| t.sum_all(v.var("x")), 1e-6);
        fd_op_check(&[("x", x.clone())], |t, v| t.mean_all(v.var("x")), 1e-6);
        fd_op_check(&[("x", x.clone())], |t, v| t.row_sum(v.var("x")), 1e-6);
        fd_op_check(&[("x", sq)], |t, v| t.diag_sum(v.var("x")), 1e-6);
        fd_op_check(&[("x", x.clone())], |t, v| t.slice_rows(v.var("x"), 1, 3), 1e-6);
        fd_op_check(&[("x", x.clone())], |t, v| t.slice_cols(v.var("x"), 1, 3), 1e-6);
        fd_op_check(&[("x", x.clone()), ("y", rng_tensor(&mut rng, &[3, 2]))], |t, v| {
            t.concat_cols(&[v.var("x"), v.var("y")])
        }, 1e-6);
        fd_op_check(&[("x", x.clone()), ("y", rng_tensor(&mut rng, &[2, 4]))], |t, v| {
            t.concat_rows(&[v.var("x"), v.var("y")])
        }, 1e-6);
        fd_op_check(&[("x", x)], |t, v| t.reshape(v.var("x"), &[4, 3]), 1e-6);
    }

    #[test]
    fn fd_sweep_image_kernels() {
        let mut rng = Rng::seed(43);
        let feats = rng_tensor(&mut rng, &[2, 4, 4]);
        let taps = rng_tensor(&mut rng, &[25]).map(|v| v.abs() + 0.1);
        fd_op_check(
            &[("x", rng_tensor(&mut rng, &[2, 6, 6])), ("taps", taps)],
            |t, v| t.blur_down(v.var("x"), v.var("taps"), 5, 2, 2),
            1e-5,
        );
        let plan = plan_bilinear(4, 4, 8, 8);
        fd_op_check(&[("x", feats.clone())], |t, v| t.resample(v.var("x"), &plan), 1e-5);

        let g = rng_tensor(&mut rng, &[12, 3]); // 3x4 grid of 3-dim features
        fd_op_check(&[("g", g)], |t, v| t.tap_dot(v.var("g"), 3, 4, 1), 1e-5);

        let wts = rng_tensor(&mut rng, &[16, 9]);
        fd_op_check(
            &[("u", feats), ("w", wts)],
            |t, v| t.jbu_filter(v.var("u"), v.var("w"), 1),
            1e-5,
        );

        let tokens = rng_tensor(&mut rng, &[20, 3]); // 4x5 grid
        fd_op_check(&[("x", tokens)], |t, v| t.region_pool(v.var("x"), 4, 5, 2), 1e-6);
    }

    #[test]
    fn resample_plan_identity_and_constant_preservation() {
        let mut rng = Rng::seed(47);
        let x = rng_tensor(&mut rng, &[2, 5, 5]);
        let id = plan_bilinear(5, 5, 5, 5);
        let y = id.apply(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Tensor::full(&[1, 3, 3], 0.7);
        let up = plan_bilinear(3, 3, 12, 12).apply(&c).unwrap();
        for &v in up.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn region_pool_tiles_absorb_remainders() {
        assert_eq!(tile_bounds(14, 7, 0), (0, 2));
        assert_eq!(tile_bounds(14, 7, 6), (12, 14));
        assert_eq!(tile_bounds(15, 7, 6), (12, 15));
        assert_eq!(tile_bounds(10, 7, 6), (6, 10));
    }
}
