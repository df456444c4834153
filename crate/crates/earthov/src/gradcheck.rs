//! Central finite-difference verification of tape gradients.
//!
//! The checker only ever evaluates the forward closure, so it is independent
//! of the backward pass it validates. Large tensors are checked on a seeded
//! sample of entries; small ones exhaustively.

use crate::error::Result;
use crate::params::Params;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Relative error, guarded against vanishing denominators.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

/// Compare `analytic` gradients against central differences of `f`.
///
/// `sample_cap` bounds how many entries of each tensor are perturbed (0 means
/// all); sampled indices are drawn from `rng` so every run of a seeded suite
/// checks the same coordinates.
pub fn check_params<F>(
    params: &Params,
    analytic: &[(String, Tensor)],
    f: F,
    h: f64,
    sample_cap: usize,
    rng: &mut Rng,
) -> Result<Vec<GradReport>>
where
    F: Fn(&Params) -> Result<f64>,
{
    let mut reports = Vec::new();
    for (name, grad) in analytic {
        let tensor = params.require(name)?;
        let n = tensor.numel();
        let indices: Vec<usize> = if sample_cap == 0 || n <= sample_cap {
            (0..n).collect()
        } else {
            let mut picked = Vec::with_capacity(sample_cap);
            while picked.len() < sample_cap {
                let i = rng.below(n);
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            picked
        };
        let mut max_rel: f64 = 0.0;
        for &i in &indices {
            let fd = central_diff(params, name, i, h, &f)?;
            max_rel = max_rel.max(rel_err(grad.data()[i], fd));
        }
        reports.push(GradReport {
            name: name.clone(),
            checked: indices.len(),
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}

/// d f / d params[name][index] by central differences.
pub fn central_diff<F>(params: &Params, name: &str, index: usize, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&Params) -> Result<f64>,
{
    let plus = f(&perturbed(params, name, index, h))?;
    let minus = f(&perturbed(params, name, index, -h))?;
    Ok((plus - minus) / (2.0 * h))
}

fn perturbed(params: &Params, name: &str, index: usize, delta: f64) -> Params {
    let mut out = params.clone();
    let t = params.get(name).expect("known name");
    let mut data = t.data().to_vec();
    data[index] += delta;
    out.set(name, Tensor::new(t.shape().to_vec(), data).unwrap());
    out
}

pub fn worst(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}
