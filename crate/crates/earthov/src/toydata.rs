//! Seeded synthetic corpora for the desk-scale workflows: optical
//! stripe/blob rasters, paired optical/radar images with speckle and
//! misregistration, and the planted token field used to demonstrate the
//! global-bias subtraction.

use crate::params::Params;
use crate::raster::Raster;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Smooth synthetic aerial-style image: sinusoidal stripes between two
/// colors plus a few soft blobs.
pub fn toy_optical(rng: &mut Rng, side: usize) -> Raster {
    let palette: Vec<[f64; 3]> = (0..3)
        .map(|_| [
            40.0 + 180.0 * rng.f64(),
            40.0 + 180.0 * rng.f64(),
            40.0 + 180.0 * rng.f64(),
        ])
        .collect();
    let dir = (rng.f64() * 2.0 - 1.0, 1.0);
    let period = 18.0 + 26.0 * rng.f64();
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            (
                rng.f64() * side as f64,
                rng.f64() * side as f64,
                side as f64 * (0.18 + 0.22 * rng.f64()),
                palette[2],
            )
        })
        .collect();
    let mut data = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let phase = (dir.0 * x as f64 + dir.1 * y as f64) / period;
            let t = 0.5 * (1.0 + (phase * std::f64::consts::TAU).sin());
            let mut px = [
                palette[0][0] * (1.0 - t) + palette[1][0] * t,
                palette[0][1] * (1.0 - t) + palette[1][1] * t,
                palette[0][2] * (1.0 - t) + palette[1][2] * t,
            ];
            for &(cx, cy, r, col) in &blobs {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let w = 0.65 * (-d2 / (2.0 * r * r)).exp();
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + col[c] * w;
                }
            }
            for c in 0..3 {
                data[(y * side + x) * 3 + c] = px[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Raster::new(side, side, 3, data).expect("constructed consistently")
}

/// Radar-like counterpart: channel-collapsed optical with multiplicative
/// speckle and a small random translation (imperfect co-registration).
pub fn toy_sar_from_optical(rng: &mut Rng, optical: &Raster) -> Raster {
    let (w, h) = (optical.width, optical.height);
    let dy = rng.below(5) as isize - 2;
    let dx = rng.below(5) as isize - 2;
    let mut data = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
            let luma = 0.299 * optical.get(sx, sy, 0) as f64
                + 0.587 * optical.get(sx, sy, 1) as f64
                + 0.114 * optical.get(sx, sy, 2) as f64;
            let speckle = 1.0 + 0.3 * rng.normal();
            data[y * w + x] = (luma * speckle.max(0.0)).round().clamp(0.0, 255.0) as u8;
        }
    }
    Raster::new(w, h, 1, data).expect("constructed consistently")
}

/// A paired optical/radar corpus of `n` images.
pub fn toy_pairs(rng: &mut Rng, n: usize, side: usize) -> Vec<(Raster, Raster)> {
    (0..n)
        .map(|i| {
            let mut sub = rng.fork(i as u64);
            let opt = toy_optical(&mut sub, side);
            let sar = toy_sar_from_optical(&mut sub, &opt);
            (opt, sar)
        })
        .collect()
}

/// Token field with an injected global component.
///
/// Ground truth splits the grid into a left half (class 0) and a right half
/// (class 1). Each patch token is `a·e_class + beta·g + noise` where `g` is
/// the [CLS] direction and also equals class 0's embedding: the global theme
/// drowns out the weaker local signal (a < beta), so raw cosine
/// classification labels everything class 0. Subtracting λ·CLS with
/// beta − λ < a makes the local signal win again.
pub struct PlantedBiasSet {
    /// [(h·w + 1), c]; row 0 is the [CLS] token.
    pub tokens: Tensor,
    /// h×w ground-truth mask, classes {0, 1}.
    pub gt: Raster,
    /// `display = synonym` lines for the two classes.
    pub vocab_text: String,
    /// Unit-norm embeddings keyed by synonym string.
    pub vocab_emb: Params,
    pub h: usize,
    pub w: usize,
}

pub fn planted_bias_set(rng: &mut Rng, h: usize, w: usize, c: usize, beta: f64) -> PlantedBiasSet {
    assert!(c >= 2 && w >= 2);
    let e0 = unit(rng.gauss(&[c], 1.0));
    let e1 = {
        // orthonormalize against e0
        let raw = rng.gauss(&[c], 1.0);
        let proj: f64 = raw.data().iter().zip(e0.data()).map(|(a, b)| a * b).sum();
        let adj: Vec<f64> = raw
            .data()
            .iter()
            .zip(e0.data())
            .map(|(a, b)| a - proj * b)
            .collect();
        unit(Tensor::new(vec![c], adj).unwrap())
    };
    let local_strength = 0.35;
    let noise = 0.03;

    let mut tokens = Vec::with_capacity((h * w + 1) * c);
    tokens.extend_from_slice(e0.data()); // CLS = the global direction
    let mut gt = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let class = usize::from(x >= w / 2);
            gt[y * w + x] = class as u8;
            let e = if class == 0 { &e0 } else { &e1 };
            for j in 0..c {
                tokens.push(
                    local_strength * e.data()[j] + beta * e0.data()[j] + noise * rng.normal(),
                );
            }
        }
    }
    let mut vocab_emb = Params::new();
    vocab_emb.push("field", e0);
    vocab_emb.push("water", e1);
    PlantedBiasSet {
        tokens: Tensor::new(vec![h * w + 1, c], tokens).unwrap(),
        gt: Raster::new(w, h, 1, gt).unwrap(),
        vocab_text: "field = field\nwater = water\n".to_string(),
        vocab_emb,
        h,
        w,
    }
}

fn unit(t: Tensor) -> Tensor {
    let n = crate::tensor::l2_norm(t.data());
    t.map(|v| v / n)
}
