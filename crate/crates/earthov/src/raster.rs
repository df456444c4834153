//! 8-bit rasters and the resize used before inference.

use crate::error::{Error, Result};
use crate::tape::plan_bilinear;
use crate::tensor::Tensor;

/// Dense 8-bit image, row-major, 1 (gray) or 3 (RGB) channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Dim(format!("rasters have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dim(format!(
                "{width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Raster { width, height, channels, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Planar float tensor normalized to [-1, 1]; gray rasters are
    /// replicated to three channels so every consumer sees [3, H, W].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = if self.channels == 3 { self.get(x, y, c) } else { self.get(x, y, 0) };
                    out[(c * h + y) * w + x] = v as f64 / 127.5 - 1.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], out).expect("sizes agree")
    }

    /// Quantize a [-1, 1] planar tensor back to an 8-bit raster.
    pub fn from_tensor(t: &Tensor) -> Result<Raster> {
        let s = t.shape();
        if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
            return Err(Error::Dim(format!("expected [1|3, H, W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0u8; w * h * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = ((t.at3(ch, y, x) + 1.0) * 127.5).round().clamp(0.0, 255.0);
                    data[(y * w + x) * c + ch] = v as u8;
                }
            }
        }
        Raster::new(w, h, c, data)
    }
}

/// Bilinear resize so that max(width, height) == `target`, aspect preserved
/// with rounding. Images already at the target long side pass through
/// untouched.
pub fn resize_long_side(img: &Raster, target: usize) -> Result<Raster> {
    if target == 0 {
        return Err(Error::Contract("resize target must be positive".into()));
    }
    let long = img.width.max(img.height);
    if long == target {
        return Ok(img.clone());
    }
    let scale = target as f64 / long as f64;
    let ow = ((img.width as f64 * scale).round() as usize).max(1);
    let oh = ((img.height as f64 * scale).round() as usize).max(1);
    resize_bilinear(img, ow, oh)
}

pub fn resize_bilinear(img: &Raster, ow: usize, oh: usize) -> Result<Raster> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut planar = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                planar[(ch * h + y) * w + x] = img.get(x, y, ch) as f64;
            }
        }
    }
    let t = Tensor::new(vec![c, h, w], planar)?;
    let resized = plan_bilinear(h, w, oh, ow).apply(&t)?;
    let mut data = vec![0u8; ow * oh * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                data[(y * ow + x) * c + ch] = resized.at3(ch, y, x).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Raster::new(ow, oh, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_halving_and_identity() {
        let img = Raster::new(896, 448, 3, vec![77; 896 * 448 * 3]).unwrap();
        let out = resize_long_side(&img, 448).unwrap();
        assert_eq!((out.width, out.height), (448, 224));
        // constant image stays constant under bilinear resize
        assert!(out.data().iter().all(|&v| v == 77));

        let small = Raster::new(448, 300, 1, vec![5; 448 * 300]).unwrap();
        let same = resize_long_side(&small, 448).unwrap();
        assert_eq!((same.width, same.height), (448, 300));
        assert_eq!(same, small);
    }

    #[test]
    fn tensor_round_trip_and_gray_replication() {
        let img = Raster::new(2, 1, 3, vec![0, 128, 255, 10, 20, 30]).unwrap();
        let t = img.to_tensor();
        assert!((t.at3(0, 0, 0) + 1.0).abs() < 1e-12);
        assert!((t.at3(2, 0, 0) - 1.0).abs() < 1e-12);
        let back = Raster::from_tensor(&t).unwrap();
        assert_eq!(back, img);

        let gray = Raster::new(1, 1, 1, vec![200]).unwrap();
        let gt = gray.to_tensor();
        assert_eq!(gt.shape(), &[3, 1, 1]);
        assert_eq!(gt.at3(0, 0, 0), gt.at3(2, 0, 0));
    }
}
