//! Segmentation masks, confusion matrices, and IoU metrics.

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Mask pixels carrying this value are skipped during evaluation.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dim(format!(
                "{width}x{height} mask needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(SegmentationMask { width, height, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn to_raster(&self) -> Raster {
        Raster::new(self.width, self.height, 1, self.data.clone()).expect("consistent")
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels != 1 {
            return Err(Error::Dim("masks are single-channel".into()));
        }
        SegmentationMask::new(r.width, r.height, r.data().to_vec())
    }
}

/// Class-by-class pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix { n, counts: vec![0; n * n] }
    }

    pub fn classes(&self) -> usize {
        self.n
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::Dim("merging confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// From explicit counts, row-major.
    pub fn from_counts(n: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(Error::Dim(format!("need {}x{n} counts", n)));
        }
        Ok(ConfusionMatrix { n, counts })
    }
}

/// Tally predictions against ground truth; `gt == ignore_index` pixels are
/// skipped entirely.
pub fn confusion(
    pred: &SegmentationMask,
    gt: &SegmentationMask,
    n: usize,
    ignore_index: u8,
) -> Result<ConfusionMatrix> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Input(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut cm = ConfusionMatrix::new(n);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == ignore_index {
            continue;
        }
        if (g as usize) >= n || (p as usize) >= n {
            return Err(Error::Input(format!(
                "class index out of range: gt {g}, pred {p}, n {n}"
            )));
        }
        cm.counts[g as usize * n + p as usize] += 1;
    }
    Ok(cm)
}

/// Per-class IoU (None where the class never occurs in either masks) and
/// their mean over the defined classes.
pub fn miou(cm: &ConfusionMatrix) -> (f64, Vec<Option<f64>>) {
    let n = cm.n;
    let mut per_class = Vec::with_capacity(n);
    let (mut sum, mut defined) = (0.0, 0usize);
    for c in 0..n {
        let diag = cm.count(c, c);
        let row: u64 = (0..n).map(|j| cm.count(c, j)).sum();
        let col: u64 = (0..n).map(|i| cm.count(i, c)).sum();
        let denom = row + col - diag;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = diag as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            defined += 1;
        }
    }
    let mean = if defined == 0 { 0.0 } else { sum / defined as f64 };
    (mean, per_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, data: &[u8]) -> SegmentationMask {
        SegmentationMask::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal_with_miou_one() {
        let gt = mask(2, 2, &[0, 1, 2, 1]);
        let cm = confusion(&gt, &gt, 3, IGNORE_INDEX).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.count(g, p) > 0, g == p && g != 2 || (g == 2 && p == 2));
            }
        }
        let (m, per) = miou(&cm);
        assert_eq!(m, 1.0);
        assert_eq!(per, vec![Some(1.0); 3]);
    }

    #[test]
    fn counts_land_in_gt_rows() {
        let pred = mask(2, 1, &[0, 1]);
        let gt = mask(2, 1, &[0, 0]);
        let cm = confusion(&pred, &gt, 2, IGNORE_INDEX).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 0);
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn ignored_pixels_vanish() {
        let pred = mask(2, 1, &[0, 1]);
        let gt = mask(2, 1, &[IGNORE_INDEX, IGNORE_INDEX]);
        let cm = confusion(&pred, &gt, 2, IGNORE_INDEX).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn size_mismatch_is_input_error() {
        let a = mask(2, 1, &[0, 0]);
        let b = mask(1, 2, &[0, 0]);
        assert!(matches!(confusion(&a, &b, 1, IGNORE_INDEX), Err(Error::Input(_))));
    }

    #[test]
    fn hand_evaluated_two_class_case() {
        // counts [[2,1],[1,2]]: IoU_c = 2 / (3 + 3 - 2) = 0.5 for both
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        let (m, per) = miou(&cm);
        assert_eq!(per, vec![Some(0.5), Some(0.5)]);
        assert_eq!(m, 0.5);
        // foreground IoU of a two-class problem is entry 1
        assert_eq!(per[1], Some(0.5));
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let (m, per) = miou(&cm);
        assert_eq!(per, vec![Some(1.0), None, None]);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn miou_is_permutation_equivariant() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 2, 7, 1, 0, 3, 4]).unwrap();
        let (m, per) = miou(&cm);
        // relabel classes by the cycle 0->1->2->0
        let perm = [1usize, 2, 0];
        let mut counts = vec![0u64; 9];
        for g in 0..3 {
            for p in 0..3 {
                counts[perm[g] * 3 + perm[p]] = cm.count(g, p);
            }
        }
        let cm2 = ConfusionMatrix::from_counts(3, counts).unwrap();
        let (m2, per2) = miou(&cm2);
        assert_eq!(m, m2);
        for c in 0..3 {
            assert_eq!(per[c], per2[perm[c]]);
        }
    }
}
