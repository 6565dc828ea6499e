//! Core volumetric data types: multimodal intensity volumes, integer label
//! masks, one-hot encodings, and the clinical evaluation regions composed
//! from labels.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// Labels used by the generator and the region composition.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NONENHANCING: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 3;

/// An M-channel 3D scalar field with shape `(M, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalVolume {
    data: Array4<f64>,
}

impl MultimodalVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (m, d, h, w) = data.dim();
        if m < 1 || d < 1 || h < 1 || w < 1 {
            return Err(Error::ShapeMismatch {
                context: "MultimodalVolume".into(),
                expected: "all dims >= 1".into(),
                actual: format!("({m}, {d}, {h}, {w})"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "MultimodalVolume".into(),
            });
        }
        Ok(Self { data })
    }

    pub fn modalities(&self) -> usize {
        self.data.dim().0
    }

    /// Spatial dims `(D, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, d, h, w) = self.data.dim();
        (d, h, w)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }
}

/// Integer per-voxel labels with shape `(D, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    labels: Array3<u8>,
}

impl LabelMask {
    pub fn new(labels: Array3<u8>) -> Self {
        Self { labels }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of voxels carrying the given label.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&v| v == label).count()
    }

    pub fn num_foreground(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }
}

/// Binary per-class indicator tensor with shape `(P_c, D, H, W)`.
///
/// Channel 0 is the background indicator; exactly one channel is 1 at every
/// voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask {
    data: Array4<f64>,
}

impl OneHotMask {
    /// Validates that `data` is a proper one-hot encoding.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (c, d, h, w) = data.dim();
        if c < 1 {
            return Err(Error::ShapeMismatch {
                context: "OneHotMask".into(),
                expected: ">= 1 channel".into(),
                actual: format!("{c}"),
            });
        }
        for (idx, _) in (0..d * h * w).enumerate() {
            let (z, rest) = (idx / (h * w), idx % (h * w));
            let (y, x) = (rest / w, rest % w);
            let mut ones = 0usize;
            for ch in 0..c {
                let v = data[[ch, z, y, x]];
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::NotOneHot { index: idx });
                }
            }
            if ones != 1 {
                return Err(Error::NotOneHot { index: idx });
            }
        }
        Ok(Self { data })
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, d, h, w) = self.data.dim();
        (d, h, w)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    /// Recovers the label mask by per-voxel argmax over channels.
    pub fn argmax(&self) -> LabelMask {
        let (c, d, h, w) = self.data.dim();
        let mut labels = Array3::zeros((d, h, w));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut best = 0usize;
                    let mut best_v = self.data[[0, z, y, x]];
                    for ch in 1..c {
                        let v = self.data[[ch, z, y, x]];
                        if v > best_v {
                            best_v = v;
                            best = ch;
                        }
                    }
                    labels[[z, y, x]] = best as u8;
                }
            }
        }
        LabelMask::new(labels)
    }
}

/// The three nested evaluation regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    /// Enhancing tumor: label 3.
    pub et: Array3<bool>,
    /// Tumor core: labels 1 and 3.
    pub tc: Array3<bool>,
    /// Whole tumor: labels 1, 2 and 3.
    pub wt: Array3<bool>,
}

impl RegionMasks {
    /// Voxelwise nesting et ⊆ tc ⊆ wt.
    pub fn is_nested(&self) -> bool {
        self.et
            .iter()
            .zip(self.tc.iter())
            .zip(self.wt.iter())
            .all(|((&e, &t), &w)| (!e || t) && (!t || w))
    }
}

/// Expands an integer label mask into its per-class indicator channels.
pub fn one_hot(mask: &LabelMask, num_classes: usize) -> Result<OneHotMask> {
    if num_classes == 0 {
        return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
    }
    let (d, h, w) = mask.dims();
    let mut data = Array4::zeros((num_classes, d, h, w));
    for ((z, y, x), &label) in mask.labels().indexed_iter() {
        if (label as usize) >= num_classes {
            return Err(Error::LabelOutOfRange {
                value: label,
                num_classes,
            });
        }
        data[[label as usize, z, y, x]] = 1.0;
    }
    Ok(OneHotMask { data })
}

/// Composes the ET/TC/WT evaluation regions from a 4-label mask.
pub fn compose_regions(mask: &LabelMask) -> Result<RegionMasks> {
    if let Some(&bad) = mask.labels().iter().find(|&&v| v > 3) {
        return Err(Error::LabelOutOfRange {
            value: bad,
            num_classes: 4,
        });
    }
    let et = mask.labels().mapv(|v| v == LABEL_ENHANCING);
    let tc = mask
        .labels()
        .mapv(|v| v == LABEL_NONENHANCING || v == LABEL_ENHANCING);
    let wt = mask.labels().mapv(|v| v != LABEL_BACKGROUND);
    Ok(RegionMasks { et, tc, wt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_covers_each_label_once() {
        // 2x2x1 mask with labels 0..=3
        let labels = arr3(&[[[0u8], [1]], [[2], [3]]]);
        let mask = LabelMask::new(labels);
        let oh = one_hot(&mask, 4).unwrap();
        assert_eq!(oh.data().dim(), (4, 2, 2, 1));
        for c in 0..4 {
            let ones: f64 = oh.data().index_axis(ndarray::Axis(0), c).sum();
            assert_eq!(ones, 1.0);
        }
    }

    #[test]
    fn one_hot_background_only() {
        let mask = LabelMask::new(Array3::zeros((2, 3, 4)));
        let oh = one_hot(&mask, 2).unwrap();
        assert_eq!(oh.data().index_axis(ndarray::Axis(0), 0).sum(), 24.0);
        assert_eq!(oh.data().index_axis(ndarray::Axis(0), 1).sum(), 0.0);
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        let mut labels = Array3::zeros((2, 2, 1));
        labels[[1, 1, 0]] = 4u8;
        let err = one_hot(&LabelMask::new(labels), 4).unwrap_err();
        match err {
            Error::LabelOutOfRange { value, num_classes } => {
                assert_eq!(value, 4);
                assert_eq!(num_classes, 4);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn one_hot_argmax_roundtrip_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let d = rng.random_range(1..5);
            let h = rng.random_range(1..6);
            let w = rng.random_range(1..6);
            let pc = rng.random_range(2..6);
            let labels =
                Array3::from_shape_fn((d, h, w), |_| rng.random_range(0..pc as u32) as u8);
            let mask = LabelMask::new(labels);
            let oh = one_hot(&mask, pc).unwrap();
            assert_eq!(oh.argmax(), mask);
        }
    }

    #[test]
    fn regions_count_one_voxel_each() {
        let mut labels = Array3::zeros((1, 3, 1));
        labels[[0, 0, 0]] = 1;
        labels[[0, 1, 0]] = 2;
        labels[[0, 2, 0]] = 3;
        let r = compose_regions(&LabelMask::new(labels)).unwrap();
        assert_eq!(r.et.iter().filter(|&&v| v).count(), 1);
        assert_eq!(r.tc.iter().filter(|&&v| v).count(), 2);
        assert_eq!(r.wt.iter().filter(|&&v| v).count(), 3);
        assert!(r.is_nested());
    }

    #[test]
    fn regions_all_background_are_empty() {
        let r = compose_regions(&LabelMask::new(Array3::zeros((2, 2, 2)))).unwrap();
        assert_eq!(r.et.iter().filter(|&&v| v).count(), 0);
        assert_eq!(r.tc.iter().filter(|&&v| v).count(), 0);
        assert_eq!(r.wt.iter().filter(|&&v| v).count(), 0);
    }

    #[test]
    fn regions_edema_only_counts_into_wt() {
        let mut labels = Array3::zeros((1, 2, 5));
        for x in 0..5 {
            labels[[0, 0, x]] = 2;
            labels[[0, 1, x]] = 2;
        }
        let r = compose_regions(&LabelMask::new(labels)).unwrap();
        assert_eq!(r.et.iter().filter(|&&v| v).count(), 0);
        assert_eq!(r.tc.iter().filter(|&&v| v).count(), 0);
        assert_eq!(r.wt.iter().filter(|&&v| v).count(), 10);
    }

    #[test]
    fn regions_reject_label_out_of_range() {
        let mut labels = Array3::zeros((1, 1, 1));
        labels[[0, 0, 0]] = 7;
        assert!(compose_regions(&LabelMask::new(labels)).is_err());
    }

    #[test]
    fn region_nesting_and_wt_count_hold_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let labels = Array3::from_shape_fn((4, 5, 6), |_| rng.random_range(0..4u32) as u8);
            let mask = LabelMask::new(labels);
            let r = compose_regions(&mask).unwrap();
            assert!(r.is_nested());
            assert_eq!(r.wt.iter().filter(|&&v| v).count(), mask.num_foreground());
        }
    }

    #[test]
    fn one_hot_mask_validation_rejects_non_binary() {
        let mut data = Array4::zeros((2, 1, 1, 1));
        data[[0, 0, 0, 0]] = 0.5;
        data[[1, 0, 0, 0]] = 0.5;
        assert!(OneHotMask::new(data).is_err());
    }
}
