//! The partition operation and its inverse.
//!
//! `partition` reshapes a `(K, D, H, W)` tensor into a per-channel 2D matrix
//! whose columns are flattened depth-spanning `a×b` patches. Zero bottom-right
//! padding is applied when the spatial dims are not divisible by the patch
//! size. Tiles are ordered row-major (H-tiles, then W-tiles), and each column
//! flattens its patch in `(D, a, b)` row-major order. `unpartition` is the
//! exact left inverse (it crops the padding away).

use ndarray::{Array3, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of one partition: patch size, padding and original dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub a: usize,
    pub b: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub orig_h: usize,
    pub orig_w: usize,
}

impl PartitionSpec {
    /// Computes the padding needed to tile an `h x w` plane with `a x b`
    /// patches.
    pub fn compute(h: usize, w: usize, a: usize, b: usize) -> Result<Self> {
        if a == 0 || b == 0 {
            return Err(Error::InvalidPatchDims { a, b });
        }
        let pad_h = (a - h % a) % a;
        let pad_w = (b - w % b) % b;
        Ok(Self {
            a,
            b,
            pad_h,
            pad_w,
            orig_h: h,
            orig_w: w,
        })
    }

    pub fn padded_h(&self) -> usize {
        self.orig_h + self.pad_h
    }

    pub fn padded_w(&self) -> usize {
        self.orig_w + self.pad_w
    }

    pub fn tiles_h(&self) -> usize {
        self.padded_h() / self.a
    }

    pub fn tiles_w(&self) -> usize {
        self.padded_w() / self.b
    }

    /// Number of patch columns produced by this spec.
    pub fn num_tiles(&self) -> usize {
        self.tiles_h() * self.tiles_w()
    }
}

/// A partitioned tensor: `(K, D·a·b, num_tiles)` plus its generating spec.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub data: Array3<f64>,
    pub spec: PartitionSpec,
}

impl PatchMatrix {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Depth inferred from the row count.
    pub fn depth(&self) -> usize {
        self.data.dim().1 / (self.spec.a * self.spec.b)
    }
}

/// Splits `x` of shape `(K, D, H, W)` into flattened depth-spanning patches.
pub fn partition(x: &ArrayView4<f64>, a: usize, b: usize) -> Result<PatchMatrix> {
    let (k, d, h, w) = x.dim();
    let spec = PartitionSpec::compute(h, w, a, b)?;
    let (th, tw) = (spec.tiles_h(), spec.tiles_w());
    let mut data = Array3::zeros((k, d * a * b, th * tw));
    for kk in 0..k {
        for t_h in 0..th {
            for t_w in 0..tw {
                let col = t_h * tw + t_w;
                for dd in 0..d {
                    for ph in 0..a {
                        let y = t_h * a + ph;
                        if y >= h {
                            continue;
                        }
                        for pw in 0..b {
                            let xx = t_w * b + pw;
                            if xx >= w {
                                continue;
                            }
                            data[[kk, (dd * a + ph) * b + pw, col]] = x[[kk, dd, y, xx]];
                        }
                    }
                }
            }
        }
    }
    Ok(PatchMatrix { data, spec })
}

/// Reassembles patches into a `(K, d_out, orig_h, orig_w)` tensor, cropping
/// any padding applied at partition time.
pub fn unpartition(p: &PatchMatrix, d_out: usize) -> Result<Array4<f64>> {
    let spec = &p.spec;
    let (k, rows, cols) = p.data.dim();
    if cols != spec.num_tiles() {
        return Err(Error::ColumnCountMismatch {
            expected: spec.num_tiles(),
            actual: cols,
        });
    }
    if rows != d_out * spec.a * spec.b {
        return Err(Error::RowCountMismatch {
            rows,
            ab: spec.a * spec.b,
        });
    }
    let (h, w) = (spec.orig_h, spec.orig_w);
    let tw = spec.tiles_w();
    let mut out = Array4::zeros((k, d_out, h, w));
    for kk in 0..k {
        for t_h in 0..spec.tiles_h() {
            for t_w in 0..tw {
                let col = t_h * tw + t_w;
                for dd in 0..d_out {
                    for ph in 0..spec.a {
                        let y = t_h * spec.a + ph;
                        if y >= h {
                            continue;
                        }
                        for pw in 0..spec.b {
                            let xx = t_w * spec.b + pw;
                            if xx >= w {
                                continue;
                            }
                            out[[kk, dd, y, xx]] = p.data[[kk, (dd * spec.a + ph) * spec.b + pw, col]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, k: usize, d: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((k, d, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_without_padding() {
        let x = Array4::<f64>::zeros((1, 8, 16, 16));
        let p = partition(&x.view(), 4, 4).unwrap();
        assert_eq!(p.data.dim(), (1, 128, 16));
        assert_eq!(p.spec.pad_h, 0);
        assert_eq!(p.spec.pad_w, 0);
    }

    #[test]
    fn shape_with_padding() {
        let x = Array4::<f64>::zeros((1, 2, 5, 5));
        let p = partition(&x.view(), 4, 4).unwrap();
        assert_eq!(p.spec.padded_h(), 8);
        assert_eq!(p.spec.padded_w(), 8);
        assert_eq!(p.data.dim(), (1, 32, 4));
        assert_eq!(p.spec.pad_h, 3);
        assert_eq!(p.spec.pad_w, 3);
    }

    #[test]
    fn zero_tensor_maps_to_zero_matrix() {
        let x = Array4::<f64>::zeros((2, 3, 7, 5));
        let p = partition(&x.view(), 4, 4).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_zero_patch_dims() {
        let x = Array4::<f64>::zeros((1, 1, 4, 4));
        assert!(partition(&x.view(), 0, 4).is_err());
        assert!(partition(&x.view(), 4, 0).is_err());
    }

    #[test]
    fn roundtrip_exact_no_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 1, 8, 16, 16);
        let p = partition(&x.view(), 4, 4).unwrap();
        assert_eq!(unpartition(&p, 8).unwrap(), x);
    }

    #[test]
    fn roundtrip_exact_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 3, 2, 5, 7);
        let p = partition(&x.view(), 4, 4).unwrap();
        assert_eq!(unpartition(&p, 2).unwrap(), x);
    }

    #[test]
    fn ones_patches_reassemble_to_ones() {
        // 2x2 patches on a 4x4 grid, depth 1: 4 columns of length 4.
        let spec = PartitionSpec::compute(4, 4, 2, 2).unwrap();
        let p = PatchMatrix {
            data: Array3::from_elem((1, 4, 4), 1.0),
            spec,
        };
        let out = unpartition(&p, 1).unwrap();
        assert_eq!(out, Array4::from_elem((1, 1, 4, 4), 1.0));
    }

    #[test]
    fn unpartition_rejects_wrong_column_count() {
        let spec = PartitionSpec::compute(4, 4, 2, 2).unwrap();
        let p = PatchMatrix {
            data: Array3::zeros((1, 4, 3)),
            spec,
        };
        assert!(matches!(
            unpartition(&p, 1),
            Err(Error::ColumnCountMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn entry_multiset_preserved_without_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 4, 8, 12);
        let p = partition(&x.view(), 4, 4).unwrap();
        let mut a: Vec<f64> = x.iter().copied().collect();
        let mut b: Vec<f64> = p.data.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prop_roundtrip_identity(
            k in 1usize..4,
            d in 1usize..5,
            h in 1usize..20,
            w in 1usize..20,
            a in 1usize..8,
            b in 1usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, k, d, h, w);
            let p = partition(&x.view(), a, b).unwrap();
            prop_assert_eq!(unpartition(&p, d).unwrap(), x);
        }

        #[test]
        fn prop_linearity(
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, 2, 3, 6, 9);
            let y = random_tensor(&mut rng, 2, 3, 6, 9);
            let combo = alpha * &x + beta * &y;
            let p_combo = partition(&combo.view(), 4, 5).unwrap();
            let expect = alpha * &partition(&x.view(), 4, 5).unwrap().data
                + beta * &partition(&y.view(), 4, 5).unwrap().data;
            for (u, v) in p_combo.data.iter().zip(expect.iter()) {
                prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }
}
