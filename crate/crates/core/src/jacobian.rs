//! Discrete Jacobian of `x -> x + u(x)`, determinant maps, folding counts
//! and the anti-folding penalty `mean(0.5 * (|det| - det))`.
//!
//! Spatial derivatives use forward differences, falling back to a backward
//! difference on the last slice of each axis. Both are exact on affine
//! fields.

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::volume::{Dims, DisplacementField, Volume, VolumeKind};

/// `m[c][a] = d u_c / d x_a`.
pub type Mat3<T> = [[T; 3]; 3];

/// Per-voxel `Du`.
#[derive(Clone, Debug)]
pub struct JacobianField<T: Real = f32> {
    pub dims: Dims,
    pub data: Vec<Mat3<T>>,
}

/// Per-voxel `det(I + Du)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetMap<T: Real = f32> {
    pub dims: Dims,
    pub values: Vec<T>,
}

pub(crate) fn check_stencil_dims(dims: Dims) -> Result<()> {
    if dims.as_array().iter().any(|&n| n < 2) {
        return Err(Error::DimsMismatch(format!(
            "finite differences need at least 2 voxels per axis, got {dims}"
        )));
    }
    Ok(())
}

/// Index pair `(hi, lo)` such that the derivative along `axis` at voxel
/// `i` is `f[hi] - f[lo]`.
#[inline(always)]
pub(crate) fn stencil(dims: Dims, i: usize, axis: usize) -> (usize, usize) {
    let coord = dims.coords(i)[axis];
    let n = dims.as_array()[axis];
    let s = dims.stride(axis);
    if coord + 1 < n {
        (i + s, i)
    } else {
        (i, i - s)
    }
}

pub fn displacement_jacobian<T: Real>(u: &DisplacementField<T>) -> Result<JacobianField<T>> {
    let dims = u.dims();
    check_stencil_dims(dims)?;
    let mut data = vec![[[T::zero(); 3]; 3]; dims.len()];
    par::fill_indexed(&mut data, |i| {
        let mut m = [[T::zero(); 3]; 3];
        for a in 0..3 {
            let (hi, lo) = stencil(dims, i, a);
            for (c, row) in m.iter_mut().enumerate() {
                let ch = u.channel(c);
                row[a] = ch[hi] - ch[lo];
            }
        }
        m
    });
    Ok(JacobianField { dims, data })
}

#[inline(always)]
fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline(always)]
fn plus_identity<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut out = *m;
    for (k, row) in out.iter_mut().enumerate() {
        row[k] += T::one();
    }
    out
}

/// Determinant by cofactor expansion along the first row.
#[inline(always)]
pub fn det3<T: Real>(m: &Mat3<T>) -> T {
    let c = cross(m[1], m[2]);
    m[0][0] * c[0] + m[0][1] * c[1] + m[0][2] * c[2]
}

/// Cofactor matrix, i.e. `d det(m) / d m`.
#[inline(always)]
pub fn cofactor<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    [cross(m[1], m[2]), cross(m[2], m[0]), cross(m[0], m[1])]
}

pub fn det_map<T: Real>(u: &DisplacementField<T>) -> Result<DetMap<T>> {
    let jac = displacement_jacobian(u)?;
    let mut values = vec![T::zero(); jac.dims.len()];
    par::fill_indexed(&mut values, |i| det3(&plus_identity(&jac.data[i])));
    Ok(DetMap {
        dims: jac.dims,
        values,
    })
}

/// Number of voxels with a strictly negative determinant.
pub fn folding_count<T: Real>(d: &DetMap<T>) -> usize {
    d.values.iter().filter(|&&v| v < T::zero()).count()
}

pub fn r2_penalty<T: Real>(d: &DetMap<T>) -> T {
    let sum: f64 = d
        .values
        .iter()
        .map(|v| {
            let v = v.to64();
            0.5 * (v.abs() - v)
        })
        .sum();
    T::of(sum / d.values.len() as f64)
}

/// Applies the adjoint of the difference stencil: given `g[i][c][a] =
/// dL/d(Du)_{c,a}(i)`, returns `dL/du` in channel-major order.
pub(crate) fn jacobian_adjoint(dims: Dims, g: &[Mat3<f64>]) -> Vec<f64> {
    let n = dims.len();
    let mut out = vec![0.0f64; 3 * n];
    // channels are independent; within a channel the scatter is sequential
    par::for_each_chunk(&mut out, n, |c, ch| {
        for (i, gi) in g.iter().enumerate() {
            for (a, &ga) in gi[c].iter().enumerate() {
                if ga == 0.0 {
                    continue;
                }
                let (hi, lo) = stencil(dims, i, a);
                ch[hi] += ga;
                ch[lo] -= ga;
            }
        }
    });
    out
}

/// `d(upstream * r2_penalty(det_map(u))) / du`.
///
/// The subgradient of `max(-det, 0)` at `det = 0` is taken as zero.
pub fn r2_backward<T: Real>(u: &DisplacementField<T>, upstream: T) -> Result<DisplacementField<T>> {
    let dims = u.dims();
    let jac = displacement_jacobian(u)?;
    let scale = upstream.to64() / dims.len() as f64;
    let mut g = vec![[[0.0f64; 3]; 3]; dims.len()];
    par::fill_indexed(&mut g, |i| {
        let m = plus_identity(&jac.data[i]);
        if det3(&m) < T::zero() {
            cofactor(&m).map(|row| row.map(|v| -scale * v.to64()))
        } else {
            [[0.0; 3]; 3]
        }
    });
    let grad = jacobian_adjoint(dims, &g);
    DisplacementField::new(dims, grad.into_iter().map(T::of).collect())
}

impl<T: Real> DetMap<T> {
    /// The determinant map as an intensity volume.
    pub fn to_volume(&self) -> Volume<T> {
        Volume::new(self.dims, self.values.clone(), VolumeKind::Intensity)
            .expect("det map dims are consistent")
    }

    /// 1.0 where the determinant is negative, 0.0 elsewhere.
    pub fn folding_mask(&self) -> Volume<T> {
        let data = self
            .values
            .iter()
            .map(|&v| if v < T::zero() { T::one() } else { T::zero() })
            .collect();
        Volume::new(self.dims, data, VolumeKind::Intensity).expect("det map dims are consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine(d: Dims, a: Mat3<f64>, b: [f64; 3]) -> DisplacementField<f64> {
        DisplacementField::from_fn(d, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            let mut out = b;
            for c in 0..3 {
                for k in 0..3 {
                    out[c] += a[c][k] * p[k];
                }
            }
            out
        })
        .unwrap()
    }

    fn random_field(d: Dims, scale: f64, seed: u64) -> DisplacementField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DisplacementField::new(d, (0..3 * d.len()).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_field_has_zero_jacobian_and_unit_det() {
        let u = DisplacementField::from_fn(Dims::cube(3), |_, _, _| [0.3, -2.0, 5.0]).unwrap();
        let j = displacement_jacobian(&u).unwrap();
        assert!(j.data.iter().all(|m| m.iter().flatten().all(|&v| v == 0.0)));
        assert!(det_map(&u).unwrap().values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_field_jacobian_is_exact() {
        let a = [[0.1, 0.2, -0.3], [0.0, 0.5, 0.25], [-0.125, 0.0, 0.75]];
        let j = displacement_jacobian(&affine(Dims::new(3, 4, 5), a, [0.0; 3])).unwrap();
        for m in &j.data {
            for c in 0..3 {
                for k in 0..3 {
                    assert!((m[c][k] - a[c][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_index_oracle() {
        let d = Dims::cube(4);
        let u = random_field(d, 1.0, 5);
        let j = displacement_jacobian(&u).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let p = [x, y, z];
                    for a in 0..3 {
                        let (mut hi, mut lo) = (p, p);
                        if p[a] == 3 {
                            lo[a] -= 1;
                        } else {
                            hi[a] += 1;
                        }
                        for c in 0..3 {
                            let ch = u.channel(c);
                            let expect = ch[d.index(hi[0], hi[1], hi[2])] - ch[d.index(lo[0], lo[1], lo[2])];
                            assert_eq!(j.data[d.index(x, y, z)][c][a], expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn extent_one_is_rejected() {
        let u = DisplacementField::<f64>::zeros(Dims::new(1, 4, 4));
        assert!(displacement_jacobian(&u).is_err());
        assert!(det_map(&u).is_err());
        assert!(r2_backward(&u, 1.0).is_err());
    }

    #[test]
    fn analytic_determinants() {
        let d = Dims::cube(4);
        let stretch = det_map(&affine(d, [[0.1, 0.0, 0.0], [0.0; 3], [0.0; 3]], [0.0; 3])).unwrap();
        assert!(stretch.values.iter().all(|v| (v - 1.1).abs() < 1e-12));
        let fold = det_map(&affine(d, [[-2.0, 0.0, 0.0], [0.0; 3], [0.0; 3]], [0.0; 3])).unwrap();
        assert!(fold.values.iter().all(|&v| v == -1.0));
        assert_eq!(folding_count(&fold), d.len());
        assert_eq!(r2_penalty(&fold), 1.0);
    }

    #[test]
    fn folding_count_is_strict() {
        let m = DetMap { dims: Dims::new(3, 1, 1), values: vec![1.0f64, -1.0, 0.5] };
        assert_eq!(folding_count(&m), 1);
        assert!((r2_penalty(&m) - 1.0 / 3.0).abs() < 1e-15);
        let z = DetMap { dims: Dims::new(2, 1, 1), values: vec![0.0f64, -0.0] };
        assert_eq!(folding_count(&z), 0);
        assert_eq!(r2_penalty(&z), 0.0);
        let neg = DetMap { dims: Dims::new(2, 1, 1), values: vec![-2.0f64, -2.0] };
        assert_eq!(r2_penalty(&neg), 2.0);
        let ones = DetMap { dims: Dims::new(2, 1, 1), values: vec![1.0f64, 3.0] };
        assert_eq!((folding_count(&ones), r2_penalty(&ones)), (0, 0.0));
    }

    #[test]
    fn cofactor_is_determinant_gradient() {
        let m: Mat3<f64> = [[1.2, 0.3, -0.4], [0.1, 0.9, 0.2], [-0.5, 0.7, 1.1]];
        let cof = cofactor(&m);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = m;
                p[i][j] += h;
                let mut q = m;
                q[i][j] -= h;
                let fd = (det3(&p) - det3(&q)) / (2.0 * h);
                assert!((fd - cof[i][j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fold_free_field_has_zero_r2_gradient() {
        let u = random_field(Dims::cube(5), 0.05, 9);
        assert_eq!(folding_count(&det_map(&u).unwrap()), 0);
        let g = r2_backward(&u, 1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn folding_ramp_gradient_matches_differences() {
        let d = Dims::cube(4);
        let u = affine(d, [[-2.0, 0.0, 0.0], [0.0; 3], [0.0; 3]], [0.0; 3]);
        let g = r2_backward(&u, 1.0).unwrap();
        assert!(g.channel(0).iter().any(|&v| v != 0.0));
        // central differences on every entry
        let f = |u: &DisplacementField<f64>| r2_penalty(&det_map(u).unwrap());
        let h = 1e-6;
        let mut data = u.data().to_vec();
        for k in 0..3 * d.len() {
            let orig = data[k];
            data[k] = orig + h;
            let fp = f(&DisplacementField::new(d, data.clone()).unwrap());
            data[k] = orig - h;
            let fm = f(&DisplacementField::new(d, data.clone()).unwrap());
            data[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-8, "entry {k}: fd {fd} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn masks_export() {
        let m = DetMap { dims: Dims::new(3, 1, 1), values: vec![1.0f32, -1.0, 0.0] };
        assert_eq!(m.folding_mask().data(), &[0.0, 1.0, 0.0]);
        assert_eq!(m.to_volume().data(), &[1.0, -1.0, 0.0]);
    }
}
