//! Resampling `S(x + u(x))` with trilinear interpolation.
//!
//! Sample coordinates are clamped to `[0, n - 1]` per axis before
//! interpolation. Inside that range the interpolant is piecewise trilinear;
//! on a cell face the derivative is taken from the lower cell. Along an
//! axis where the coordinate was clamped the derivative is zero.

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;
use crate::volume::{Dims, DisplacementField, Volume, VolumeKind};

/// Output of [`warp_image`].
#[derive(Clone, Debug)]
pub struct WarpResult<T: Real = f32> {
    pub warped: Volume<T>,
    /// `x + u(x)` per voxel, in voxel units, before clamping.
    pub sample_coords: Vec<[T; 3]>,
}

#[derive(Clone, Copy)]
struct AxisCell<T> {
    i0: usize,
    i1: usize,
    t: T,
    inside: bool,
}

#[inline(always)]
fn axis_cell<T: Real>(p: T, n: usize) -> AxisCell<T> {
    if n == 1 {
        return AxisCell {
            i0: 0,
            i1: 0,
            t: T::zero(),
            inside: false,
        };
    }
    let hi = T::of((n - 1) as f64);
    let (q, inside) = if p < T::zero() {
        (T::zero(), false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    };
    // ceil(q) - 1 selects the lower cell when q sits exactly on a face
    let i0 = (q.ceil().to64() as isize - 1).clamp(0, n as isize - 2) as usize;
    AxisCell {
        i0,
        i1: i0 + 1,
        t: q - T::of(i0 as f64),
        inside,
    }
}

#[inline(always)]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    (T::one() - t) * a + t * b
}

/// Interpolated value at `p` and its partial derivatives along x, y, z.
#[inline(always)]
fn sample_with_grad<T: Real>(data: &[T], dims: Dims, p: [T; 3]) -> (T, [T; 3]) {
    let cx = axis_cell(p[0], dims.nx);
    let cy = axis_cell(p[1], dims.ny);
    let cz = axis_cell(p[2], dims.nz);
    let at = |x: usize, y: usize, z: usize| data[dims.index(x, y, z)];
    let v000 = at(cx.i0, cy.i0, cz.i0);
    let v100 = at(cx.i1, cy.i0, cz.i0);
    let v010 = at(cx.i0, cy.i1, cz.i0);
    let v110 = at(cx.i1, cy.i1, cz.i0);
    let v001 = at(cx.i0, cy.i0, cz.i1);
    let v101 = at(cx.i1, cy.i0, cz.i1);
    let v011 = at(cx.i0, cy.i1, cz.i1);
    let v111 = at(cx.i1, cy.i1, cz.i1);
    let (tx, ty, tz) = (cx.t, cy.t, cz.t);

    let x00 = lerp(v000, v100, tx);
    let x10 = lerp(v010, v110, tx);
    let x01 = lerp(v001, v101, tx);
    let x11 = lerp(v011, v111, tx);
    let y0 = lerp(x00, x10, ty);
    let y1 = lerp(x01, x11, ty);
    let value = lerp(y0, y1, tz);

    let zero = T::zero();
    let dx = if cx.inside {
        lerp(
            lerp(v100 - v000, v110 - v010, ty),
            lerp(v101 - v001, v111 - v011, ty),
            tz,
        )
    } else {
        zero
    };
    let dy = if cy.inside {
        lerp(x10 - x00, x11 - x01, tz)
    } else {
        zero
    };
    let dz = if cz.inside { y1 - y0 } else { zero };
    (value, [dx, dy, dz])
}

/// Trilinear interpolation of `src` at `p` (voxel units, clamp-to-edge).
pub fn trilinear_sample<T: Real>(src: &Volume<T>, p: [T; 3]) -> T {
    sample_with_grad(src.data(), src.dims(), p).0
}

fn check_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch(format!("volume {a} vs field {b}")));
    }
    Ok(())
}

#[inline(always)]
fn sample_point<T: Real>(dims: Dims, u: &DisplacementField<T>, i: usize) -> [T; 3] {
    let [x, y, z] = dims.coords(i);
    let d = u.at(i);
    [
        T::of(x as f64) + d[0],
        T::of(y as f64) + d[1],
        T::of(z as f64) + d[2],
    ]
}

/// `warped(x) = src(x + u(x))` for every voxel.
pub fn warp_image<T: Real>(src: &Volume<T>, u: &DisplacementField<T>) -> Result<WarpResult<T>> {
    let dims = src.dims();
    check_dims(dims, u.dims())?;
    let mut sample_coords = vec![[T::zero(); 3]; dims.len()];
    par::fill_indexed(&mut sample_coords, |i| sample_point(dims, u, i));
    let mut out = vec![T::zero(); dims.len()];
    par::fill_indexed(&mut out, |i| sample_with_grad(src.data(), dims, sample_coords[i]).0);
    Ok(WarpResult {
        warped: Volume::new(dims, out, VolumeKind::Intensity)?,
        sample_coords,
    })
}

/// Nearest-neighbour resampling of a label volume (round half up per axis,
/// after clamping), so output labels are always drawn from the input.
pub fn warp_labels<T: Real>(lab: &Volume<T>, u: &DisplacementField<T>) -> Result<Volume<T>> {
    let dims = lab.dims();
    check_dims(dims, u.dims())?;
    let ext = dims.as_array();
    let mut out = vec![T::zero(); dims.len()];
    par::fill_indexed(&mut out, |i| {
        let p = sample_point(dims, u, i);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = T::of((ext[a] - 1) as f64);
            let q = p[a].max(T::zero()).min(hi);
            idx[a] = ((q + T::of(0.5)).floor().to64() as usize).min(ext[a] - 1);
        }
        lab.get(idx[0], idx[1], idx[2])
    });
    Volume::new(dims, out, lab.kind())
}

/// Gradient of a scalar loss with respect to `u`, given `upstream[i] =
/// dL/dwarped(i)`.
pub fn warp_backward<T: Real>(
    src: &Volume<T>,
    u: &DisplacementField<T>,
    upstream: &[T],
) -> Result<DisplacementField<T>> {
    let dims = src.dims();
    check_dims(dims, u.dims())?;
    if upstream.len() != dims.len() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            dims.len()
        )));
    }
    let n = dims.len();
    let mut grads = vec![[T::zero(); 3]; n];
    par::fill_indexed(&mut grads, |i| {
        let (_, d) = sample_with_grad(src.data(), dims, sample_point(dims, u, i));
        let g = upstream[i];
        [g * d[0], g * d[1], g * d[2]]
    });
    let mut data = vec![T::zero(); 3 * n];
    for (i, g) in grads.iter().enumerate() {
        data[i] = g[0];
        data[n + i] = g[1];
        data[2 * n + i] = g[2];
    }
    DisplacementField::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp_x(d: Dims) -> Volume<f64> {
        Volume::from_fn(d, VolumeKind::Intensity, |x, _, _| x as f64).unwrap()
    }

    fn random_volume(d: Dims, rng: &mut ChaCha8Rng) -> Volume<f64> {
        Volume::intensity(d, (0..d.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn sample_reproduces_nodes() {
        let d = Dims::new(3, 4, 5);
        let v = Volume::from_fn(d, VolumeKind::Intensity, |x, y, z| (x * 7 + y * 3 + z) as f64 * 0.1).unwrap();
        assert_eq!(trilinear_sample(&v, [1.0, 2.0, 3.0]), v.get(1, 2, 3));
        assert_eq!(trilinear_sample(&v, [2.0, 3.0, 4.0]), v.get(2, 3, 4));
        assert_eq!(trilinear_sample(&v, [0.0, 0.0, 0.0]), v.get(0, 0, 0));
    }

    #[test]
    fn sample_midpoint_and_clamp() {
        let v = ramp_x(Dims::new(2, 1, 1));
        assert_eq!(trilinear_sample(&v, [0.5, 0.0, 0.0]), 0.5);
        let w = Volume::from_fn(Dims::cube(3), VolumeKind::Intensity, |x, y, z| (1 + x + 3 * y + 9 * z) as f64).unwrap();
        assert_eq!(trilinear_sample(&w, [-5.0, 0.0, 0.0]), w.get(0, 0, 0));
        assert_eq!(trilinear_sample(&w, [9.0, 9.0, 9.0]), w.get(2, 2, 2));
    }

    #[test]
    fn zero_field_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(Dims::new(4, 5, 3), &mut rng);
        let r = warp_image(&v, &DisplacementField::zeros(v.dims())).unwrap();
        assert_eq!(r.warped.data(), v.data());
        assert_eq!(r.sample_coords[v.dims().index(3, 1, 2)], [3.0, 1.0, 2.0]);
    }

    #[test]
    fn unit_translation_of_ramp() {
        let d = Dims::cube(5);
        let v = ramp_x(d);
        let u = DisplacementField::from_fn(d, |_, _, _| [1.0, 0.0, 0.0]).unwrap();
        let w = warp_image(&v, &u).unwrap().warped;
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..4 {
                    assert_eq!(w.get(x, y, z), x as f64 + 1.0);
                }
            }
        }
    }

    #[test]
    fn dims_mismatch() {
        let v = ramp_x(Dims::cube(3));
        let u = DisplacementField::<f64>::zeros(Dims::cube(4));
        assert!(matches!(warp_image(&v, &u), Err(Error::DimsMismatch(_))));
        assert!(warp_labels(&v, &u).is_err());
        assert!(warp_backward(&v, &u, &[0.0; 27]).is_err());
    }

    #[test]
    fn labels_round_half_up() {
        let d = Dims::new(4, 2, 2);
        let lab = Volume::labels(d, (0..d.len()).map(|i| (i % 5) as f64).collect()).unwrap();
        let zero = DisplacementField::zeros(d);
        let small = DisplacementField::from_fn(d, |_, _, _| [0.4, 0.0, 0.0]).unwrap();
        let half = DisplacementField::from_fn(d, |_, _, _| [0.5, 0.0, 0.0]).unwrap();
        assert_eq!(warp_labels(&lab, &zero).unwrap(), lab);
        assert_eq!(warp_labels(&lab, &small).unwrap(), lab);
        let shifted = warp_labels(&lab, &half).unwrap();
        assert_eq!(shifted.get(0, 1, 1), lab.get(1, 1, 1));
        assert_eq!(shifted.get(3, 0, 0), lab.get(3, 0, 0));
    }

    #[test]
    fn single_label_shift_matches_per_voxel_oracle() {
        let d = Dims::new(5, 3, 2);
        let lab = Volume::from_fn(d, VolumeKind::Label, |x, y, z| {
            if (x, y, z) == (0, 0, 0) { 1.0 } else { 0.0 }
        })
        .unwrap();
        let u = DisplacementField::from_fn(d, |_, _, _| [1.0f64, 0.0, 0.0]).unwrap();
        let out = warp_labels(&lab, &u).unwrap();
        // oracle: sample point (x + 1, y, z) clamped, rounded; only (0,0,0) carries the label,
        // and no voxel has x + 1 rounding to 0, so the label vanishes entirely
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    let sx = ((x as f64 + 1.0).min(4.0) + 0.5).floor() as usize;
                    let expect = if (sx, y, z) == (0, 0, 0) { 1.0 } else { 0.0 };
                    assert_eq!(out.get(x, y, z), expect);
                }
            }
        }
        // the opposite shift moves the label up along x
        let back = DisplacementField::from_fn(d, |_, _, _| [-1.0f64, 0.0, 0.0]).unwrap();
        let out = warp_labels(&lab, &back).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    let sx = ((x as f64 - 1.0).max(0.0) + 0.5).floor() as usize;
                    let expect = if (sx, y, z) == (0, 0, 0) { 1.0 } else { 0.0 };
                    assert_eq!(out.get(x, y, z), expect, "voxel {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn constant_source_has_zero_gradient() {
        let d = Dims::cube(4);
        let v = Volume::from_fn(d, VolumeKind::Intensity, |_, _, _| 3.0f64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = DisplacementField::new(d, (0..3 * d.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = warp_backward(&v, &u, &vec![1.0; d.len()]).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ramp_gradient_is_unit_along_x() {
        let d = Dims::cube(6);
        let v = ramp_x(d);
        let u = DisplacementField::from_fn(d, |_, _, _| [0.3, 0.2, -0.1]).unwrap();
        let g = warp_backward(&v, &u, &vec![1.0; d.len()]).unwrap();
        for z in 1..5 {
            for y in 1..5 {
                for x in 0..5 {
                    let i = d.index(x, y, z);
                    assert_eq!(g.at(i), [1.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn clamped_axis_has_zero_gradient() {
        let d = Dims::cube(3);
        let v = ramp_x(d);
        let u = DisplacementField::from_fn(d, |_, _, _| [-10.0, 0.0, 0.0]).unwrap();
        let g = warp_backward(&v, &u, &vec![1.0; d.len()]).unwrap();
        assert!(g.channel(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn face_derivative_uses_lower_cell() {
        // values 0, 1, 3 along x: slopes 1 then 2; at x = 1 the lower cell slope is 1
        let v = Volume::intensity(Dims::new(3, 1, 1), vec![0.0f64, 1.0, 3.0]).unwrap();
        let (_, d) = sample_with_grad(v.data(), v.dims(), [1.0, 0.0, 0.0]);
        assert_eq!(d[0], 1.0);
        let (_, d) = sample_with_grad(v.data(), v.dims(), [1.5, 0.0, 0.0]);
        assert_eq!(d[0], 2.0);
    }

    #[test]
    fn backward_matches_central_differences() {
        let d = Dims::cube(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(d, &mut rng);
        let h = 1e-3;
        // keep every sample at least 2h away from a cell face
        let data = (0..3 * d.len())
            .map(|_| loop {
                let r: f64 = rng.random_range(-0.8..0.8);
                if (r - r.round()).abs() >= 2.0 * h {
                    break r;
                }
            })
            .collect();
        let u = DisplacementField::new(d, data).unwrap();
        let analytic = warp_backward(&v, &u, &vec![1.0; d.len()]).unwrap();
        let total = |u: &DisplacementField<f64>| -> f64 { warp_image(&v, u).unwrap().warped.data().iter().sum() };
        let mut data = u.data().to_vec();
        let mut max_err: f64 = 0.0;
        let mut max_g: f64 = 0.0;
        for k in 0..data.len() {
            let orig = data[k];
            data[k] = orig + h;
            let fp = total(&DisplacementField::new(d, data.clone()).unwrap());
            data[k] = orig - h;
            let fm = total(&DisplacementField::new(d, data.clone()).unwrap());
            data[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            max_err = max_err.max((fd - analytic.data()[k]).abs());
            max_g = max_g.max(fd.abs());
        }
        assert!(max_err / max_g < 1e-4, "rel err {}", max_err / max_g);
    }
}
