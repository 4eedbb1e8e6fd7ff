//! Image dissimilarity and regularization terms, and the composed loss
//! `image + alpha * r1 + beta * r2`.
//!
//! Scalar reductions accumulate serially in `f64` in voxel order.

use crate::error::{Error, Result};
use crate::jacobian::{det_map, displacement_jacobian, jacobian_adjoint, r2_backward, r2_penalty, Mat3};
use crate::par;
use crate::real::Real;
use crate::volume::{Dims, DisplacementField, Volume, VolumeKind};
use crate::warp::{warp_backward, warp_image};

/// Added to every correlation denominator.
pub const CC_EPS: f64 = 1e-5;

pub const DEFAULT_WINDOW: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcMode {
    /// Pearson correlation over the whole volume.
    Global,
    /// Mean squared correlation over `window^3` neighbourhoods.
    Local { window: usize },
}

impl Default for CcMode {
    fn default() -> Self {
        CcMode::Local {
            window: DEFAULT_WINDOW,
        }
    }
}

impl std::fmt::Display for CcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CcMode::Global => write!(f, "global"),
            CcMode::Local { window } => write!(f, "local{window}"),
        }
    }
}

impl std::str::FromStr for CcMode {
    type Err = Error;

    /// Accepts `global`, `local` (window 9) or `localN`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "global" {
            return Ok(CcMode::Global);
        }
        if let Some(rest) = s.strip_prefix("local") {
            let window = if rest.is_empty() {
                DEFAULT_WINDOW
            } else {
                rest.parse()
                    .map_err(|_| Error::invalid(format!("bad local window in {s:?}")))?
            };
            check_window(window)?;
            return Ok(CcMode::Local { window });
        }
        Err(Error::invalid(format!("unknown cc mode {s:?}")))
    }
}

/// Loss components for one pair. `total` is computed from the other
/// fields in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub image: f64,
    pub r1: f64,
    pub r2: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(image: f64, r1: f64, r2: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            image,
            r1,
            r2,
            total: image + alpha * r1 + beta * r2,
            alpha,
            beta,
        }
    }
}

fn check_pair<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch(format!("{} vs {}", a.dims(), b.dims())));
    }
    if a.kind() != VolumeKind::Intensity || b.kind() != VolumeKind::Intensity {
        return Err(Error::invalid("correlation needs intensity volumes"));
    }
    Ok(())
}

fn check_window(w: usize) -> Result<()> {
    if w == 0 || w.is_multiple_of(2) {
        return Err(Error::invalid(format!("window size {w} must be odd")));
    }
    Ok(())
}

struct GlobalStats {
    mean_a: f64,
    mean_b: f64,
    cov: f64,
    sd_a: f64,
    sd_b: f64,
}

fn global_stats<T: Real>(a: &[T], b: &[T]) -> GlobalStats {
    let n = a.len() as f64;
    let mean_a = a.iter().map(|v| v.to64()).sum::<f64>() / n;
    let mean_b = b.iter().map(|v| v.to64()).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x.to64() - mean_a;
        let dy = y.to64() - mean_b;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    GlobalStats {
        mean_a,
        mean_b,
        cov: cov / n,
        sd_a: (va / n).sqrt(),
        sd_b: (vb / n).sqrt(),
    }
}

/// Pearson correlation with [`CC_EPS`] added to each standard deviation.
pub fn global_cc<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<f64> {
    check_pair(a, b)?;
    let s = global_stats(a.data(), b.data());
    Ok(s.cov / ((s.sd_a + CC_EPS) * (s.sd_b + CC_EPS)))
}

/// `upstream * d global_cc(a, b) / d a`.
pub fn global_cc_backward<T: Real>(a: &Volume<T>, b: &Volume<T>, upstream: f64) -> Result<Vec<T>> {
    check_pair(a, b)?;
    let s = global_stats(a.data(), b.data());
    let n = a.data().len() as f64;
    let pa = s.sd_a + CC_EPS;
    let pb = s.sd_b + CC_EPS;
    let k_cov = upstream / (n * pa * pb);
    let k_sd = if s.sd_a > 0.0 {
        -upstream * s.cov / (pa * pa * pb) / (n * s.sd_a)
    } else {
        0.0
    };
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| T::of(k_cov * (y.to64() - s.mean_b) + k_sd * (x.to64() - s.mean_a)))
        .collect())
}

/// Sum over the `(2r+1)`-long zero-padded window along `axis`.
fn box_pass(dims: Dims, src: &[f64], r: usize, axis: usize) -> Vec<f64> {
    let ext = dims.as_array();
    let n = ext[axis];
    let stride = dims.stride(axis);
    let slice = dims.nx * dims.ny;
    let mut out = vec![0.0; dims.len()];
    par::for_each_chunk(&mut out, slice, |z, chunk| {
        for (j, o) in chunk.iter_mut().enumerate() {
            let i = z * slice + j;
            let c = dims.coords(i)[axis];
            let lo = c.saturating_sub(r);
            let hi = (c + r).min(n - 1);
            let base = i - c * stride;
            let mut acc = 0.0;
            for k in lo..=hi {
                acc += src[base + k * stride];
            }
            *o = acc;
        }
    });
    out
}

fn box_sum(dims: Dims, src: &[f64], w: usize) -> Vec<f64> {
    let r = w / 2;
    let x = box_pass(dims, src, r, 0);
    let y = box_pass(dims, &x, r, 1);
    box_pass(dims, &y, r, 2)
}

struct LocalTerms {
    /// Per-voxel squared local correlation.
    cc: Vec<f64>,
    sum_a: Vec<f64>,
    sum_b: Vec<f64>,
    cross: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
}

fn local_terms<T: Real>(a: &Volume<T>, b: &Volume<T>, w: usize) -> LocalTerms {
    let dims = a.dims();
    let av: Vec<f64> = a.data().iter().map(|v| v.to64()).collect();
    let bv: Vec<f64> = b.data().iter().map(|v| v.to64()).collect();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
    let ab: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
    let sum_a = box_sum(dims, &av, w);
    let sum_b = box_sum(dims, &bv, w);
    let sum_aa = box_sum(dims, &sq(&av), w);
    let sum_bb = box_sum(dims, &sq(&bv), w);
    let sum_ab = box_sum(dims, &ab, w);
    let wn = (w * w * w) as f64;
    let len = dims.len();
    let mut cross = vec![0.0; len];
    let mut var_a = vec![0.0; len];
    let mut var_b = vec![0.0; len];
    let mut cc = vec![0.0; len];
    for i in 0..len {
        cross[i] = sum_ab[i] - sum_a[i] * sum_b[i] / wn;
        var_a[i] = sum_aa[i] - sum_a[i] * sum_a[i] / wn;
        var_b[i] = sum_bb[i] - sum_b[i] * sum_b[i] / wn;
        cc[i] = cross[i] * cross[i] / (var_a[i] * var_b[i] + CC_EPS);
    }
    LocalTerms {
        cc,
        sum_a,
        sum_b,
        cross,
        var_a,
        var_b,
    }
}

/// Mean over voxels of the squared correlation in each `w^3` window
/// (zero-padded at the borders).
pub fn local_cc<T: Real>(a: &Volume<T>, b: &Volume<T>, w: usize) -> Result<f64> {
    check_pair(a, b)?;
    check_window(w)?;
    let t = local_terms(a, b, w);
    Ok(t.cc.iter().sum::<f64>() / t.cc.len() as f64)
}

/// `upstream * d local_cc(a, b, w) / d a`.
pub fn local_cc_backward<T: Real>(a: &Volume<T>, b: &Volume<T>, w: usize, upstream: f64) -> Result<Vec<T>> {
    check_pair(a, b)?;
    check_window(w)?;
    let dims = a.dims();
    let t = local_terms(a, b, w);
    let wn = (w * w * w) as f64;
    let scale = upstream / dims.len() as f64;
    let len = dims.len();
    // d cc_v / d (window sums of a, a^2, a*b) at every window centre v
    let mut d_sum = vec![0.0; len];
    let mut d_sq = vec![0.0; len];
    let mut d_cross = vec![0.0; len];
    for v in 0..len {
        let den = t.var_a[v] * t.var_b[v] + CC_EPS;
        let d_x = 2.0 * t.cross[v] / den;
        let d_va = -t.cross[v] * t.cross[v] * t.var_b[v] / (den * den);
        d_sum[v] = scale * (d_x * (-t.sum_b[v] / wn) + d_va * (-2.0 * t.sum_a[v] / wn));
        d_sq[v] = scale * d_va;
        d_cross[v] = scale * d_x;
    }
    // windows are symmetric, so the adjoint of a box sum is a box sum
    let g_sum = box_sum(dims, &d_sum, w);
    let g_sq = box_sum(dims, &d_sq, w);
    let g_cross = box_sum(dims, &d_cross, w);
    Ok((0..len)
        .map(|p| {
            let ap = a.data()[p].to64();
            let bp = b.data()[p].to64();
            T::of(g_sum[p] + 2.0 * ap * g_sq[p] + bp * g_cross[p])
        })
        .collect())
}

/// Mean over voxels of the squared Frobenius norm of `Du`.
pub fn r1_smoothness<T: Real>(u: &DisplacementField<T>) -> Result<f64> {
    let jac = displacement_jacobian(u)?;
    let sum: f64 = jac
        .data
        .iter()
        .map(|m| m.iter().flatten().map(|v| v.to64() * v.to64()).sum::<f64>())
        .sum();
    Ok(sum / jac.dims.len() as f64)
}

/// `upstream * d r1_smoothness(u) / du`.
pub fn r1_backward<T: Real>(u: &DisplacementField<T>, upstream: f64) -> Result<DisplacementField<T>> {
    let jac = displacement_jacobian(u)?;
    let scale = 2.0 * upstream / jac.dims.len() as f64;
    let g: Vec<Mat3<f64>> = jac
        .data
        .iter()
        .map(|m| m.map(|row| row.map(|v| scale * v.to64())))
        .collect();
    let grad = jacobian_adjoint(jac.dims, &g);
    DisplacementField::new(jac.dims, grad.into_iter().map(T::of).collect())
}

/// Correlation selected by `mode`, in `[-1, 1]` (global) or `[0, 1]` (local).
pub fn correlation<T: Real>(a: &Volume<T>, b: &Volume<T>, mode: CcMode) -> Result<f64> {
    match mode {
        CcMode::Global => global_cc(a, b),
        CcMode::Local { window } => local_cc(a, b, window),
    }
}

pub fn total_loss<T: Real>(
    warped: &Volume<T>,
    target: &Volume<T>,
    u: &DisplacementField<T>,
    alpha: f64,
    beta: f64,
    mode: CcMode,
) -> Result<LossBreakdown> {
    if warped.dims() != u.dims() {
        return Err(Error::DimsMismatch(format!("image {} vs field {}", warped.dims(), u.dims())));
    }
    let image = 1.0 - correlation(warped, target, mode)?;
    let r1 = r1_smoothness(u)?;
    let r2 = r2_penalty(&det_map(u)?).to64();
    Ok(LossBreakdown::new(image, r1, r2, alpha, beta))
}

/// Gradients of [`total_loss`]'s `total`.
#[derive(Clone, Debug)]
pub struct LossGrads<T: Real> {
    /// With respect to the warped image.
    pub warped: Vec<T>,
    /// With respect to `u` through the regularizers only.
    pub u: DisplacementField<T>,
}

pub fn loss_backward<T: Real>(
    warped: &Volume<T>,
    target: &Volume<T>,
    u: &DisplacementField<T>,
    alpha: f64,
    beta: f64,
    mode: CcMode,
) -> Result<LossGrads<T>> {
    if warped.dims() != u.dims() {
        return Err(Error::DimsMismatch(format!("image {} vs field {}", warped.dims(), u.dims())));
    }
    let d_warped = match mode {
        CcMode::Global => global_cc_backward(warped, target, -1.0)?,
        CcMode::Local { window } => local_cc_backward(warped, target, window, -1.0)?,
    };
    let mut d_u: Vec<T> = vec![T::zero(); 3 * u.dims().len()];
    if alpha != 0.0 {
        let g = r1_backward(u, alpha)?;
        for (o, v) in d_u.iter_mut().zip(g.data()) {
            *o += *v;
        }
    }
    if beta != 0.0 {
        let g = r2_backward(u, T::of(beta))?;
        for (o, v) in d_u.iter_mut().zip(g.data()) {
            *o += *v;
        }
    }
    Ok(LossGrads {
        warped: d_warped,
        u: DisplacementField::new(u.dims(), d_u)?,
    })
}

/// Full registration objective for a field `u`: warps `source`, evaluates
/// the loss against `target` and returns `dL/du` including the path
/// through the resampler. A non-finite loss is a
/// [`Error::DivergedGradient`].
pub fn objective<T: Real>(
    source: &Volume<T>,
    target: &Volume<T>,
    u: &DisplacementField<T>,
    alpha: f64,
    beta: f64,
    mode: CcMode,
) -> Result<(LossBreakdown, DisplacementField<T>)> {
    let warped = warp_image(source, u)?.warped;
    let breakdown = total_loss(&warped, target, u, alpha, beta, mode)?;
    if !breakdown.total.is_finite() {
        return Err(Error::DivergedGradient(format!("non-finite loss {}", breakdown.total)));
    }
    let grads = loss_backward(&warped, target, u, alpha, beta, mode)?;
    let through_warp = warp_backward(source, u, &grads.warped)?;
    let data = through_warp
        .data()
        .iter()
        .zip(grads.u.data())
        .map(|(a, b)| *a + *b)
        .collect();
    Ok((breakdown, DisplacementField::new(u.dims(), data)?))
}

/// Loss value only (no gradients).
pub fn objective_value<T: Real>(
    source: &Volume<T>,
    target: &Volume<T>,
    u: &DisplacementField<T>,
    alpha: f64,
    beta: f64,
    mode: CcMode,
) -> Result<LossBreakdown> {
    let warped = warp_image(source, u)?.warped;
    total_loss(&warped, target, u, alpha, beta, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(d: Dims, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::intensity(d, (0..d.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn map(v: &Volume<f64>, f: impl Fn(f64) -> f64) -> Volume<f64> {
        Volume::intensity(v.dims(), v.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    #[test]
    fn global_cc_basic_cases() {
        let a = noise(Dims::cube(5), 1);
        assert!((global_cc(&a, &a).unwrap() - 1.0).abs() < 1e-4);
        assert!((global_cc(&a, &map(&a, |x| 3.0 - x)).unwrap() + 1.0).abs() < 1e-4);
        assert!(global_cc(&a, &map(&a, |_| 0.7)).unwrap().abs() < 1e-4);
    }

    #[test]
    fn global_cc_gain_invariance() {
        let a = noise(Dims::cube(5), 2);
        let b = noise(Dims::cube(5), 3);
        let base = global_cc(&a, &b).unwrap();
        let scaled = global_cc(&map(&a, |x| 4.0 * x + 2.0), &map(&b, |x| 0.5 * x - 1.0)).unwrap();
        assert!((base - scaled).abs() < 1e-3);
    }

    #[test]
    fn local_cc_cases() {
        let a = noise(Dims::cube(6), 4);
        let self_cc = local_cc(&a, &a, 3).unwrap();
        assert!(self_cc > 0.999 && self_cc <= 1.0, "{self_cc}");
        assert_eq!(local_cc(&map(&a, |_| 0.0), &a, 3).unwrap(), 0.0);
        assert!(local_cc(&a, &a, 4).is_err());
        assert!(local_cc(&a, &noise(Dims::cube(5), 1), 3).is_err());
    }

    #[test]
    fn local_cc_matches_per_window_oracle() {
        let d = Dims::cube(9);
        let a = noise(d, 5);
        let b = noise(d, 6);
        let w = 3usize;
        let r = 1isize;
        let wn = 27.0;
        let mut total = 0.0;
        for z in 0..9isize {
            for y in 0..9isize {
                for x in 0..9isize {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (px, py, pz) = (x + dx, y + dy, z + dz);
                                if [px, py, pz].iter().any(|&c| !(0..9).contains(&c)) {
                                    continue;
                                }
                                let av = a.get(px as usize, py as usize, pz as usize);
                                let bv = b.get(px as usize, py as usize, pz as usize);
                                sa += av;
                                sb += bv;
                                saa += av * av;
                                sbb += bv * bv;
                                sab += av * bv;
                            }
                        }
                    }
                    let cross = sab - sa * sb / wn;
                    let va = saa - sa * sa / wn;
                    let vb = sbb - sb * sb / wn;
                    total += cross * cross / (va * vb + CC_EPS);
                }
            }
        }
        let oracle = total / d.len() as f64;
        let got = local_cc(&a, &b, w).unwrap();
        assert!(got > 0.0 && got < 1.0);
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn r1_cases() {
        let d = Dims::cube(4);
        let c = DisplacementField::from_fn(d, |_, _, _| [1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(r1_smoothness(&c).unwrap(), 0.0);
        assert!(r1_backward(&c, 1.0).unwrap().data().iter().all(|&v| v == 0.0));
        let lin = DisplacementField::from_fn(d, |x, _, _| [x as f64, 0.0, 0.0]).unwrap();
        assert_eq!(r1_smoothness(&lin).unwrap(), 1.0);
    }

    #[test]
    fn r1_matches_direct_summation() {
        let d = Dims::cube(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = DisplacementField::new(d, (0..3 * d.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut sum = 0.0;
        for c in 0..3 {
            let ch = u.channel(c);
            for z in 0..4 {
                for y in 0..4 {
                    for x in 0..4 {
                        let p = [x, y, z];
                        for a in 0..3 {
                            let (mut hi, mut lo) = (p, p);
                            if p[a] == 3 { lo[a] -= 1 } else { hi[a] += 1 }
                            let diff = ch[d.index(hi[0], hi[1], hi[2])] - ch[d.index(lo[0], lo[1], lo[2])];
                            sum += diff * diff;
                        }
                    }
                }
            }
        }
        assert!((r1_smoothness(&u).unwrap() - sum / 64.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_decomposition() {
        let d = Dims::cube(5);
        let a = noise(d, 8);
        let zero = DisplacementField::zeros(d);
        let perfect = total_loss(&a, &a, &zero, 1.0, 0.01, CcMode::default()).unwrap();
        assert!(perfect.total.abs() < 1e-3, "{perfect:?}");

        let b = noise(d, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = DisplacementField::new(d, (0..3 * d.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let l0 = total_loss(&a, &b, &u, 1.0, 0.0, CcMode::Global).unwrap();
        let l1 = total_loss(&a, &b, &u, 1.0, 1e-3, CcMode::Global).unwrap();
        assert!(l0.r2 > 0.0);
        assert_eq!(l0.total, l0.image + l0.r1);
        assert!((l1.total - l0.total - 1e-3 * l1.r2).abs() < 1e-15);
        assert_eq!(l1.total, l1.image + l1.alpha * l1.r1 + l1.beta * l1.r2);
    }

    #[test]
    fn image_gradient_vanishes_at_alignment() {
        let a = noise(Dims::cube(5), 11);
        let zero = DisplacementField::zeros(a.dims());
        for mode in [CcMode::Global, CcMode::Local { window: 3 }] {
            let g = loss_backward(&a, &a, &zero, 1.0, 0.0, mode).unwrap();
            let mag = g.warped.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(mag < 1e-3, "{mode}: {mag}");
        }
    }

    #[test]
    fn cc_mode_parsing() {
        assert_eq!("global".parse::<CcMode>().unwrap(), CcMode::Global);
        assert_eq!("local".parse::<CcMode>().unwrap(), CcMode::Local { window: 9 });
        assert_eq!("local5".parse::<CcMode>().unwrap(), CcMode::Local { window: 5 });
        assert!("local4".parse::<CcMode>().is_err());
        assert!("mi".parse::<CcMode>().is_err());
    }
}
