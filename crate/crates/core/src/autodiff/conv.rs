//! Strided 3D cross-correlation kernels shared by the forward and backward
//! passes of `conv3d` and `conv3d_transpose`.
//!
//! With input extent `n_in`, output extent `n_out`, stride `s` and padding
//! `p`, output `o` reads input `o * s + t - p` through tap `t`. All three
//! kernels accumulate in `f64`, and each output element is owned by a
//! single task that sums in a fixed order.

use crate::par;
use crate::real::Real;

/// `pairs[t]` lists every `(o, i)` with `i = o * s + t - p` in range.
pub(crate) fn axis_pairs(n_in: usize, n_out: usize, k: usize, s: usize, p: usize) -> Vec<Vec<(usize, usize)>> {
    (0..k)
        .map(|t| {
            (0..n_out)
                .filter_map(|o| {
                    let i = (o * s + t) as isize - p as isize;
                    (i >= 0 && (i as usize) < n_in).then_some((o, i as usize))
                })
                .collect()
        })
        .collect()
}

/// Geometry of one correlation: `input` side and `output` side extents.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    fn pairs(&self) -> [Vec<Vec<(usize, usize)>>; 3] {
        [0, 1, 2].map(|a| axis_pairs(self.input[a], self.output[a], self.k, self.stride, self.pad))
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }
}

/// `out[co, o] = bias[co] + sum_{ci, t} w[co, ci, t] * x[ci, o*s - p + t]`.
///
/// `x` is `(c_in, input)`, `w` is `(c_out, c_in, k^3)`.
pub(crate) fn correlate<A: Real, B: Real>(
    x: &[A],
    w: &[B],
    bias: Option<&[B]>,
    c_in: usize,
    c_out: usize,
    g: Geometry,
) -> Vec<f64> {
    let [pz, py, px] = g.pairs();
    let [_, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (k, k3) = (g.k, g.k * g.k * g.k);
    let in_len = g.in_len();
    let mut out = vec![0.0f64; c_out * g.out_len()];
    par::for_each_chunk(&mut out, oh * ow, |slab, acc| {
        let (co, oz) = (slab / od, slab % od);
        let b = bias.map_or(0.0, |b| b[co].to64());
        acc.fill(b);
        for ci in 0..c_in {
            let xc = &x[ci * in_len..(ci + 1) * in_len];
            let wc = &w[(co * c_in + ci) * k3..(co * c_in + ci + 1) * k3];
            for (tz, zl) in pz.iter().enumerate() {
                let Some(&(_, iz)) = zl.iter().find(|(o, _)| *o == oz) else {
                    continue;
                };
                for (ty, yl) in py.iter().enumerate() {
                    for &(oy, iy) in yl {
                        let row_in = (iz * ih + iy) * iw;
                        let row_out = oy * ow;
                        for (tx, xl) in px.iter().enumerate() {
                            let wv = wc[(tz * k + ty) * k + tx].to64();
                            for &(ox, ix) in xl {
                                acc[row_out + ox] += wv * xc[row_in + ix].to64();
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`correlate`] with respect to its input:
/// `out[ci, i] = sum_{co, t : i = o*s - p + t} w[co, ci, t] * gy[co, o]`.
///
/// `gy` is `(c_out, output)`; the result is `(c_in, input)`.
pub(crate) fn correlate_adjoint<A: Real, B: Real>(
    gy: &[A],
    w: &[B],
    c_in: usize,
    c_out: usize,
    g: Geometry,
) -> Vec<f64> {
    let [pz, py, px] = g.pairs();
    let [id, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (k, k3) = (g.k, g.k * g.k * g.k);
    let out_len = g.out_len();
    // for each input z: the (tap, output z) pairs that read it
    let mut inv_z: Vec<Vec<(usize, usize)>> = vec![Vec::new(); id];
    for (t, zl) in pz.iter().enumerate() {
        for &(o, i) in zl {
            inv_z[i].push((t, o));
        }
    }
    let mut out = vec![0.0f64; c_in * g.in_len()];
    par::for_each_chunk(&mut out, ih * iw, |slab, acc| {
        let (ci, iz) = (slab / id, slab % id);
        for co in 0..c_out {
            let gc = &gy[co * out_len..(co + 1) * out_len];
            let wc = &w[(co * c_in + ci) * k3..(co * c_in + ci + 1) * k3];
            for &(tz, oz) in &inv_z[iz] {
                for (ty, yl) in py.iter().enumerate() {
                    for &(oy, iy) in yl {
                        let row_in = iy * iw;
                        let row_out = (oz * oh + oy) * ow;
                        for (tx, xl) in px.iter().enumerate() {
                            let wv = wc[(tz * k + ty) * k + tx].to64();
                            for &(ox, ix) in xl {
                                acc[row_in + ix] += wv * gc[row_out + ox].to64();
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of [`correlate`] with respect to its weights:
/// `dw[co, ci, t] = sum_o gy[co, o] * x[ci, o*s - p + t]`.
pub(crate) fn correlate_weight_grad<A: Real, B: Real>(
    x: &[A],
    gy: &[B],
    c_in: usize,
    c_out: usize,
    g: Geometry,
) -> Vec<f64> {
    let [pz, py, px] = g.pairs();
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (k, k3) = (g.k, g.k * g.k * g.k);
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut out = vec![0.0f64; c_out * c_in * k3];
    par::for_each_chunk(&mut out, k3, |pair, acc| {
        let (co, ci) = (pair / c_in, pair % c_in);
        let xc = &x[ci * in_len..(ci + 1) * in_len];
        let gc = &gy[co * out_len..(co + 1) * out_len];
        for (tz, zl) in pz.iter().enumerate() {
            for &(oz, iz) in zl {
                for (ty, yl) in py.iter().enumerate() {
                    for &(oy, iy) in yl {
                        let row_in = (iz * ih + iy) * iw;
                        let row_out = (oz * oh + oy) * ow;
                        for (tx, xl) in px.iter().enumerate() {
                            let mut s = 0.0;
                            for &(ox, ix) in xl {
                                s += gc[row_out + ox].to64() * xc[row_in + ix].to64();
                            }
                            acc[(tz * k + ty) * k + tx] += s;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Per-channel sums of a `(c, n)` array.
pub(crate) fn channel_sums<A: Real>(gy: &[A], c: usize) -> Vec<f64> {
    let n = gy.len() / c;
    (0..c)
        .map(|ch| gy[ch * n..(ch + 1) * n].iter().map(|v| v.to64()).sum())
        .collect()
}
