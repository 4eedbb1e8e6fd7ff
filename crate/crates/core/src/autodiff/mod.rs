//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records nodes in creation order, which is a topological
//! order, so the backward pass simply walks the node list in reverse.
//! Gradients are accumulated in `f64` regardless of the element type.

mod conv;
mod tensor;

pub use tensor::Tensor;

use conv::{channel_sums, correlate, correlate_adjoint, correlate_weight_grad, Geometry};

use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv3d,
    ConvTranspose3d,
    Prelu,
    Add,
    Concat,
    Sum,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose3d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Prelu { x: Var, slope: Var },
    Add(Var, Var),
    Concat(Vec<Var>),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::ConvTranspose3d { .. } => OpKind::ConvTranspose3d,
            Op::Prelu { .. } => OpKind::Prelu,
            Op::Add(..) => OpKind::Add,
            Op::Concat(_) => OpKind::Concat,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Output extent of a strided convolution, `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (stride >= 1 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output extent of a transposed convolution, `(n - 1) s - 2p + k`.
pub fn conv_transpose_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (n - 1) * stride + k;
    (stride >= 1 && n >= 1 && full > 2 * pad).then(|| full - 2 * pad)
}

fn kernel_dims(w: &[usize]) -> Result<(usize, usize, usize)> {
    match *w {
        [a, b, k, k2, k3] if k == k2 && k == k3 => Ok((a, b, k)),
        _ => Err(Error::Shape(format!("expected a cubic (A, B, k, k, k) kernel, got {w:?}"))),
    }
}

/// Gradients from [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient (data).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (parameters, or inputs under test).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Number of nodes per operation kind.
    pub fn op_counts(&self) -> std::collections::BTreeMap<OpKind, usize> {
        let mut m = std::collections::BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.op.kind()).or_insert(0) += 1;
        }
        m
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Zero-padded strided cross-correlation. `w` is `(Cout, Cin, k, k, k)`,
    /// `b` is `(Cout)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, sp) = self.value(x).activation_shape()?;
        let (c_out, wc_in, k) = kernel_dims(self.value(w).shape())?;
        if wc_in != c_in {
            return Err(Error::Shape(format!("kernel expects {wc_in} input channels, got {c_in}")));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::Shape(format!("bias shape {:?} for {c_out} channels", self.value(b).shape())));
        }
        let mut out_sp = [0; 3];
        for a in 0..3 {
            out_sp[a] = conv_out_extent(sp[a], k, stride, pad).ok_or_else(|| {
                Error::Shape(format!("conv3d output underflow: extent {} k {k} s {stride} p {pad}", sp[a]))
            })?;
        }
        let geo = Geometry {
            input: sp,
            output: out_sp,
            k,
            stride,
            pad,
        };
        let out = correlate(
            self.value(x).data(),
            self.value(w).data(),
            Some(self.value(b).data()),
            c_in,
            c_out,
            geo,
        );
        let value = Tensor::new(
            vec![c_out, out_sp[0], out_sp[1], out_sp[2]],
            out.into_iter().map(T::of).collect(),
        )?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::Conv3d { x, w, b, stride, pad }, rg))
    }

    /// Fractionally strided convolution (the adjoint of [`Graph::conv3d`]
    /// plus a bias). `w` is `(Cin, Cout, k, k, k)`.
    pub fn conv3d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, sp) = self.value(x).activation_shape()?;
        let (wc_in, c_out, k) = kernel_dims(self.value(w).shape())?;
        if wc_in != c_in {
            return Err(Error::Shape(format!("kernel expects {wc_in} input channels, got {c_in}")));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::Shape(format!("bias shape {:?} for {c_out} channels", self.value(b).shape())));
        }
        let mut out_sp = [0; 3];
        for a in 0..3 {
            out_sp[a] = conv_transpose_out_extent(sp[a], k, stride, pad).ok_or_else(|| {
                Error::Shape(format!("transposed conv output underflow: extent {} k {k} s {stride} p {pad}", sp[a]))
            })?;
        }
        // as a correlation, the transposed conv's output is the "input" side
        let geo = Geometry {
            input: out_sp,
            output: sp,
            k,
            stride,
            pad,
        };
        let mut out = correlate_adjoint(self.value(x).data(), self.value(w).data(), c_out, c_in, geo);
        let n = geo.input.iter().product::<usize>();
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            let bv = self.value(b).data()[co].to64();
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(
            vec![c_out, out_sp[0], out_sp[1], out_sp[2]],
            out.into_iter().map(T::of).collect(),
        )?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose3d { x, w, b, stride, pad }, rg))
    }

    /// `y = x` where `x > 0`, else `slope[c] * x`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (c, sp) = self.value(x).activation_shape()?;
        if self.value(slope).shape() != [c] {
            return Err(Error::Shape(format!(
                "PReLU slopes {:?} for {c} channels",
                self.value(slope).shape()
            )));
        }
        let n: usize = sp.iter().product();
        let xs = self.value(x).data();
        let a = self.value(slope).data();
        let mut out = vec![T::zero(); xs.len()];
        par::for_each_chunk(&mut out, n, |ch, o| {
            let xc = &xs[ch * n..(ch + 1) * n];
            for (y, &v) in o.iter_mut().zip(xc) {
                *y = if v > T::zero() { v } else { a[ch] * v };
            }
        });
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.needs(&[x, slope]);
        Ok(self.push(value, Op::Prelu { x, slope }, rg))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(p, q)| *p + *q).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.needs(&[x, y]);
        Ok(self.push(value, Op::Add(x, y), rg))
    }

    /// Channel concatenation in argument order.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, sp) = self.value(first).activation_shape()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for &v in xs {
            let (c, s) = self.value(v).activation_shape()?;
            if s != sp {
                return Err(Error::Shape(format!("concat spatial mismatch {s:?} vs {sp:?}")));
            }
            channels += c;
            data.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::new(vec![channels, sp[0], sp[1], sp[2]], data)?;
        let rg = self.needs(xs);
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to64()).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), rg)
    }

    /// Reverse-mode gradients of a scalar (one-element) node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let v = self.value(root);
        if v.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_seeded(root, &Tensor::new(v.shape().to_vec(), vec![T::one()])?)
    }

    /// Reverse-mode gradients of `sum(seed * root)`.
    pub fn backward_seeded(&self, root: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        acc[root.0] = Some(seed.data().iter().map(|v| v.to64()).collect());

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = acc[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &gy, &mut acc);
            acc[idx] = Some(gy);
        }

        let grads = acc
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|g| {
                    Tensor::new(n.value.shape().to_vec(), g.into_iter().map(T::of).collect())
                        .expect("gradient shape mirrors value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, acc: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut acc[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor<T>, gy: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, stride, pad } => {
                let (c_in, sp) = self.value(*x).activation_shape().unwrap();
                let (c_out, out_sp) = out.activation_shape().unwrap();
                let k = self.value(*w).shape()[2];
                let geo = Geometry {
                    input: sp,
                    output: out_sp,
                    k,
                    stride: *stride,
                    pad: *pad,
                };
                if rg(x) {
                    let g = correlate_adjoint(gy, self.value(*w).data(), c_in, c_out, geo);
                    self.accumulate(acc, *x, g);
                }
                if rg(w) {
                    let g = correlate_weight_grad(self.value(*x).data(), gy, c_in, c_out, geo);
                    self.accumulate(acc, *w, g);
                }
                if rg(b) {
                    self.accumulate(acc, *b, channel_sums(gy, c_out));
                }
            }
            Op::ConvTranspose3d { x, w, b, stride, pad } => {
                let (c_in, sp) = self.value(*x).activation_shape().unwrap();
                let (c_out, out_sp) = out.activation_shape().unwrap();
                let k = self.value(*w).shape()[2];
                let geo = Geometry {
                    input: out_sp,
                    output: sp,
                    k,
                    stride: *stride,
                    pad: *pad,
                };
                if rg(x) {
                    let g = correlate(gy, self.value(*w).data(), None::<&[T]>, c_out, c_in, geo);
                    self.accumulate(acc, *x, g);
                }
                if rg(w) {
                    let g = correlate_weight_grad(gy, self.value(*x).data(), c_out, c_in, geo);
                    self.accumulate(acc, *w, g);
                }
                if rg(b) {
                    self.accumulate(acc, *b, channel_sums(gy, c_out));
                }
            }
            Op::Prelu { x, slope } => {
                let xv = self.value(*x);
                let (c, sp) = xv.activation_shape().unwrap();
                let n: usize = sp.iter().product();
                let a = self.value(*slope).data();
                if rg(x) {
                    let mut g = vec![0.0; gy.len()];
                    par::for_each_chunk(&mut g, n, |ch, o| {
                        let xc = &xv.data()[ch * n..(ch + 1) * n];
                        let gc = &gy[ch * n..(ch + 1) * n];
                        let av = a[ch].to64();
                        for ((o, &xi), &gi) in o.iter_mut().zip(xc).zip(gc) {
                            *o = if xi > T::zero() { gi } else { av * gi };
                        }
                    });
                    self.accumulate(acc, *x, g);
                }
                if rg(slope) {
                    let g = (0..c)
                        .map(|ch| {
                            let xc = &xv.data()[ch * n..(ch + 1) * n];
                            let gc = &gy[ch * n..(ch + 1) * n];
                            xc.iter()
                                .zip(gc)
                                .filter(|(xi, _)| **xi <= T::zero())
                                .map(|(xi, gi)| xi.to64() * gi)
                                .sum()
                        })
                        .collect();
                    self.accumulate(acc, *slope, g);
                }
            }
            Op::Add(x, y) => {
                self.accumulate(acc, *x, gy.to_vec());
                self.accumulate(acc, *y, gy.to_vec());
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for v in xs {
                    let n = self.value(*v).numel();
                    self.accumulate(acc, *v, gy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(acc, *x, vec![gy[0]; n]);
            }
        }
    }
}
