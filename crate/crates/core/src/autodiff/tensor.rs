use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{Dims, DisplacementField, Volume};

/// Dense row-major array. Activations are 4D `(C, D, H, W)`, where `W`
/// runs along x, `H` along y and `D` along z, so a volume maps onto a
/// single-channel tensor without reordering. Convolution kernels are 5D
/// `(Cout, Cin, k, k, k)`; biases and slopes are 1D.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(C, [D, H, W])` of a 4D tensor.
    pub fn activation_shape(&self) -> Result<(usize, [usize; 3])> {
        match self.shape.as_slice() {
            &[c, d, h, w] => Ok((c, [d, h, w])),
            other => Err(Error::Shape(format!("expected a (C, D, H, W) tensor, got {other:?}"))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to64())).collect(),
        }
    }

    /// Single-channel view of a volume.
    pub fn from_volume(v: &Volume<T>) -> Self {
        let d = v.dims();
        Tensor {
            shape: vec![1, d.nz, d.ny, d.nx],
            data: v.data().to_vec(),
        }
    }

    /// Channel-stacks volumes of equal dims.
    pub fn stack(vs: &[&Volume<T>]) -> Result<Self> {
        let d = vs
            .first()
            .ok_or_else(|| Error::Shape("stack of zero volumes".into()))?
            .dims();
        let mut data = Vec::with_capacity(vs.len() * d.len());
        for v in vs {
            if v.dims() != d {
                return Err(Error::DimsMismatch(format!("{} vs {}", v.dims(), d)));
            }
            data.extend_from_slice(v.data());
        }
        Ok(Tensor {
            shape: vec![vs.len(), d.nz, d.ny, d.nx],
            data,
        })
    }

    pub fn from_field(u: &DisplacementField<T>) -> Self {
        let d = u.dims();
        Tensor {
            shape: vec![3, d.nz, d.ny, d.nx],
            data: u.data().to_vec(),
        }
    }

    pub fn to_field(&self) -> Result<DisplacementField<T>> {
        let (c, [d, h, w]) = self.activation_shape()?;
        if c != 3 {
            return Err(Error::Shape(format!("a displacement field needs 3 channels, got {c}")));
        }
        DisplacementField::new(Dims::new(w, h, d), self.data.clone())
    }
}
