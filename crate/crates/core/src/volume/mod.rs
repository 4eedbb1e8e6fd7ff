//! Volume, label and displacement-field value types.
//!
//! All 3D data uses x-fastest linear order: voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. A displacement field stores three such planes
//! back to back, channel `c` holding the displacement along axis `c` in
//! voxel units.

mod frv;
mod nifti;

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

pub use frv::{read_frv, write_frv, FrvPayload, FRV_HEADER_LEN, FRV_MAGIC};
pub use nifti::{parse_nifti, NIFTI_HEADER_LEN};

/// Extents along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    #[inline(always)]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline(always)]
    pub const fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let r = i / self.nx;
        [x, r % self.ny, r / self.ny]
    }

    /// Stride of one step along `axis` in the linear layout.
    #[inline(always)]
    pub const fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.nx,
            _ => self.nx * self.ny,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.nx > 0 && self.ny > 0 && self.nz > 0
    }

    /// Largest extents `<= self` that are multiples of `m` per axis.
    pub fn floor_to_multiple(&self, m: usize) -> Dims {
        Dims::new(self.nx / m * m, self.ny / m * m, self.nz / m * m)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    Intensity,
    Label,
}

/// A scalar 3D field: image intensities or a single-label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f32> {
    dims: Dims,
    data: Vec<T>,
    kind: VolumeKind,
}

impl<T: Real> Volume<T> {
    pub fn new(dims: Dims, data: Vec<T>, kind: VolumeKind) -> Result<Self> {
        if !dims.is_positive() {
            return Err(Error::invalid(format!("non-positive dims {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::PayloadMismatch {
                expected: dims.len(),
                found: data.len(),
            });
        }
        if kind == VolumeKind::Label {
            if let Some(bad) = data.iter().find(|v| !is_label_value(**v)) {
                return Err(Error::invalid(format!(
                    "label volume contains non-integer or negative value {bad}"
                )));
            }
        }
        Ok(Volume { dims, data, kind })
    }

    pub fn intensity(dims: Dims, data: Vec<T>) -> Result<Self> {
        Self::new(dims, data, VolumeKind::Intensity)
    }

    pub fn labels(dims: Dims, data: Vec<T>) -> Result<Self> {
        Self::new(dims, data, VolumeKind::Label)
    }

    pub fn zeros(dims: Dims, kind: VolumeKind) -> Self {
        Volume {
            dims,
            data: vec![T::zero(); dims.len()],
            kind,
        }
    }

    pub fn from_fn(dims: Dims, kind: VolumeKind, f: impl Fn(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, data, kind)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Reinterprets an intensity volume as labels, checking the label invariant.
    pub fn into_labels(self) -> Result<Self> {
        Self::new(self.dims, self.data, VolumeKind::Label)
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.to64())).collect(),
            kind: self.kind,
        }
    }

    /// Divides every voxel by the volume maximum.
    pub fn normalize_intensity(&self) -> Result<Self> {
        if self.kind != VolumeKind::Intensity {
            return Err(Error::invalid("normalize_intensity on a label volume"));
        }
        let max = self.max();
        if !max.is_finite() || max <= T::zero() {
            return Err(Error::DegenerateIntensity(max.to64()));
        }
        let data = self.data.iter().map(|&v| v / max).collect();
        Ok(Volume {
            dims: self.dims,
            data,
            kind: self.kind,
        })
    }

    /// Extracts the centered `target` subvolume. The offset along each axis
    /// is `floor((n - t) / 2)`, so odd remainders trim the extra voxel from
    /// the high side.
    pub fn center_crop(&self, target: Dims) -> Result<Self> {
        let off = crop_offsets(self.dims, target)?;
        let mut data = Vec::with_capacity(target.len());
        for z in 0..target.nz {
            for y in 0..target.ny {
                let row = self.dims.index(off[0], y + off[1], z + off[2]);
                data.extend_from_slice(&self.data[row..row + target.nx]);
            }
        }
        Ok(Volume {
            dims: target,
            data,
            kind: self.kind,
        })
    }
}

/// Per-axis offsets used by [`Volume::center_crop`].
pub fn crop_offsets(dims: Dims, target: Dims) -> Result<[usize; 3]> {
    let (d, t) = (dims.as_array(), target.as_array());
    if !target.is_positive() || (0..3).any(|a| t[a] > d[a]) {
        return Err(Error::DimsMismatch(format!(
            "crop target {target} exceeds volume dims {dims}"
        )));
    }
    Ok([(d[0] - t[0]) / 2, (d[1] - t[1]) / 2, (d[2] - t[2]) / 2])
}

fn is_label_value<T: Real>(v: T) -> bool {
    v >= T::zero() && v.fract() == T::zero() && v.to64() <= i32::MAX as f64
}

/// Per-voxel displacement `u(x)` in voxel units, three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> DisplacementField<T> {
    /// `data` holds channel 0 (x), then channel 1 (y), then channel 2 (z).
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        if !dims.is_positive() {
            return Err(Error::invalid(format!("non-positive dims {dims}")));
        }
        if data.len() != 3 * dims.len() {
            return Err(Error::PayloadMismatch {
                expected: 3 * dims.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("displacement field contains NaN or Inf"));
        }
        Ok(DisplacementField { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        DisplacementField {
            dims,
            data: vec![T::zero(); 3 * dims.len()],
        }
    }

    /// Builds a field from `f(x, y, z) -> [ux, uy, uz]`.
    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> [T; 3]) -> Result<Self> {
        let n = dims.len();
        let mut data = vec![T::zero(); 3 * n];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.index(x, y, z);
                    let v = f(x, y, z);
                    for c in 0..3 {
                        data[c * n + i] = v[c];
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline(always)]
    pub fn at(&self, i: usize) -> [T; 3] {
        let n = self.dims.len();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.to64())).collect(),
        }
    }

    pub fn center_crop(&self, target: Dims) -> Result<Self> {
        let off = crop_offsets(self.dims, target)?;
        let mut data = Vec::with_capacity(3 * target.len());
        for c in 0..3 {
            let ch = self.channel(c);
            for z in 0..target.nz {
                for y in 0..target.ny {
                    let row = self.dims.index(off[0], y + off[1], z + off[2]);
                    data.extend_from_slice(&ch[row..row + target.nx]);
                }
            }
        }
        Ok(DisplacementField { dims: target, data })
    }
}

/// Loads an intensity or label volume from an FRV1 container or an
/// uncompressed NIfTI-1 file. NIfTI data is always returned as intensity.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(FRV_MAGIC) {
        match read_frv(&bytes)? {
            FrvPayload::Volume(v) => Ok(v),
            FrvPayload::Field(_) => Err(Error::UnsupportedKind(
                "displacement container where a scalar volume was expected".into(),
            )),
        }
    } else {
        parse_nifti(&bytes)
    }
}

/// Loads a volume and checks that it holds labels.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Volume> {
    let v = load_volume(path)?;
    match v.kind() {
        VolumeKind::Label => Ok(v),
        VolumeKind::Intensity => v.into_labels(),
    }
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_frv(&FrvPayload::Volume(v.clone()))).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match read_frv(&bytes)? {
        FrvPayload::Field(f) => Ok(f),
        FrvPayload::Volume(_) => Err(Error::UnsupportedKind(
            "scalar volume where a displacement field was expected".into(),
        )),
    }
}

pub fn save_field(u: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_frv(&FrvPayload::Field(u.clone()))).map_err(|e| Error::io(path, e))
}
