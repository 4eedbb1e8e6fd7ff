//! Displacement predictors.
//!
//! [`build_faim`] creates the parameters of an inception-style
//! encoder/decoder:
//!
//! ```text
//! input (2: source, target)
//!  L0  parallel convs k in {3,5,7}, stride 1, PReLU each -> concat -> 1^3 merge conv -> C0, PReLU
//!  L1  conv k3 s2  C0 -> C1, PReLU
//!  L2  conv k3 s2  C1 -> C2, PReLU
//!  L3  conv k3 s1  C2 -> C2, + L2 (skip 1), PReLU
//!  U2  transposed conv k2 s2  C2 -> C1, + L1 (skip 2), PReLU
//!  U1  transposed conv k2 s2  C1 -> C0, + L0 (skip 3), PReLU
//!  head conv k3 s1  C0 -> 3, linear
//! ```
//!
//! Downsampling is done by strided convolutions only; there is no pooling.
//! The direct-field model has no network at all: its single parameter
//! tensor is the displacement field itself.

mod checkpoint;
mod describe;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use describe::{describe_checkpoint, describe_faim, graph_summary, GraphSummary};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{Dims, DisplacementField, Volume};

pub const PRELU_INIT: f64 = 0.25;
/// Scale applied to the head weights so the initial field is near zero.
pub const HEAD_INIT_SCALE: f64 = 1e-3;
/// Trainable-parameter count reported for the original network at
/// 144x180x144, printed by `describe` for comparison.
pub const REFERENCE_PARAM_COUNT: usize = 179_787;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Real> NamedTensor<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

/// Ordered, named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    params: Vec<NamedTensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(params: Vec<NamedTensor<T>>) -> Self {
        ModelParams { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, NamedTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, NamedTensor<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn push(&mut self, p: NamedTensor<T>) {
        self.params.push(p);
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| NamedTensor::new(p.name.clone(), p.tensor.cast()))
                .collect(),
        }
    }
}

/// Total number of scalar parameters.
pub fn param_count<T: Real>(params: &ModelParams<T>) -> usize {
    params.iter().map(|p| p.tensor.numel()).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaimConfig {
    pub branch_kernels: Vec<usize>,
    pub branch_channels: usize,
    /// Merge (L0) channels.
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
    pub head_kernel: usize,
}

impl Default for FaimConfig {
    fn default() -> Self {
        FaimConfig {
            branch_kernels: vec![3, 5, 7],
            branch_channels: 8,
            c0: 16,
            c1: 32,
            c2: 32,
            head_kernel: 3,
        }
    }
}

impl FaimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branch_kernels.is_empty() {
            return Err(Error::invalid("at least one inception branch is required"));
        }
        for &k in self.branch_kernels.iter().chain([&self.head_kernel]) {
            if k == 0 || k % 2 == 0 {
                return Err(Error::invalid(format!("kernel size {k} must be odd")));
            }
        }
        for (name, c) in [
            ("branch_channels", self.branch_channels),
            ("c0", self.c0),
            ("c1", self.c1),
            ("c2", self.c2),
        ] {
            if c == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Reads `branch_kernels`, `branch_channels`, `c0`, `c1`, `c2` and
    /// `head_kernel` from a key=value map; missing keys keep defaults.
    pub fn from_kv(kv: &crate::kv::KeyValues) -> Result<Self> {
        let mut cfg = FaimConfig::default();
        if let Some(list) = kv.get("branch_kernels") {
            cfg.branch_kernels = crate::kv::parse_list(list, "branch_kernels")?;
        }
        cfg.branch_channels = kv.parse_or("branch_channels", cfg.branch_channels)?;
        cfg.c0 = kv.parse_or("c0", cfg.c0)?;
        cfg.c1 = kv.parse_or("c1", cfg.c1)?;
        cfg.c2 = kv.parse_or("c2", cfg.c2)?;
        cfg.head_kernel = kv.parse_or("head_kernel", cfg.head_kernel)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Input extents must survive two stride-2 stages exactly.
pub fn check_faim_dims(d: Dims) -> Result<()> {
    if d.as_array().iter().any(|&n| n == 0 || n % 4 != 0) {
        return Err(Error::DimsMismatch(format!(
            "network input dims {d} must be positive multiples of 4"
        )));
    }
    Ok(())
}

fn uniform_kernel<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 5], fan_in: usize, fan_out: usize, scale: f64) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(scale * rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("kernel shape is consistent")
}

#[allow(clippy::too_many_arguments)]
fn push_conv<T: Real>(
    params: &mut ModelParams<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    transposed: bool,
    slope: bool,
    scale: f64,
) {
    let k3 = k * k * k;
    let shape = if transposed {
        [c_in, c_out, k, k, k]
    } else {
        [c_out, c_in, k, k, k]
    };
    params.push(NamedTensor::new(
        format!("{name}.weight"),
        uniform_kernel(rng, shape, c_in * k3, c_out * k3, scale),
    ));
    params.push(NamedTensor::new(format!("{name}.bias"), Tensor::zeros(&[c_out])));
    if slope {
        params.push(NamedTensor::new(
            format!("{name}.slope"),
            Tensor::full(&[c_out], T::of(PRELU_INIT)),
        ));
    }
}

/// Parameters for the default graph, drawn deterministically from `seed`.
pub fn build_faim<T: Real>(cfg: &FaimConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::default();
    for &k in &cfg.branch_kernels {
        push_conv(&mut p, &mut rng, &format!("inception.k{k}"), 2, cfg.branch_channels, k, false, true, 1.0);
    }
    let cat = cfg.branch_channels * cfg.branch_kernels.len();
    push_conv(&mut p, &mut rng, "merge", cat, cfg.c0, 1, false, true, 1.0);
    push_conv(&mut p, &mut rng, "down1", cfg.c0, cfg.c1, 3, false, true, 1.0);
    push_conv(&mut p, &mut rng, "down2", cfg.c1, cfg.c2, 3, false, true, 1.0);
    push_conv(&mut p, &mut rng, "bottleneck", cfg.c2, cfg.c2, 3, false, true, 1.0);
    push_conv(&mut p, &mut rng, "up2", cfg.c2, cfg.c1, 2, true, true, 1.0);
    push_conv(&mut p, &mut rng, "up1", cfg.c1, cfg.c0, 2, true, true, 1.0);
    push_conv(&mut p, &mut rng, "head", cfg.c0, 3, cfg.head_kernel, false, false, HEAD_INIT_SCALE);
    Ok(p)
}

/// Variables of one recorded forward pass.
pub struct FaimVars {
    /// One variable per parameter, in [`ModelParams`] order.
    pub params: Vec<Var>,
    pub input: Var,
    /// `(3, D, H, W)` displacement.
    pub output: Var,
}

/// Records the forward pass on `input` `(2, D, H, W)` into `g`.
pub fn faim_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &FaimConfig,
    params: &ModelParams<T>,
    input: Tensor<T>,
    input_requires_grad: bool,
) -> Result<FaimVars> {
    cfg.validate()?;
    let (c, [d, h, w]) = input.activation_shape()?;
    if c != 2 {
        return Err(Error::Shape(format!("network input needs 2 channels, got {c}")));
    }
    check_faim_dims(Dims::new(w, h, d))?;
    let input = if input_requires_grad {
        g.variable(input)
    } else {
        g.constant(input)
    };
    let vars: Vec<Var> = params.iter().map(|p| g.variable(p.tensor.clone())).collect();
    let by_name: HashMap<&str, Var> = params.iter().map(|p| p.name.as_str()).zip(vars.iter().copied()).collect();
    let get = |name: String| -> Result<Var> {
        by_name
            .get(name.as_str())
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    };
    let conv = |g: &mut Graph<T>, x: Var, name: &str, stride: usize, pad: usize| -> Result<Var> {
        g.conv3d(x, get(format!("{name}.weight"))?, get(format!("{name}.bias"))?, stride, pad)
    };
    let act = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> { g.prelu(x, get(format!("{name}.slope"))?) };

    let mut branches = Vec::with_capacity(cfg.branch_kernels.len());
    for &k in &cfg.branch_kernels {
        let name = format!("inception.k{k}");
        let y = conv(g, input, &name, 1, k / 2)?;
        branches.push(act(g, y, &name)?);
    }
    let cat = g.concat(&branches)?;
    let l0 = conv(g, cat, "merge", 1, 0)?;
    let l0 = act(g, l0, "merge")?;
    let l1 = conv(g, l0, "down1", 2, 1)?;
    let l1 = act(g, l1, "down1")?;
    let l2 = conv(g, l1, "down2", 2, 1)?;
    let l2 = act(g, l2, "down2")?;
    let l3 = conv(g, l2, "bottleneck", 1, 1)?;
    let l3 = g.add(l3, l2)?;
    let l3 = act(g, l3, "bottleneck")?;
    let u2 = g.conv3d_transpose(l3, get("up2.weight".into())?, get("up2.bias".into())?, 2, 0)?;
    let u2 = g.add(u2, l1)?;
    let u2 = act(g, u2, "up2")?;
    let u1 = g.conv3d_transpose(u2, get("up1.weight".into())?, get("up1.bias".into())?, 2, 0)?;
    let u1 = g.add(u1, l0)?;
    let u1 = act(g, u1, "up1")?;
    let output = conv(g, u1, "head", 1, cfg.head_kernel / 2)?;
    Ok(FaimVars {
        params: vars,
        input,
        output,
    })
}

/// Predicts `u` for an ordered `(source, target)` pair.
pub fn faim_forward<T: Real>(
    cfg: &FaimConfig,
    params: &ModelParams<T>,
    source: &Volume<T>,
    target: &Volume<T>,
) -> Result<DisplacementField<T>> {
    if source.dims() != target.dims() {
        return Err(Error::DimsMismatch(format!("source {} vs target {}", source.dims(), target.dims())));
    }
    check_faim_dims(source.dims())?;
    let mut g = Graph::new();
    let vars = faim_graph(&mut g, cfg, params, Tensor::stack(&[source, target])?, false)?;
    g.value(vars.output).to_field()
}

pub const DIRECT_FIELD: &str = "u";

/// A zero-initialized displacement field as the only parameter. The seed
/// is accepted for interface symmetry; initialization is deterministic.
pub fn direct_field_model<T: Real>(dims: Dims, _seed: u64) -> Result<ModelParams<T>> {
    if !dims.is_positive() {
        return Err(Error::invalid(format!("non-positive dims {dims}")));
    }
    Ok(ModelParams::new(vec![NamedTensor::new(
        DIRECT_FIELD,
        Tensor::zeros(&[3, dims.nz, dims.ny, dims.nx]),
    )]))
}

/// Parameter name of the direct field registered for `source -> target`.
pub fn direct_field_name(source: &str, target: &str) -> String {
    format!("u[{source}->{target}]")
}

/// A trained displacement predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum Model<T: Real = f32> {
    Faim { cfg: FaimConfig, params: ModelParams<T> },
    /// Per-pair fields named by [`direct_field_name`], or a single field
    /// named [`DIRECT_FIELD`] that applies to any pair.
    Direct { fields: ModelParams<T> },
    /// `u = 0` everywhere.
    Identity,
}

impl<T: Real> Model<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Faim { .. } => "faim",
            Model::Direct { .. } => "direct",
            Model::Identity => "identity",
        }
    }

    pub fn params(&self) -> Option<&ModelParams<T>> {
        match self {
            Model::Faim { params, .. } => Some(params),
            Model::Direct { fields } => Some(fields),
            Model::Identity => None,
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        match self {
            Model::Faim { cfg, params } => Model::Faim {
                cfg: cfg.clone(),
                params: params.cast(),
            },
            Model::Direct { fields } => Model::Direct { fields: fields.cast() },
            Model::Identity => Model::Identity,
        }
    }

    /// Field for the pair; `ids` name the volumes for direct-model lookup.
    pub fn predict(
        &self,
        ids: Option<(&str, &str)>,
        source: &Volume<T>,
        target: &Volume<T>,
    ) -> Result<DisplacementField<T>> {
        if source.dims() != target.dims() {
            return Err(Error::DimsMismatch(format!("source {} vs target {}", source.dims(), target.dims())));
        }
        match self {
            Model::Faim { cfg, params } => faim_forward(cfg, params, source, target),
            Model::Identity => Ok(DisplacementField::zeros(source.dims())),
            Model::Direct { fields } => {
                let named = ids.and_then(|(s, t)| fields.get(&direct_field_name(s, t)));
                let tensor = match (named, fields.len()) {
                    (Some(t), _) => t,
                    (None, 1) => &fields.iter().next().unwrap().tensor,
                    (None, _) => {
                        let (s, t) = ids.unwrap_or(("?", "?"));
                        return Err(Error::invalid(format!("direct model has no field for pair {s} -> {t}")));
                    }
                };
                let u = tensor.to_field()?;
                if u.dims() != source.dims() {
                    return Err(Error::DimsMismatch(format!(
                        "direct field {} vs volumes {}",
                        u.dims(),
                        source.dims()
                    )));
                }
                Ok(u)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;
    use crate::volume::VolumeKind;

    /// Closed-form count, written out layer by layer from the architecture table.
    fn hand_count(cfg: &FaimConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k * k + cout;
        let b = cfg.branch_channels;
        let branches: usize = cfg.branch_kernels.iter().map(|&k| conv(2, b, k) + b).sum();
        let cat = b * cfg.branch_kernels.len();
        branches
            + conv(cat, cfg.c0, 1) + cfg.c0
            + conv(cfg.c0, cfg.c1, 3) + cfg.c1
            + conv(cfg.c1, cfg.c2, 3) + cfg.c2
            + conv(cfg.c2, cfg.c2, 3) + cfg.c2
            + conv(cfg.c2, cfg.c1, 2) + cfg.c1
            + conv(cfg.c1, cfg.c0, 2) + cfg.c0
            + conv(cfg.c0, 3, cfg.head_kernel)
    }

    fn smooth(d: Dims, phase: f32) -> Volume<f32> {
        Volume::from_fn(d, VolumeKind::Intensity, |x, y, z| {
            0.5 + 0.25 * ((x as f32 * 0.7 + phase).sin() + (y as f32 * 0.5).cos() * (z as f32 * 0.3 + phase).sin())
        })
        .unwrap()
    }

    #[test]
    fn default_param_count_matches_hand_count() {
        let cfg = FaimConfig::default();
        let p = build_faim::<f32>(&cfg, 0).unwrap();
        assert_eq!(param_count(&p), hand_count(&cfg));
        assert_eq!(param_count(&p), 91_379);
        // same order of magnitude as the reference network
        let ratio = param_count(&p) as f64 / REFERENCE_PARAM_COUNT as f64;
        assert!(ratio > 0.1 && ratio < 10.0);
    }

    #[test]
    fn single_conv_count() {
        let mut p = ModelParams::<f32>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        push_conv(&mut p, &mut rng, "c", 2, 3, 3, false, false, 1.0);
        assert_eq!(param_count(&p), 165);
        assert_eq!(param_count(&direct_field_model::<f32>(Dims::cube(16), 0).unwrap()), 12_288);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = FaimConfig::default();
        assert_eq!(build_faim::<f32>(&cfg, 42).unwrap(), build_faim::<f32>(&cfg, 42).unwrap());
        assert_ne!(build_faim::<f32>(&cfg, 42).unwrap(), build_faim::<f32>(&cfg, 43).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let even = FaimConfig { head_kernel: 4, ..FaimConfig::default() };
        assert!(build_faim::<f32>(&even, 0).is_err());
        let zero = FaimConfig { c1: 0, ..FaimConfig::default() };
        assert!(zero.validate().is_err());
        let none = FaimConfig { branch_kernels: vec![], ..FaimConfig::default() };
        assert!(none.validate().is_err());
    }

    #[test]
    fn graph_topology() {
        let cfg = FaimConfig::default();
        let p = build_faim::<f32>(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let vars = faim_graph(&mut g, &cfg, &p, Tensor::zeros(&[2, 8, 8, 8]), false).unwrap();
        let counts = g.op_counts();
        assert_eq!(counts[&OpKind::Add], 3);
        assert_eq!(counts[&OpKind::ConvTranspose3d], 2);
        assert_eq!(counts[&OpKind::Concat], 1);
        assert_eq!(g.op_kind(vars.output), OpKind::Conv3d);
        assert_eq!(g.value(vars.output).shape(), &[3, 8, 8, 8]);
        // every conv except the head is followed by PReLU
        assert_eq!(counts[&OpKind::Prelu], counts[&OpKind::Conv3d] + counts[&OpKind::ConvTranspose3d] - 1);
    }

    #[test]
    fn forward_shape_and_initial_magnitude() {
        let cfg = FaimConfig::default();
        let p = build_faim::<f32>(&cfg, 3).unwrap();
        let d = Dims::new(16, 12, 8);
        let (s, t) = (smooth(d, 0.0), smooth(d, 1.0));
        let u = faim_forward(&cfg, &p, &s, &t).unwrap();
        assert_eq!(u.dims(), d);
        assert!(u.max_abs() < 0.1, "{}", u.max_abs());
        let swapped = faim_forward(&cfg, &p, &t, &s).unwrap();
        assert_ne!(u, swapped);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let cfg = FaimConfig::default();
        let p = build_faim::<f32>(&cfg, 3).unwrap();
        let a = smooth(Dims::cube(10), 0.0);
        assert!(faim_forward(&cfg, &p, &a, &a).is_err());
        let b = smooth(Dims::cube(8), 0.0);
        let c = smooth(Dims::cube(12), 0.0);
        assert!(faim_forward(&cfg, &p, &b, &c).is_err());
    }

    #[test]
    fn param_count_is_resolution_independent() {
        let cfg = FaimConfig::default();
        let p = build_faim::<f32>(&cfg, 3).unwrap();
        for d in [Dims::cube(4), Dims::new(8, 12, 4)] {
            let mut g = Graph::new();
            faim_graph(&mut g, &cfg, &p, Tensor::zeros(&[2, d.nz, d.ny, d.nx]), false).unwrap();
        }
        assert_eq!(param_count(&p), hand_count(&cfg));
    }

    #[test]
    fn direct_model_predicts_its_field() {
        let d = Dims::cube(4);
        let m = Model::Direct { fields: direct_field_model::<f32>(d, 0).unwrap() };
        let v = smooth(d, 0.0);
        let u = m.predict(None, &v, &v).unwrap();
        assert!(u.data().iter().all(|&x| x == 0.0));
        let other = smooth(Dims::cube(8), 0.0);
        assert!(m.predict(None, &other, &other).is_err());
    }
}
