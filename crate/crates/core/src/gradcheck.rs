//! Central finite-difference checks of every differentiable operation,
//! run in `f64`.
//!
//! Each check compares an analytic gradient `g` with numerical estimates
//! `n` and reports the normwise relative error `max|g - n| / max|n|`.
//! Graph ops are reduced to a scalar by a random projection of their
//! output.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::jacobian::{det_map, r2_backward, r2_penalty};
use crate::loss::{global_cc, global_cc_backward, local_cc, local_cc_backward, objective, r1_backward, r1_smoothness, CcMode};
use crate::model::{build_faim, faim_graph, FaimConfig, ModelParams};
use crate::volume::{Dims, DisplacementField, Volume};
use crate::warp::{warp_backward, warp_image};

pub const STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Spatial extent of per-op inputs.
    pub size: usize,
    /// Spatial extent of the end-to-end network check.
    pub network_size: usize,
    pub op_tolerance: f64,
    pub end_to_end_tolerance: f64,
    /// Entries checked per network parameter tensor.
    pub samples_per_tensor: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            size: 5,
            network_size: 8,
            op_tolerance: OP_TOLERANCE,
            end_to_end_tolerance: END_TO_END_TOLERANCE,
            samples_per_tensor: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: String,
    /// Number of finite-difference evaluations compared.
    pub checked: usize,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// Running `max|g - n|` and `max|n|`.
#[derive(Default)]
struct ErrorAcc {
    diff: f64,
    scale: f64,
    count: usize,
}

impl ErrorAcc {
    fn push(&mut self, analytic: f64, numeric: f64) {
        self.diff = self.diff.max((analytic - numeric).abs());
        self.scale = self.scale.max(numeric.abs());
        self.count += 1;
    }

    fn result(&self, op: &str, tolerance: f64) -> CheckResult {
        let rel_error = if self.diff.is_nan() { f64::INFINITY } else { self.diff / self.scale.max(1e-12) };
        CheckResult {
            op: op.to_string(),
            checked: self.count,
            rel_error,
            tolerance,
        }
    }
}

fn central(x: &mut [f64], j: usize, f: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let orig = x[j];
    x[j] = orig + STEP;
    let plus = f(x)?;
    x[j] = orig - STEP;
    let minus = f(x)?;
    x[j] = orig;
    Ok((plus - minus) / (2.0 * STEP))
}

/// Checks every entry of a flat input.
fn check_all(
    x: &[f64],
    analytic: &[f64],
    acc: &mut ErrorAcc,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<()> {
    let mut x = x.to_vec();
    for (j, &a) in analytic.iter().enumerate() {
        acc.push(a, central(&mut x, j, &mut f)?);
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).expect("shape matches data")
}

/// Magnitudes in `[0.1, 1]` with random sign, away from the PReLU kink.
fn off_zero_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Checks `d/dinputs sum(r * build(inputs))` for a random projection `r`.
fn graph_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, rng: &mut ChaCha8Rng, tol: f64) -> Result<CheckResult> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        Ok((g, vars, y))
    };
    let (g, vars, y) = eval(&inputs)?;
    let r = random_tensor(rng, g.value(y).shape());
    let mut grads = g.backward_seeded(y, &r)?;
    let mut acc = ErrorAcc::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .take(*v)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let shape = inputs[i].shape().to_vec();
        check_all(inputs[i].data(), &analytic, &mut acc, |x| {
            let mut perturbed = inputs.clone();
            perturbed[i] = Tensor::new(shape.clone(), x.to_vec())?;
            let (g, _, y) = eval(&perturbed)?;
            Ok(dot(g.value(y).data(), r.data()))
        })?;
    }
    Ok(acc.result(name, tol))
}

fn random_volume(rng: &mut ChaCha8Rng, d: Dims) -> Result<Volume<f64>> {
    Volume::intensity(d, uniform(rng, d.len(), 0.0, 1.0))
}

/// Integer shift plus a fractional part in `[0.2, 0.8]`, so that no sample
/// point lies within the step of a cell face.
fn off_grid_field(rng: &mut ChaCha8Rng, d: Dims) -> Result<DisplacementField<f64>> {
    let data = (0..3 * d.len())
        .map(|_| rng.random_range(-1i32..=1) as f64 + rng.random_range(0.2..0.8))
        .collect();
    DisplacementField::new(d, data)
}

fn field_from(d: Dims, x: &[f64]) -> Result<DisplacementField<f64>> {
    DisplacementField::new(d, x.to_vec())
}

fn warp_check(rng: &mut ChaCha8Rng, d: Dims, tol: f64) -> Result<CheckResult> {
    let src = random_volume(rng, d)?;
    let u = off_grid_field(rng, d)?;
    let r = uniform(rng, d.len(), -1.0, 1.0);
    let analytic = warp_backward(&src, &u, &r)?;
    let mut acc = ErrorAcc::default();
    check_all(u.data(), analytic.data(), &mut acc, |x| {
        Ok(dot(warp_image(&src, &field_from(d, x)?)?.warped.data(), &r))
    })?;
    Ok(acc.result("warp (trilinear)", tol))
}

fn cc_check(rng: &mut ChaCha8Rng, d: Dims, mode: CcMode, tol: f64) -> Result<CheckResult> {
    let a = random_volume(rng, d)?;
    let b = random_volume(rng, d)?;
    let (name, analytic) = match mode {
        CcMode::Global => ("global cc", global_cc_backward(&a, &b, 1.0)?),
        CcMode::Local { window } => ("local cc", local_cc_backward(&a, &b, window, 1.0)?),
    };
    let mut acc = ErrorAcc::default();
    check_all(a.data(), &analytic, &mut acc, |x| {
        let a = Volume::intensity(d, x.to_vec())?;
        match mode {
            CcMode::Global => global_cc(&a, &b),
            CcMode::Local { window } => local_cc(&a, &b, window),
        }
    })?;
    Ok(acc.result(name, tol))
}

fn r1_check(rng: &mut ChaCha8Rng, d: Dims, tol: f64) -> Result<CheckResult> {
    let u = DisplacementField::new(d, uniform(rng, 3 * d.len(), -1.0, 1.0))?;
    let analytic = r1_backward(&u, 1.0)?;
    let mut acc = ErrorAcc::default();
    check_all(u.data(), analytic.data(), &mut acc, |x| r1_smoothness(&field_from(d, x)?))?;
    Ok(acc.result("r1 smoothness", tol))
}

/// A folding field whose determinants all stay clear of zero.
fn folding_field(rng: &mut ChaCha8Rng, d: Dims) -> Result<DisplacementField<f64>> {
    for _ in 0..1000 {
        let u = DisplacementField::new(d, uniform(rng, 3 * d.len(), -0.6, 0.6))?;
        let det = det_map(&u)?;
        let min_abs = det.values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if min_abs > 1e-3 && det.values.iter().any(|&v| v < 0.0) {
            return Ok(u);
        }
    }
    Err(Error::invalid("could not draw a folding field with determinants away from zero"))
}

fn r2_check(rng: &mut ChaCha8Rng, d: Dims, tol: f64) -> Result<CheckResult> {
    let u = folding_field(rng, d)?;
    let analytic = r2_backward(&u, 1.0)?;
    let mut acc = ErrorAcc::default();
    check_all(u.data(), analytic.data(), &mut acc, |x| Ok(r2_penalty(&det_map(&field_from(d, x)?)?)))?;
    Ok(acc.result("r2 through det", tol))
}

/// Full network plus warp and loss; parameters are sampled.
fn network_check(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let d = Dims::cube(cfg.network_size);
    let fcfg = FaimConfig::default();
    let params: ModelParams<f64> = build_faim(&fcfg, rng.random())?;
    let source = random_volume(rng, d)?;
    let target = random_volume(rng, d)?;
    // keeps sample points away from cell faces
    let offset: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let (alpha, beta, mode) = (1.0, 0.1, CcMode::Local { window: 3 });

    let loss_and_grads = |params: &ModelParams<f64>, want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars = faim_graph(&mut g, &fcfg, params, Tensor::stack(&[&source, &target])?, false)?;
        let out = g.value(vars.output).to_field()?;
        let n = d.len();
        let data = out
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + offset[i / n])
            .collect();
        let u = DisplacementField::new(d, data)?;
        let (loss, grad_u) = objective(&source, &target, &u, alpha, beta, mode)?;
        if !want_grads {
            return Ok((loss.total, vec![]));
        }
        let mut grads = g.backward_seeded(vars.output, &Tensor::from_field(&grad_u))?;
        let per = vars
            .params
            .iter()
            .zip(params.iter())
            .map(|(&v, p)| {
                grads
                    .take(v)
                    .map(|t| t.into_data())
                    .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
            })
            .collect();
        Ok((loss.total, per))
    };

    let (_, analytic) = loss_and_grads(&params, true)?;
    let mut acc = ErrorAcc::default();
    let mut work = params.clone();
    for (k, grad) in analytic.iter().enumerate() {
        let numel = grad.len();
        for _ in 0..cfg.samples_per_tensor.min(numel) {
            let j = rng.random_range(0..numel);
            let orig = work.iter().nth(k).unwrap().tensor.data()[j];
            let mut at = |v: f64| -> Result<f64> {
                work.iter_mut().nth(k).unwrap().tensor.data_mut()[j] = v;
                Ok(loss_and_grads(&work, false)?.0)
            };
            let numeric = (at(orig + STEP)? - at(orig - STEP)?) / (2.0 * STEP);
            work.iter_mut().nth(k).unwrap().tensor.data_mut()[j] = orig;
            acc.push(grad[j], numeric);
        }
    }
    // one random direction over all parameters at once
    let dirs: Vec<Vec<f64>> = analytic.iter().map(|g| uniform(rng, g.len(), -1.0, 1.0)).collect();
    let shifted = |s: f64| -> Result<f64> {
        let mut p = params.clone();
        for (t, dir) in p.iter_mut().zip(&dirs) {
            for (v, d) in t.tensor.data_mut().iter_mut().zip(dir) {
                *v += s * d;
            }
        }
        Ok(loss_and_grads(&p, false)?.0)
    };
    let numeric = (shifted(STEP)? - shifted(-STEP)?) / (2.0 * STEP);
    let analytic_dir: f64 = analytic.iter().zip(&dirs).map(|(g, d)| dot(g, d)).sum();
    let mut dir_acc = ErrorAcc::default();
    dir_acc.push(analytic_dir, numeric);
    let sampled = acc.result("network end-to-end", cfg.end_to_end_tolerance);
    let directional = dir_acc.result("network end-to-end", cfg.end_to_end_tolerance);
    Ok(CheckResult {
        checked: sampled.checked + 1,
        rel_error: sampled.rel_error.max(directional.rel_error),
        ..sampled
    })
}

/// Runs every check in a fixed order.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    if !(3..=8).contains(&cfg.size) {
        return Err(Error::invalid(format!("gradcheck size {} must be in 3..=8", cfg.size)));
    }
    if cfg.network_size == 0 || !cfg.network_size.is_multiple_of(4) {
        return Err(Error::invalid("network check size must be a positive multiple of 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.size;
    let tol = cfg.op_tolerance;
    let d = Dims::cube(s);
    let half = s.div_ceil(2);
    let mut out = Vec::new();

    let conv: &Build = &|g, v| g.conv3d(v[0], v[1], v[2], 1, 1);
    let inputs = vec![
        random_tensor(&mut rng, &[2, s, s, s]),
        random_tensor(&mut rng, &[3, 2, 3, 3, 3]),
        random_tensor(&mut rng, &[3]),
    ];
    out.push(graph_op("conv3d", inputs, conv, &mut rng, tol)?);

    let strided: &Build = &|g, v| g.conv3d(v[0], v[1], v[2], 2, 1);
    let inputs = vec![
        random_tensor(&mut rng, &[2, s, s, s]),
        random_tensor(&mut rng, &[2, 2, 3, 3, 3]),
        random_tensor(&mut rng, &[2]),
    ];
    out.push(graph_op("conv3d stride 2", inputs, strided, &mut rng, tol)?);

    let transposed: &Build = &|g, v| g.conv3d_transpose(v[0], v[1], v[2], 2, 0);
    let inputs = vec![
        random_tensor(&mut rng, &[3, half, half, half]),
        random_tensor(&mut rng, &[3, 2, 2, 2, 2]),
        random_tensor(&mut rng, &[2]),
    ];
    out.push(graph_op("conv3d transpose", inputs, transposed, &mut rng, tol)?);

    let prelu: &Build = &|g, v| g.prelu(v[0], v[1]);
    let inputs = vec![off_zero_tensor(&mut rng, &[2, s, s, s]), random_tensor(&mut rng, &[2])];
    out.push(graph_op("prelu", inputs, prelu, &mut rng, tol)?);

    let add: &Build = &|g, v| g.add(v[0], v[1]);
    let inputs = vec![random_tensor(&mut rng, &[2, s, s, s]), random_tensor(&mut rng, &[2, s, s, s])];
    out.push(graph_op("add", inputs, add, &mut rng, tol)?);

    let concat: &Build = &|g, v| g.concat(v);
    let inputs = vec![random_tensor(&mut rng, &[1, s, s, s]), random_tensor(&mut rng, &[2, s, s, s])];
    out.push(graph_op("concat", inputs, concat, &mut rng, tol)?);

    out.push(warp_check(&mut rng, d, tol)?);
    out.push(cc_check(&mut rng, d, CcMode::Global, tol)?);
    out.push(cc_check(&mut rng, d, CcMode::Local { window: 3 }, tol)?);
    out.push(r1_check(&mut rng, d, tol)?);
    out.push(r2_check(&mut rng, d, tol)?);
    out.push(network_check(&mut rng, cfg)?);
    Ok(out)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<20} {:>7} {:>12} {:>10}  status\n", "op", "checked", "rel_error", "tolerance");
    for r in results {
        writeln!(
            s,
            "{:<20} {:>7} {:>12.3e} {:>10.1e}  {}",
            r.op,
            r.checked,
            r.rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_at_default_tolerance() {
        let cfg = GradcheckConfig { size: 4, samples_per_tensor: 1, ..GradcheckConfig::default() };
        let results = run_all(&cfg).unwrap();
        assert_eq!(results.len(), 12);
        for r in &results {
            assert!(r.passed(), "{}", format_table(&results));
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn absurd_tolerance_fails() {
        let cfg = GradcheckConfig {
            size: 3,
            samples_per_tensor: 1,
            op_tolerance: 1e-12,
            end_to_end_tolerance: 1e-12,
            ..GradcheckConfig::default()
        };
        let results = run_all(&cfg).unwrap();
        assert!(results.iter().any(|r| !r.passed()));
    }

    #[test]
    fn error_accumulator() {
        let mut acc = ErrorAcc::default();
        acc.push(1.0, 1.0);
        acc.push(2.5, 2.0);
        let r = acc.result("x", 0.1);
        assert_eq!(r.rel_error, 0.25);
        assert!(!r.passed());
        assert_eq!(r.checked, 2);
    }
}
