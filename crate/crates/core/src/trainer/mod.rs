//! Ordered-pair training of the network or of per-pair direct fields.
//!
//! One pair per step. Each epoch visits every ordered pair once, in an order
//! shuffled by the run's generator. A step runs forward, warp, loss,
//! backward and one Adam update.

mod dataset;
mod synth;

pub use dataset::{load_dataset, make_pairs, save_dataset, Dataset, Subject, MANIFEST_NAME};
pub use synth::{synth_dataset, SynthConfig, MAX_ROW_GRADIENT, MAX_SHIFT};

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::kv::{parse_list, KeyValues};
use crate::loss::{objective, CcMode, LossBreakdown};
use crate::metrics::{evaluate, EvalConfig};
use crate::model::{
    build_faim, check_faim_dims, direct_field_name, faim_graph, Checkpoint, FaimConfig, Model, ModelParams,
    NamedTensor,
};
use crate::optim::{adam_step, clip_global_norm, AdamState, DEFAULT_LR};
use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Faim,
    Direct,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "faim" => Ok(ModelKind::Faim),
            "direct" => Ok(ModelKind::Direct),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Faim => "faim",
            ModelKind::Direct => "direct",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub lr: f64,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub cc: CcMode,
    pub seed: u64,
    /// Center-crop target; defaults to the largest multiple of 4.
    pub crop: Option<Dims>,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    pub faim: FaimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Faim,
            lr: DEFAULT_LR,
            epochs: 10,
            alpha: 1.0,
            beta: 0.0,
            cc: CcMode::default(),
            seed: 0,
            crop: None,
            clip: None,
            faim: FaimConfig::default(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "lr",
    "epochs",
    "alpha",
    "beta",
    "cc",
    "seed",
    "crop",
    "clip",
    "branch_kernels",
    "branch_channels",
    "c0",
    "c1",
    "c2",
    "head_kernel",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some(c) = self.clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid("clip norm must be positive"));
            }
        }
        if let Some(d) = self.crop {
            check_faim_dims(d)?;
        }
        self.faim.validate()
    }

    /// Overrides defaults with the keys in [`CONFIG_KEYS`]; unknown keys are
    /// rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(CONFIG_KEYS)?;
        let d = TrainConfig::default();
        let crop = match kv.get("crop") {
            None => None,
            Some(s) => {
                let v: Vec<usize> = parse_list(s, "crop")?;
                match v[..] {
                    [n] => Some(Dims::cube(n)),
                    [x, y, z] => Some(Dims::new(x, y, z)),
                    _ => return Err(Error::invalid(format!("crop needs 1 or 3 extents, got {s:?}"))),
                }
            }
        };
        let cfg = TrainConfig {
            model: kv.parse_or("model", d.model)?,
            lr: kv.parse_or("lr", d.lr)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            alpha: kv.parse_or("alpha", d.alpha)?,
            beta: kv.parse_or("beta", d.beta)?,
            cc: kv.parse_or("cc", d.cc)?,
            seed: kv.parse_or("seed", d.seed)?,
            crop,
            clip: kv.get("clip").map(|s| s.parse()).transpose().map_err(|_| Error::Parse {
                what: "key=value file",
                detail: "bad value for clip".into(),
            })?,
            faim: FaimConfig::from_kv(kv)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            alpha: self.alpha,
            beta: self.beta,
            cc: self.cc,
        }
    }
}

/// One training step's loss, evaluated before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub source: String,
    pub target: String,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,epoch,source,target,image,r1,r2,total";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.source, r.target, r.loss.image, r.loss.r1, r.loss.r2, r.loss.total
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

impl TrainOutput {
    /// Mean of `image` over the rows of one epoch.
    pub fn epoch_mean_image(&self, epoch: usize) -> Option<f64> {
        let rows: Vec<f64> = self
            .log
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss.image)
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// Training stopped at a non-finite loss or gradient; `last_good` holds
    /// the parameters before the failing step and the log up to it.
    #[error("training diverged at step {step}: {error}")]
    Diverged {
        step: usize,
        error: Error,
        last_good: Box<TrainOutput>,
    },
}

enum State {
    Faim {
        params: ModelParams,
        adam: AdamState,
    },
    /// One field and optimizer per pair, in pair order.
    Direct(Vec<(ModelParams, AdamState)>),
}

fn checkpoint(state: &State, cfg: &TrainConfig, pairs: &[(String, String)], dims: Dims) -> Checkpoint {
    match state {
        State::Faim { params, adam } => Checkpoint {
            model: Model::Faim {
                cfg: cfg.faim.clone(),
                params: params.clone(),
            },
            dims,
            optim: vec![adam.clone()],
        },
        State::Direct(fields) => {
            let mut all = ModelParams::default();
            for ((s, t), (p, _)) in pairs.iter().zip(fields) {
                let u = p.iter().next().expect("one field per pair").tensor.clone();
                all.push(NamedTensor::new(direct_field_name(s, t), u));
            }
            Checkpoint {
                model: Model::Direct { fields: all },
                dims,
                optim: fields.iter().map(|(_, a)| a.clone()).collect(),
            }
        }
    }
}

fn non_finite(what: &str) -> Error {
    Error::DivergedGradient(format!("non-finite {what}"))
}

/// Loss before the update and the parameter gradients for one pair.
fn faim_step(
    cfg: &TrainConfig,
    params: &ModelParams,
    source: &crate::Volume,
    target: &crate::Volume,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = faim_graph(&mut g, &cfg.faim, params, Tensor::stack(&[source, target])?, false)?;
    let out = g.value(vars.output);
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(non_finite("network output"));
    }
    let u = out.to_field()?;
    let (loss, grad_u) = objective(source, target, &u, cfg.alpha, cfg.beta, cfg.cc)?;
    if !loss.total.is_finite() {
        return Err(non_finite("loss"));
    }
    let mut grads = g.backward_seeded(vars.output, &Tensor::from_field(&grad_u))?;
    let grads = vars
        .params
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok((loss, grads))
}

fn direct_step(
    cfg: &TrainConfig,
    params: &ModelParams,
    source: &crate::Volume,
    target: &crate::Volume,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let u = params.iter().next().expect("one field").tensor.to_field()?;
    let (loss, grad_u) = objective(source, target, &u, cfg.alpha, cfg.beta, cfg.cc)?;
    if !loss.total.is_finite() {
        return Err(non_finite("loss"));
    }
    Ok((loss, vec![Tensor::from_field(&grad_u)]))
}

/// Trains on every ordered pair of `data` for `cfg.epochs` epochs.
/// The dataset is cropped, never modified in place.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> std::result::Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if data.subjects.len() < 2 {
        return Err(Error::invalid("training needs at least two volumes").into());
    }
    let dims = data.dims()?;
    let target_dims = cfg.crop.unwrap_or_else(|| dims.floor_to_multiple(4));
    check_faim_dims(target_dims)?;
    let data = data.center_crop(target_dims)?;
    let pairs = make_pairs(&data.ids())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = match cfg.model {
        ModelKind::Faim => {
            let params = build_faim(&cfg.faim, rng.random())?;
            let adam = AdamState::new(&params, cfg.lr);
            State::Faim { params, adam }
        }
        ModelKind::Direct => State::Direct(
            pairs
                .iter()
                .map(|_| {
                    let p = ModelParams::new(vec![NamedTensor::new(
                        crate::model::DIRECT_FIELD,
                        Tensor::zeros(&[3, target_dims.nz, target_dims.ny, target_dims.nx]),
                    )]);
                    let a = AdamState::new(&p, cfg.lr);
                    (p, a)
                })
                .collect(),
        ),
    };

    let mut log = Vec::with_capacity(cfg.epochs * pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            step += 1;
            let (s, t) = &pairs[k];
            let source = &data.get(s).expect("pair ids come from the dataset").image;
            let target = &data.get(t).expect("pair ids come from the dataset").image;
            let result = match &mut state {
                State::Faim { params, adam } => faim_step(cfg, params, source, target).and_then(|(loss, mut g)| {
                    if let Some(c) = cfg.clip {
                        clip_global_norm(&mut g, c);
                    }
                    adam_step(params, &g, adam).map(|_| loss)
                }),
                State::Direct(fields) => {
                    let (params, adam) = &mut fields[k];
                    direct_step(cfg, params, source, target).and_then(|(loss, mut g)| {
                        if let Some(c) = cfg.clip {
                            clip_global_norm(&mut g, c);
                        }
                        adam_step(params, &g, adam).map(|_| loss)
                    })
                }
            };
            match result {
                Ok(loss) => log.push(LogRow {
                    step,
                    epoch,
                    source: s.clone(),
                    target: t.clone(),
                    loss,
                }),
                Err(error @ Error::DivergedGradient(_)) => {
                    return Err(TrainError::Diverged {
                        step,
                        error,
                        last_good: Box::new(TrainOutput {
                            checkpoint: checkpoint(&state, cfg, &pairs, target_dims),
                            log,
                        }),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(TrainOutput {
        checkpoint: checkpoint(&state, cfg, &pairs, target_dims),
        log,
    })
}

/// Result of training and evaluating one regularization weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub mean_dice: f64,
    pub mean_fold: f64,
    /// Mean image loss of the first and last epochs.
    pub initial_image: f64,
    pub final_image: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// Mean Dice with `u = 0`.
    pub identity_dice: f64,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str = "beta,mean_dice,mean_n_fold,initial_image,final_image";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.beta, r.mean_dice, r.mean_fold, r.initial_image, r.final_image
            )
            .unwrap();
        }
        writeln!(s, "identity,{},0,,", self.identity_dice).unwrap();
        s
    }
}

/// Trains once per `beta` with otherwise identical settings and evaluates
/// each model on the training pairs.
pub fn sweep(cfg: &TrainConfig, data: &Dataset, betas: &[f64]) -> std::result::Result<SweepReport, TrainError> {
    if !data.is_labeled() {
        return Err(Error::NoLabels.into());
    }
    let mut rows = Vec::with_capacity(betas.len());
    let mut identity_dice = None;
    for &beta in betas {
        let run = TrainConfig { beta, ..cfg.clone() };
        let out = train(&run, data)?;
        let dims = out.checkpoint.dims;
        let cropped = data.center_crop(dims)?;
        let pairs = make_pairs(&cropped.ids())?;
        let report = evaluate(&out.checkpoint.model, &cropped, &pairs, &run.eval_config())?;
        if identity_dice.is_none() {
            identity_dice = Some(evaluate(&Model::Identity, &cropped, &pairs, &run.eval_config())?.mean_dice);
        }
        rows.push(SweepRow {
            beta,
            mean_dice: report.mean_dice,
            mean_fold: report.mean_fold,
            initial_image: out.epoch_mean_image(1).unwrap_or(f64::NAN),
            final_image: out.epoch_mean_image(run.epochs).unwrap_or(f64::NAN),
        });
    }
    Ok(SweepReport {
        identity_dice: identity_dice.unwrap_or(f64::NAN),
        rows,
    })
}
