use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use faimreg::gradcheck::{format_table, run_all, GradcheckConfig};
use faimreg::jacobian::{det_map, folding_count};
use faimreg::kv::{parse_list, KeyValues};
use faimreg::loss::{objective_value, CcMode};
use faimreg::metrics::{evaluate, EvalConfig};
use faimreg::model::{describe_checkpoint, describe_faim, load_checkpoint, save_checkpoint, FaimConfig};
use faimreg::trainer::{
    load_dataset, log_csv, make_pairs, save_dataset, sweep, synth_dataset, train, Dataset, SynthConfig, TrainConfig,
    TrainError, TrainOutput,
};
use faimreg::volume::{load_field, load_volume, save_field, save_volume};
use faimreg::warp::warp_image;
use faimreg::Dims;

use crate::{
    Cli, Command, DescribeArgs, EvaluateArgs, GradcheckArgs, JmapArgs, RegisterArgs, SweepArgs, SynthArgs, TrainArgs,
    TrainFlags,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.fck";
pub const LOG_FILE: &str = "loss_log.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    kind: Kind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self.kind {
            Kind::Usage => 1,
            Kind::Runtime => 2,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError {
            kind: Kind::Runtime,
            error: e.into(),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        kind: Kind::Usage,
        error: e.into(),
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Register(a) => register(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Jmap(a) => jmap(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Describe(a) => describe(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn set_threads(n: usize) -> Result {
    if n == 0 {
        return Err(usage(anyhow!("--threads must be at least 1")));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

/// `N`, `NXxNYxNZ` or `NX,NY,NZ`.
fn parse_dims(s: &str) -> Result<Dims> {
    let parts: Vec<usize> = s
        .split(['x', ','])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(anyhow!("bad dims {s:?}")))?;
    match parts[..] {
        [n] => Ok(Dims::cube(n)),
        [x, y, z] => Ok(Dims::new(x, y, z)),
        _ => Err(usage(anyhow!("dims need 1 or 3 extents, got {s:?}"))),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result {
    let dims = parse_dims(&a.dims)?;
    if !dims.is_positive() || dims.as_array().iter().any(|n| n % 4 != 0) {
        return Err(usage(anyhow!("--dims {dims} must be positive multiples of 4")));
    }
    if a.n == 0 || a.labels == 0 {
        return Err(usage(anyhow!("--n and --labels must be at least 1")));
    }
    let cfg = SynthConfig {
        seed: a.seed,
        n: a.n,
        dims,
        labels: a.labels,
    };
    let ds = synth_dataset(&cfg)?;
    let manifest = save_dataset(&ds, &a.out)?;
    println!("wrote {} subjects at {dims} to {}", ds.subjects.len(), manifest.display());
    Ok(())
}

/// Config file entries overridden by explicit flags.
fn train_config(f: &TrainFlags) -> Result<TrainConfig> {
    let mut kv = match &f.config {
        Some(p) => KeyValues::load(p).map_err(usage)?,
        None => KeyValues::new(),
    };
    let flags: [(&str, Option<String>); 9] = [
        ("model", f.model.clone()),
        ("alpha", f.alpha.map(|v| v.to_string())),
        ("beta", f.beta.map(|v| v.to_string())),
        ("lr", f.lr.map(|v| v.to_string())),
        ("epochs", f.epochs.map(|v| v.to_string())),
        ("seed", f.seed.map(|v| v.to_string())),
        ("cc", f.cc.clone()),
        ("crop", f.crop.clone().map(|s| s.replace('x', ","))),
        ("clip", f.clip.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.insert(k, v);
        }
    }
    TrainConfig::from_kv(&kv).map_err(usage)
}

fn print_final(out: &TrainOutput) {
    if let Some(last) = out.log.last() {
        let l = &last.loss;
        println!(
            "final step {}: image={} r1={} r2={} total={} (alpha={}, beta={})",
            last.step, l.image, l.r1, l.r2, l.total, l.alpha, l.beta
        );
    }
}

fn write_run(dir: &Path, out: &TrainOutput) -> Result {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_checkpoint(&out.checkpoint, dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(LOG_FILE), log_csv(&out.log))
}

fn train_cmd(a: TrainArgs) -> Result {
    let cfg = train_config(&a.flags)?;
    let data = load_dataset(&a.data)?;
    match train(&cfg, &data) {
        Ok(out) => {
            write_run(&a.out, &out)?;
            print_final(&out);
            println!("checkpoint: {}", a.out.join(CHECKPOINT_FILE).display());
            Ok(())
        }
        Err(TrainError::Diverged { step, error, last_good }) => {
            write_run(&a.out, &last_good)?;
            Err(anyhow!(
                "training diverged at step {step}: {error}; last good checkpoint written to {}",
                a.out.join(CHECKPOINT_FILE).display()
            )
            .into())
        }
        Err(TrainError::Setup(e)) => Err(e.into()),
    }
}

fn register(a: RegisterArgs) -> Result {
    let ck = load_checkpoint(&a.checkpoint)?;
    let source = load_volume(&a.source)?.normalize_intensity()?;
    let target = load_volume(&a.target)?.normalize_intensity()?;
    for (name, v) in [("source", &source), ("target", &target)] {
        if v.dims() != ck.dims {
            return Err(anyhow!("{name} dims {} do not match the checkpoint's {}", v.dims(), ck.dims).into());
        }
    }
    let ids = a.source_id.as_deref().zip(a.target_id.as_deref());
    let u = ck.model.predict(ids, &source, &target)?;
    let warped = warp_image(&source, &u)?.warped;
    save_field(&u, &a.out_field)?;
    save_volume(&warped, &a.out_warped)?;
    let loss = objective_value(&source, &target, &u, 1.0, 0.0, CcMode::default())?;
    let n_fold = folding_count(&det_map(&u)?);
    println!("image={} n_fold={}", loss.image, n_fold);
    Ok(())
}

/// Crops a larger dataset down to the checkpoint's input dims.
fn fit_to(data: Dataset, dims: Dims) -> Result<Dataset> {
    let have = data.dims()?;
    if have == dims {
        return Ok(data);
    }
    if have.as_array().iter().zip(dims.as_array()).any(|(h, w)| *h < w) {
        return Err(anyhow!("dataset dims {have} are smaller than the checkpoint's {dims}").into());
    }
    Ok(data.center_crop(dims)?)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result {
    let cc: CcMode = a.cc.parse().map_err(usage)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = fit_to(load_dataset(&a.data)?, ck.dims)?;
    let pairs = make_pairs(&data.ids())?;
    let cfg = EvalConfig {
        alpha: a.alpha,
        beta: a.beta,
        cc,
    };
    let report = evaluate(&ck.model, &data, &pairs, &cfg)?;
    write_file(&a.report, report.to_csv())?;
    if let Some(p) = &a.per_label {
        write_file(p, report.per_label_csv())?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn jmap(a: JmapArgs) -> Result {
    let u = load_field(&a.field)?;
    let det = det_map(&u)?;
    save_volume(&det.to_volume(), &a.out_det)?;
    save_volume(&det.folding_mask(), &a.out_mask)?;
    println!("N={}", folding_count(&det));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result {
    let mut cfg = GradcheckConfig {
        seed: a.seed,
        size: a.size,
        samples_per_tensor: a.samples,
        ..GradcheckConfig::default()
    };
    if let Some(t) = a.tolerance {
        if t.is_nan() || t <= 0.0 {
            return Err(usage(anyhow!("--tolerance must be positive")));
        }
        cfg.op_tolerance = t;
        cfg.end_to_end_tolerance = t;
    }
    if !(3..=8).contains(&cfg.size) {
        return Err(usage(anyhow!("--size must be between 3 and 8")));
    }
    let results = run_all(&cfg)?;
    print!("{}", format_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    if !failed.is_empty() {
        return Err(anyhow!("gradient check failed for: {}", failed.join(", ")).into());
    }
    Ok(())
}

fn describe(a: DescribeArgs) -> Result {
    if let Some(p) = &a.checkpoint {
        print!("{}", describe_checkpoint(&load_checkpoint(p)?)?);
        return Ok(());
    }
    let cfg = match &a.config {
        Some(p) => FaimConfig::from_kv(&KeyValues::load(p).map_err(usage)?).map_err(usage)?,
        None => FaimConfig::default(),
    };
    let dims = parse_dims(&a.dims)?;
    print!("{}", describe_faim(&cfg, dims).map_err(usage)?);
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result {
    let cfg = train_config(&a.flags)?;
    let betas: Vec<f64> = parse_list(&a.betas, "betas").map_err(usage)?;
    if betas.iter().any(|b| b.is_nan() || *b < 0.0) {
        return Err(usage(anyhow!("betas must be non-negative")));
    }
    let data = load_dataset(&a.data)?;
    let report = sweep(&cfg, &data, &betas).map_err(|e| anyhow!(e))?;
    let csv = report.to_csv();
    write_file(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}
