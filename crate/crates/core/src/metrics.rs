//! Label overlap and folding statistics over registered pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::jacobian::{det_map, folding_count};
use crate::loss::{objective_value, CcMode, LossBreakdown};
use crate::model::Model;
use crate::par;
use crate::real::Real;
use crate::trainer::Dataset;
use crate::volume::Volume;
use crate::warp::warp_labels;

fn check_dims<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch(format!("{} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|X∩Y| / (|X|+|Y|)` for boolean masks; 1 when both are empty.
pub fn dice(x: &[bool], y: &[bool]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimsMismatch(format!("mask lengths {} vs {}", x.len(), y.len())));
    }
    let (mut inter, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (&a, &b) in x.iter().zip(y) {
        nx += a as usize;
        ny += b as usize;
        inter += (a && b) as usize;
    }
    if nx + ny == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (nx + ny) as f64)
}

fn label_of<T: Real>(v: T) -> i64 {
    v.to64().round() as i64
}

/// Dice per nonzero label present in either volume, and their unweighted
/// mean.
pub fn mean_dice<T: Real>(warped: &Volume<T>, target: &Volume<T>) -> Result<(f64, BTreeMap<i64, f64>)> {
    check_dims(warped, target)?;
    let a: Vec<i64> = warped.data().iter().map(|&v| label_of(v)).collect();
    let b: Vec<i64> = target.data().iter().map(|&v| label_of(v)).collect();
    let labels: BTreeSet<i64> = a.iter().chain(&b).copied().filter(|&l| l != 0).collect();
    if labels.is_empty() {
        return Err(Error::NoLabels);
    }
    // one pass: per label (|X|, |Y|, |X∩Y|)
    let mut counts: BTreeMap<i64, [usize; 3]> = labels.iter().map(|&l| (l, [0; 3])).collect();
    for (&x, &y) in a.iter().zip(&b) {
        if x != 0 {
            counts.get_mut(&x).unwrap()[0] += 1;
        }
        if y != 0 {
            counts.get_mut(&y).unwrap()[1] += 1;
        }
        if x != 0 && x == y {
            counts.get_mut(&x).unwrap()[2] += 1;
        }
    }
    let per: BTreeMap<i64, f64> = counts
        .into_iter()
        .map(|(l, [nx, ny, i])| (l, 2.0 * i as f64 / (nx + ny) as f64))
        .collect();
    let mean = per.values().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairReport {
    pub source: String,
    pub target: String,
    pub mean_dice: f64,
    pub per_label: BTreeMap<i64, f64>,
    /// Voxels with negative Jacobian determinant.
    pub n_fold: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairReport>,
    pub mean_dice: f64,
    /// Mean folding count over pairs.
    pub mean_fold: f64,
    pub mean_loss: LossBreakdown,
}

/// Loss weights used only for the loss columns of the report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub alpha: f64,
    pub beta: f64,
    pub cc: CcMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 1.0,
            beta: 0.0,
            cc: CcMode::default(),
        }
    }
}

fn eval_pair(model: &Model, data: &Dataset, s: &str, t: &str, cfg: &EvalConfig) -> Result<PairReport> {
    let missing = || Error::invalid(format!("pair {s} -> {t} names an unknown subject"));
    let src = data.get(s).ok_or_else(missing)?;
    let tgt = data.get(t).ok_or_else(missing)?;
    let (Some(src_lab), Some(tgt_lab)) = (&src.labels, &tgt.labels) else {
        return Err(Error::NoLabels);
    };
    let u = model.predict(Some((s, t)), &src.image, &tgt.image)?;
    let warped = warp_labels(src_lab, &u)?;
    let (mean_dice, per_label) = mean_dice(&warped, tgt_lab)?;
    let n_fold = folding_count(&det_map(&u)?);
    let loss = objective_value(&src.image, &tgt.image, &u, cfg.alpha, cfg.beta, cfg.cc)?;
    Ok(PairReport {
        source: s.to_string(),
        target: t.to_string(),
        mean_dice,
        per_label,
        n_fold,
        loss,
    })
}

/// Registers every pair with `model` and aggregates Dice and folding.
/// Rows follow `pairs` order.
pub fn evaluate(model: &Model, data: &Dataset, pairs: &[(String, String)], cfg: &EvalConfig) -> Result<EvalReport> {
    if !data.is_labeled() {
        return Err(Error::NoLabels);
    }
    data.dims()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let rows = par::map_range(pairs.len(), |i| eval_pair(model, data, &pairs[i].0, &pairs[i].1, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&PairReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_loss = LossBreakdown {
        image: mean(&|r| r.loss.image),
        r1: mean(&|r| r.loss.r1),
        r2: mean(&|r| r.loss.r2),
        total: mean(&|r| r.loss.total),
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    Ok(EvalReport {
        mean_dice: mean(&|r| r.mean_dice),
        mean_fold: mean(&|r| r.n_fold as f64),
        mean_loss,
        rows,
    })
}

pub const REPORT_HEADER: &str = "source,target,mean_dice,n_fold,image,r1,r2,total";

impl EvalReport {
    /// One row per pair followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.source, r.target, r.mean_dice, r.n_fold, r.loss.image, r.loss.r1, r.loss.r2, r.loss.total
            )
            .unwrap();
        }
        let m = &self.mean_loss;
        writeln!(
            s,
            "mean,,{},{},{},{},{},{}",
            self.mean_dice, self.mean_fold, m.image, m.r1, m.r2, m.total
        )
        .unwrap();
        s
    }

    /// `source,target,label,dice`, one row per pair and label.
    pub fn per_label_csv(&self) -> String {
        let mut s = String::from("source,target,label,dice\n");
        for r in &self.rows {
            for (l, d) in &r.per_label {
                writeln!(s, "{},{},{},{}", r.source, r.target, l, d).unwrap();
            }
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "pairs={} mean_dice={:.6} mean_n_fold={:.3}",
            self.rows.len(),
            self.mean_dice,
            self.mean_fold
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{make_pairs, synth_dataset, SynthConfig};
    use crate::volume::{Dims, VolumeKind};
    use proptest::prelude::*;

    fn labels(d: Dims, v: Vec<f32>) -> Volume {
        Volume::new(d, v, VolumeKind::Label).unwrap()
    }

    #[test]
    fn dice_cases() {
        let x = [true, true, false, false];
        assert_eq!(dice(&x, &x).unwrap(), 1.0);
        assert_eq!(dice(&x, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&x, &[false, true, true, false]).unwrap(), 0.5);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(dice(&[false; 4], &x).unwrap(), 0.0);
        assert!(dice(&x, &[true]).is_err());
    }

    #[test]
    fn mean_dice_cases() {
        let d = Dims::new(4, 1, 1);
        let a = labels(d, vec![1.0, 1.0, 2.0, 0.0]);
        assert_eq!(mean_dice(&a, &a).unwrap().0, 1.0);
        let b = labels(d, vec![1.0, 1.0, 0.0, 2.0]);
        let (m, per) = mean_dice(&a, &b).unwrap();
        assert_eq!(per[&1], 1.0);
        assert_eq!(per[&2], 0.0);
        assert_eq!(m, 0.5);
        let z = labels(d, vec![0.0; 4]);
        assert!(matches!(mean_dice(&z, &z), Err(Error::NoLabels)));
        assert!(mean_dice(&a, &labels(Dims::new(2, 2, 1), vec![0.0; 4])).is_err());
    }

    fn label_vec(n: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..4, n)
    }

    proptest! {
        #[test]
        fn mean_dice_matches_set_oracle(a in label_vec(27), b in label_vec(27)) {
            prop_assume!(a.iter().chain(&b).any(|&l| l != 0));
            let d = Dims::cube(3);
            let va = labels(d, a.iter().map(|&v| v as f32).collect());
            let vb = labels(d, b.iter().map(|&v| v as f32).collect());
            let (m, per) = mean_dice(&va, &vb).unwrap();
            let mut sum = 0.0;
            let mut count = 0;
            for l in 1u8..4 {
                let x: BTreeSet<usize> = (0..27).filter(|&i| a[i] == l).collect();
                let y: BTreeSet<usize> = (0..27).filter(|&i| b[i] == l).collect();
                if x.is_empty() && y.is_empty() {
                    prop_assert!(!per.contains_key(&(l as i64)));
                    continue;
                }
                let want = 2.0 * x.intersection(&y).count() as f64 / (x.len() + y.len()) as f64;
                prop_assert_eq!(per[&(l as i64)], want);
                sum += want;
                count += 1;
            }
            prop_assert!((m - sum / count as f64).abs() < 1e-15);
            let (m2, _) = mean_dice(&vb, &va).unwrap();
            prop_assert_eq!(m, m2);
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn identity_evaluation() {
        let ds = synth_dataset(&SynthConfig { seed: 2, n: 3, dims: Dims::cube(8), labels: 3 }).unwrap();
        let pairs = make_pairs(&ds.ids()).unwrap();
        let r = evaluate(&Model::Identity, &ds, &pairs, &EvalConfig::default()).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert!(r.rows.iter().all(|p| p.n_fold == 0));
        assert_eq!(r.mean_fold, 0.0);
        for p in &r.rows {
            let s = ds.get(&p.source).unwrap().labels.as_ref().unwrap();
            let t = ds.get(&p.target).unwrap().labels.as_ref().unwrap();
            assert_eq!(p.mean_dice, mean_dice(s, t).unwrap().0);
        }
        let want = r.rows.iter().map(|p| p.mean_dice).sum::<f64>() / 6.0;
        assert!((r.mean_dice - want).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.lines().last().unwrap().starts_with("mean,,"));
    }

    #[test]
    fn unlabeled_dataset_is_rejected() {
        let mut ds = synth_dataset(&SynthConfig { seed: 2, n: 2, dims: Dims::cube(8), labels: 2 }).unwrap();
        ds.subjects[0].labels = None;
        let pairs = make_pairs(&ds.ids()).unwrap();
        assert!(matches!(
            evaluate(&Model::Identity, &ds, &pairs, &EvalConfig::default()),
            Err(Error::NoLabels)
        ));
    }
}
