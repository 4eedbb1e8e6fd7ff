//! Seeded synthetic phantoms.
//!
//! A base phantom is partitioned into labels by the argmax of random
//! low-frequency sinusoid fields inside an ellipsoid. Each subject is the
//! base warped by its own smooth field: a translation plus sinusoids whose
//! amplitudes are scaled so that every row of `Du` has absolute sum at most
//! [`MAX_ROW_GRADIENT`]. Then `I + Du` is strictly diagonally dominant with
//! a positive diagonal, so its determinant is positive at every voxel.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, Subject};
use crate::error::{Error, Result};
use crate::model::check_faim_dims;
use crate::volume::{Dims, DisplacementField, Volume, VolumeKind};
use crate::warp::{warp_image, warp_labels};

pub const MAX_ROW_GRADIENT: f64 = 0.45;
/// Largest subject translation as a fraction of each extent.
pub const MAX_SHIFT: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub dims: Dims,
    pub labels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n: 4,
            dims: Dims::cube(16),
            labels: 4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    freq: [f64; 3],
    phase: f64,
    amp: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut freq = [0.0; 3];
        while freq == [0.0; 3] {
            freq = std::array::from_fn(|_| rng.random_range(0..=2) as f64);
        }
        Wave {
            freq,
            phase: rng.random_range(0.0..TAU),
            amp: rng.random_range(0.5..1.0),
        }
    }

    fn eval(&self, p: [f64; 3], d: Dims) -> f64 {
        let n = d.as_array();
        let arg: f64 = (0..3).map(|a| self.freq[a] * p[a] / n[a] as f64).sum();
        self.amp * (TAU * arg + self.phase).sin()
    }

    /// Upper bound on the absolute partial derivatives, summed over axes.
    fn gradient_bound(&self, d: Dims) -> f64 {
        let n = d.as_array();
        (0..3).map(|a| self.amp.abs() * TAU * self.freq[a] / n[a] as f64).sum()
    }
}

fn base_phantom(rng: &mut ChaCha8Rng, d: Dims, n_labels: usize) -> Result<(Volume, Volume)> {
    let waves: Vec<[Wave; 3]> = (0..n_labels)
        .map(|_| [Wave::random(rng), Wave::random(rng), Wave::random(rng)])
        .collect();
    let n = d.as_array().map(|v| v as f64);
    let center: [f64; 3] = std::array::from_fn(|a| (n[a] - 1.0) / 2.0 + rng.random_range(-0.5..0.5));
    let radii: [f64; 3] = std::array::from_fn(|a| n[a] * rng.random_range(0.30..0.36));
    let labels = Volume::from_fn(d, VolumeKind::Label, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
        if r2 > 1.0 {
            return 0.0;
        }
        let score = |w: &[Wave; 3]| w.iter().map(|w| w.eval(p, d)).sum::<f64>();
        let best = (0..n_labels)
            .max_by(|&a, &b| score(&waves[a]).total_cmp(&score(&waves[b])))
            .unwrap();
        (best + 1) as f32
    })?;

    let mut levels: Vec<f64> = (0..n_labels)
        .map(|l| 0.3 + 0.7 * (l + 1) as f64 / n_labels as f64)
        .collect();
    levels.shuffle(rng);
    let texture = Wave::random(rng);
    let raw = Volume::from_fn(d, VolumeKind::Intensity, |x, y, z| {
        let l = labels.get(x, y, z) as usize;
        if l == 0 {
            0.0
        } else {
            (levels[l - 1] + 0.05 * texture.eval([x as f64, y as f64, z as f64], d)) as f32
        }
    })?;
    let image = blur(&raw)?.normalize_intensity()?;
    Ok((image, labels))
}

/// Separable `[1/4, 1/2, 1/4]` smoothing with clamped edges.
fn blur(v: &Volume) -> Result<Volume> {
    let d = v.dims();
    let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let n = d.as_array()[axis];
        let stride = d.stride(axis);
        let prev = data.clone();
        for (i, out) in data.iter_mut().enumerate() {
            let c = d.coords(i)[axis];
            let lo = if c > 0 { i - stride } else { i };
            let hi = if c + 1 < n { i + stride } else { i };
            *out = 0.25 * prev[lo] + 0.5 * prev[i] + 0.25 * prev[hi];
        }
    }
    Volume::intensity(d, data.into_iter().map(|x| x as f32).collect())
}

fn subject_field(rng: &mut ChaCha8Rng, d: Dims) -> Result<DisplacementField> {
    let n = d.as_array();
    let mut comps = Vec::with_capacity(3);
    for &extent in &n {
        let shift = rng.random_range(-MAX_SHIFT..MAX_SHIFT) * extent as f64;
        let mut waves = [Wave::random(rng), Wave::random(rng), Wave::random(rng)];
        let bound: f64 = waves.iter().map(|w| w.gradient_bound(d)).sum();
        let scale = MAX_ROW_GRADIENT * rng.random_range(0.6..1.0) / bound;
        for w in &mut waves {
            w.amp *= scale;
        }
        comps.push((shift, waves));
    }
    DisplacementField::from_fn(d, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        std::array::from_fn(|c| {
            let (shift, waves) = &comps[c];
            (shift + waves.iter().map(|w| w.eval(p, d)).sum::<f64>()) as f32
        })
    })
}

/// Subjects `s00, s01, ...`, each with intensity, labels and ground-truth
/// field. Bit-identical for equal configs.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    check_faim_dims(cfg.dims)?;
    if cfg.n == 0 || cfg.labels == 0 {
        return Err(Error::invalid("need at least one subject and one label"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (base, base_labels) = base_phantom(&mut rng, cfg.dims, cfg.labels)?;
    let mut subjects = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let u = subject_field(&mut rng, cfg.dims)?;
        let image = warp_image(&base, &u)?.warped.normalize_intensity()?;
        let labels = warp_labels(&base_labels, &u)?;
        subjects.push(Subject {
            id: format!("s{i:02}"),
            image,
            labels: Some(labels),
            field: Some(u),
        });
    }
    Ok(Dataset { subjects })
}
