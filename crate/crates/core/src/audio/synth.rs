//! Synthetic spectrogram corpus for desk-scale experiments.
//!
//! Each positive task imprints a task-specific time-frequency ridge over
//! structured noise; the ridge position jitters per clip while the template
//! (frequency band, shape) is fixed per task, so the problem is learnable
//! across partitions. Partitions use disjoint random streams and synthetic
//! recording ids, so nothing leaks between train, development, and test.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::metrics::{au_roc, ScoredSet};
use crate::tensor::Tensor;

/// One clip: features plus a per-task binary label vector (as 0/1 floats).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub labels: Vec<f64>,
}

/// Train/development/test partitions of synthetic clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub devel: Vec<Sample>,
    pub test: Vec<Sample>,
    pub tasks: usize,
    pub shape: (usize, usize),
}

impl Dataset {
    pub fn partition(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "devel" => Ok(&self.devel),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown partition '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub tasks: usize,
    /// Clip counts per partition.
    pub train_clips: usize,
    pub devel_clips: usize,
    pub test_clips: usize,
    /// Positive prior per task (rolled independently per clip and task).
    pub positive_priors: Vec<f64>,
    /// Ridge amplitude relative to the unit-variance background.
    pub snr: f64,
    /// Spectrogram shape (frames, mels).
    pub shape: (usize, usize),
    pub seed: u64,
}

impl GeneratorConfig {
    /// Single-task desk-scale default: miniature 32x16 clips.
    pub fn miniature(seed: u64) -> Self {
        GeneratorConfig {
            tasks: 1,
            train_clips: 330,
            devel_clips: 110,
            test_clips: 110,
            positive_priors: vec![0.5],
            snr: 3.0,
            shape: (32, 16),
            seed,
        }
    }

    /// Class priors mirroring the spider-monkey corpus partition sizes
    /// (314 positive / 4748 negative training clips and matching splits).
    pub fn osa_smw_like(seed: u64) -> Self {
        GeneratorConfig {
            tasks: 1,
            train_clips: 314 + 4748,
            devel_clips: 125 + 2488,
            test_clips: 152 + 1426,
            positive_priors: vec![314.0 / (314.0 + 4748.0)],
            snr: 3.0,
            shape: (32, 16),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.positive_priors.len() != self.tasks {
            return Err(Error::Config(format!(
                "need one positive prior per task ({} tasks, {} priors)",
                self.tasks,
                self.positive_priors.len()
            )));
        }
        if self.positive_priors.iter().all(|&p| p <= 0.0) {
            return Err(Error::Config(
                "degenerate priors: no task can be positive".into(),
            ));
        }
        if self
            .positive_priors
            .iter()
            .any(|&p| !(0.0..=1.0).contains(&p))
        {
            return Err(Error::Config("priors must lie in [0,1]".into()));
        }
        if self.shape.0 < 8 || self.shape.1 < 4 {
            return Err(Error::Config("synthetic shape too small".into()));
        }
        Ok(())
    }
}

/// Fixed per-task ridge template: a frequency band and a time extent.
struct Template {
    band_lo: usize,
    band_hi: usize,
    time_len: usize,
}

fn template(task: usize, shape: (usize, usize), seed: u64) -> Template {
    let (frames, mels) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0000 ^ (task as u64) << 32);
    let band_w = (mels / 4).max(2);
    let band_lo = rng.random_range(0..=mels - band_w);
    Template {
        band_lo,
        band_hi: band_lo + band_w,
        time_len: (frames / 3).max(4),
    }
}

fn gen_clip(
    templates: &[Template],
    cfg: &GeneratorConfig,
    labels: &[f64],
    rng: &mut ChaCha8Rng,
) -> Sample {
    let (frames, mels) = cfg.shape;
    let mut data = vec![0.0; frames * mels];
    // structured background: white noise plus a slow per-clip row envelope
    let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let rate: f64 = 0.5 + rng.random::<f64>();
    for t in 0..frames {
        let envelope =
            0.4 * (phase + rate * t as f64 * std::f64::consts::TAU / frames as f64).sin();
        for m in 0..mels {
            let z: f64 = rng.sample(StandardNormal);
            data[t * mels + m] = z + envelope;
        }
    }
    for (task, &y) in labels.iter().enumerate() {
        if y < 0.5 {
            continue;
        }
        let tp = &templates[task];
        let t0 = rng.random_range(0..=frames - tp.time_len);
        for (i, t) in (t0..t0 + tp.time_len).enumerate() {
            // Hann-shaped onset/offset in time
            let w = 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / tp.time_len as f64).cos());
            for m in tp.band_lo..tp.band_hi {
                data[t * mels + m] += cfg.snr * w;
            }
        }
    }
    Sample {
        features: Tensor::new(vec![frames, mels], data),
        labels: labels.to_vec(),
    }
}

fn gen_partition(
    cfg: &GeneratorConfig,
    templates: &[Template],
    name: &str,
    count: usize,
) -> Vec<Sample> {
    let part_tag: u64 = match name {
        "train" => 1,
        "devel" => 2,
        _ => 3,
    };
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (part_tag << 56) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let labels: Vec<f64> = cfg
                .positive_priors
                .iter()
                .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect();
            gen_clip(templates, cfg, &labels, &mut rng)
        })
        .collect()
}

/// Generate the partitioned synthetic dataset.
pub fn synthetic_corpus(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let templates: Vec<Template> = (0..cfg.tasks)
        .map(|t| template(t, cfg.shape, cfg.seed))
        .collect();
    Ok(Dataset {
        train: gen_partition(cfg, &templates, "train", cfg.train_clips),
        devel: gen_partition(cfg, &templates, "devel", cfg.devel_clips),
        test: gen_partition(cfg, &templates, "test", cfg.test_clips),
        tasks: cfg.tasks,
        shape: cfg.shape,
    })
}

/// Logistic regression on raw pixels: the learnability oracle. Returns the
/// test AU-ROC of the first task after full-batch gradient descent.
pub fn logistic_baseline_auroc(data: &Dataset, steps: usize, lr: f64) -> Result<f64> {
    let d = data.shape.0 * data.shape.1;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = data.train.len() as f64;
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for s in &data.train {
            let z: f64 = s
                .features
                .data()
                .iter()
                .zip(&w)
                .map(|(x, wi)| x * wi)
                .sum::<f64>()
                + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - s.labels[0];
            for (g, x) in gw.iter_mut().zip(s.features.data()) {
                *g += err * x;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / n;
        }
        b -= lr * gb / n;
    }
    let scores: Vec<f64> = data
        .test
        .iter()
        .map(|s| {
            let z: f64 = s
                .features
                .data()
                .iter()
                .zip(&w)
                .map(|(x, wi)| x * wi)
                .sum::<f64>()
                + b;
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let labels: Vec<bool> = data.test.iter().map(|s| s.labels[0] > 0.5).collect();
    au_roc(&ScoredSet::new(scores, labels, 0)?)
        .ok_or_else(|| Error::Config("test partition is single-class".into()))
}
