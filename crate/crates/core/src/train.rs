//! Optimization loop, early stopping, checkpointing, gradient checking, and
//! evaluation.
//!
//! One training step binds the parameters to a fresh tape, runs the whole
//! batch through the moment-propagating forward pass, assembles the
//! mode-specific targets, sums the per-task logit-sampled BCE terms (mean
//! over the batch), adds the cold-posterior KL, and backpropagates through
//! every closed-form moment operation. Smoothing probabilities are computed
//! from the current forward pass's logit moments and enter only as target
//! constants; no gradient flows through them.
//!
//! Training is single-threaded and fully seeded, so a fixed seed reproduces
//! the loss trace and checkpoint bit-for-bit.

use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{spec_augment, Dataset, Sample, SpecAugmentConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gaussian::GaussVar;
use crate::graph::{Tape, Var};
use crate::losses::{
    batch_mean_alpha, elbo_loss, logit_noise, sampled_bce_var, smooth_labels, smoothing_alpha,
    LossBreakdown, LossMode,
};
use crate::metrics::{eval_report, EvalReport, ScoredSet};
use crate::network::SeResNet;
use crate::tensor::Tensor;

/// Distilled training options (see [`RunConfig`] for the file format).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub cold_posterior: f64,
    pub mode: LossMode,
    pub logit_samples: usize,
    pub seed: u64,
    pub augment: Option<SpecAugmentConfig>,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(TrainOptions {
            batch_size: cfg.training.batch_size,
            learning_rate: cfg.training.learning_rate,
            adam_beta1: cfg.training.adam_beta1,
            adam_beta2: cfg.training.adam_beta2,
            adam_eps: cfg.training.adam_eps,
            patience: cfg.training.patience,
            max_epochs: cfg.training.max_epochs,
            cold_posterior: cfg.training.cold_posterior,
            mode: cfg.loss_mode()?,
            logit_samples: cfg.training.logit_samples,
            seed: cfg.training.seed,
            augment: cfg.spec_augment(),
        })
    }
}

/// Adam with bias correction; state tensors align with the parameter walk.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
                .collect();
            self.v = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
                .collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Early stopping on a maximized validation metric.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    /// Observe this epoch's metric; returns true when the metric improved.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
    pub val_au_pr: f64,
    pub val_au_roc: Option<f64>,
}

/// Everything recorded during one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_au_pr: f64,
    /// Test metrics of the restored best checkpoint.
    pub test: EvalReport,
}

impl TrialRecord {
    /// Per-epoch CSV history.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,nll,kl,total,val_au_pr,val_au_roc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{}\n",
                e.epoch,
                e.nll,
                e.kl,
                e.total,
                e.val_au_pr,
                e.val_au_roc
                    .map(|v| format!("{v:.9}"))
                    .unwrap_or_else(|| "missing".into()),
            ));
        }
        out
    }
}

/// The per-batch loss graph. Returns the scalar loss variable and the
/// concrete breakdown.
fn batch_loss(
    net: &SeResNet,
    tape: &Tape,
    bound: &crate::network::BoundSeResNet,
    batch: &[(&Sample, Option<Tensor>)],
    mode: LossMode,
    cold: f64,
    noise: &[Vec<Vec<f64>>],
) -> Result<(Var, LossBreakdown)> {
    let tasks = net.config.tasks;
    // forward every batch element, collecting per-task logits
    let mut logits: Vec<Vec<GaussVar>> = Vec::with_capacity(batch.len());
    for (sample, augmented) in batch {
        let features = augmented.as_ref().unwrap_or(&sample.features);
        let out = net.forward(tape, bound, features)?;
        logits.push(out.logits);
    }
    // targets per mode; alphas are constants taken from the current moments
    let mut targets = vec![vec![0.0; tasks]; batch.len()];
    match mode {
        LossMode::Base | LossMode::Variational => {
            for (i, (sample, _)) in batch.iter().enumerate() {
                targets[i][..tasks].copy_from_slice(&sample.labels[..tasks]);
            }
        }
        LossMode::UaSmooth => {
            for (i, (sample, _)) in batch.iter().enumerate() {
                for t in 0..tasks {
                    let a = smoothing_alpha(logits[i][t].mean.item(), logits[i][t].var.item());
                    targets[i][t] = smooth_labels(sample.labels[t], a).y_smooth;
                }
            }
        }
        LossMode::Smooth => {
            for t in 0..tasks {
                let alphas: Vec<f64> = (0..batch.len())
                    .map(|i| smoothing_alpha(logits[i][t].mean.item(), logits[i][t].var.item()))
                    .collect();
                let a = batch_mean_alpha(&alphas)?;
                for (i, (sample, _)) in batch.iter().enumerate() {
                    targets[i][t] = smooth_labels(sample.labels[t], a).y_smooth;
                }
            }
        }
        LossMode::Fixed(a) => {
            for (i, (sample, _)) in batch.iter().enumerate() {
                for t in 0..tasks {
                    targets[i][t] = smooth_labels(sample.labels[t], a).y_smooth;
                }
            }
        }
    }
    // unweighted sum of per-task sampled-BCE terms, mean over the batch
    let mut nll: Option<Var> = None;
    for (i, per_task) in logits.iter().enumerate() {
        for (t, logit) in per_task.iter().enumerate() {
            let term = sampled_bce_var(logit, targets[i][t], &noise[i][t]);
            nll = Some(match nll {
                Some(acc) => acc.add(&term),
                None => term,
            });
        }
    }
    let nll = nll
        .ok_or_else(|| Error::Config("empty batch".into()))?
        .mul_scalar(1.0 / batch.len() as f64);

    let kl = if matches!(mode, LossMode::Base) {
        tape.scalar(0.0)
    } else {
        let priors = net.refresh_priors();
        net.kl_var(tape, bound, &priors)
    };
    let breakdown = elbo_loss(nll.item(), kl.item(), cold)?;
    let total = nll.add(&kl.mul_scalar(cold));
    Ok((total, breakdown))
}

fn draw_noise(
    batch_len: usize,
    tasks: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<f64>>> {
    (0..batch_len)
        .map(|_| (0..tasks).map(|_| logit_noise(k, rng)).collect())
        .collect()
}

/// One optimizer step over a batch; exposed for the gradient checker and the
/// loss-mode equivalence tests.
pub fn batch_step_loss(
    net: &SeResNet,
    batch: &[&Sample],
    mode: LossMode,
    cold: f64,
    logit_samples: usize,
    noise_seed: u64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = net.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = draw_noise(batch.len(), net.config.tasks, logit_samples, &mut rng);
    let items: Vec<(&Sample, Option<Tensor>)> = batch.iter().map(|s| (*s, None)).collect();
    let (total, breakdown) = batch_loss(net, &tape, &bound, &items, mode, cold, &noise)?;
    let grads = tape.backward(&total);
    let grad_tensors = bound.registry.iter().map(|v| grads.wrt(v)).collect();
    Ok((breakdown, grad_tensors))
}

/// Loss value only, for finite differences (no tape gradients recorded).
pub fn batch_loss_value(
    net: &SeResNet,
    batch: &[&Sample],
    mode: LossMode,
    cold: f64,
    logit_samples: usize,
    noise_seed: u64,
) -> Result<f64> {
    let tape = Tape::inference();
    let bound = net.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = draw_noise(batch.len(), net.config.tasks, logit_samples, &mut rng);
    let items: Vec<(&Sample, Option<Tensor>)> = batch.iter().map(|s| (*s, None)).collect();
    let (total, _) = batch_loss(net, &tape, &bound, &items, mode, cold, &noise)?;
    Ok(total.item())
}

/// Evaluate a partition: per-task probabilities are the sigmoid-moment means
/// of the logit Gaussians.
pub fn evaluate(net: &SeResNet, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluate on an empty partition".into()));
    }
    let tasks = net.config.tasks;
    let mut scores = vec![Vec::with_capacity(samples.len()); tasks];
    let mut labels = vec![Vec::with_capacity(samples.len()); tasks];
    for s in samples {
        let moments = net.logit_moments(&s.features)?;
        for t in 0..tasks {
            let (m, v) = moments[t];
            let (p, _) = crate::activations::sigmoid_moments_scalar(m, v);
            scores[t].push(p);
            labels[t].push(s.labels[t] > 0.5);
        }
    }
    let sets: Vec<ScoredSet> = scores
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(t, (s, l))| ScoredSet::new(s, l, t))
        .collect::<Result<Vec<_>>>()?;
    eval_report(&sets)
}

/// Train with early stopping; restores the best checkpoint into `net` and
/// reports test metrics from it.
pub fn train(net: &mut SeResNet, data: &Dataset, opts: &TrainOptions) -> Result<TrialRecord> {
    if data.train.is_empty() || data.devel.is_empty() || data.test.is_empty() {
        return Err(Error::Config(
            "train/devel/test partitions must be non-empty".into(),
        ));
    }
    let tasks = net.config.tasks;
    if data.tasks != tasks {
        return Err(Error::Config(format!(
            "dataset has {} tasks but the network has {tasks}",
            data.tasks
        )));
    }
    let mut adam = Adam::new(
        opts.learning_rate,
        opts.adam_beta1,
        opts.adam_beta2,
        opts.adam_eps,
    );
    let mut stopper = EarlyStopper::new(opts.patience.max(1));
    let mut best_params: Option<SeResNet> = None;
    let mut epochs = Vec::new();

    for epoch in 1..=opts.max_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(opts.seed ^ ((epoch as u64) << 24) ^ EPOCH_SEED_SALT);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut nll_sum = 0.0;
        let mut kl_last = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let tape = Tape::new();
            let bound = net.bind(&tape);
            let noise = draw_noise(chunk.len(), tasks, opts.logit_samples, &mut rng);
            let items: Vec<(&Sample, Option<Tensor>)> = chunk
                .iter()
                .map(|&i| {
                    let sample = &data.train[i];
                    let augmented = opts.augment.as_ref().map(|cfg| {
                        let seed = opts.seed
                            ^ (epoch as u64) << 40
                            ^ (i as u64).wrapping_mul(0x2545_F491_4F6C_DD1D);
                        spec_augment(&sample.features, cfg, seed)
                    });
                    (sample, augmented)
                })
                .collect();
            let (total, breakdown) = batch_loss(
                net,
                &tape,
                &bound,
                &items,
                opts.mode,
                opts.cold_posterior,
                &noise,
            )?;
            if !breakdown.total().is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}: nll={} kl={} (state dump: {} params, max |p| = {:.3e})",
                    breakdown.nll,
                    breakdown.kl,
                    bound.registry.len(),
                    max_param_abs(net),
                )));
            }
            let grads = tape.backward(&total);
            let grad_tensors: Vec<Tensor> = bound.registry.iter().map(|v| grads.wrt(v)).collect();
            let mut params = Vec::new();
            net.visit_mut(&mut params);
            adam.step(&mut params, &grad_tensors);
            nll_sum += breakdown.nll;
            kl_last = breakdown.kl;
            batches += 1.0;
        }

        let val = evaluate(net, &data.devel)?;
        let val_au_pr = val
            .weighted_au_pr
            .ok_or_else(|| Error::Numerical("validation AU-PR undefined (no positives)".into()))?;
        let nll = nll_sum / batches;
        epochs.push(EpochRecord {
            epoch,
            nll,
            kl: kl_last,
            total: nll + opts.cold_posterior * kl_last,
            val_au_pr,
            val_au_roc: val.weighted_au_roc,
        });
        if stopper.observe(epoch, val_au_pr) {
            best_params = Some(net.clone());
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }

    if let Some(best) = best_params {
        *net = best;
    }
    let test = evaluate(net, &data.test)?;
    Ok(TrialRecord {
        seed: opts.seed,
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_au_pr: stopper.best,
        test,
    })
}

fn max_param_abs(net: &SeResNet) -> f64 {
    let mut out = Vec::new();
    net.visit(&mut out);
    out.iter()
        .flat_map(|(_, t)| t.data().iter())
        .fold(0.0, |acc, &v| acc.max(v.abs()))
}

// Mixed into the per-epoch seed derivation so epoch streams are distinct.
const EPOCH_SEED_SALT: u64 = 0x5851_F42D_4C95_7F2D;

/// Gradient-check summary over every parameter of a network.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    /// Parameters compared at differentiable points.
    pub params: usize,
    pub within_1e3: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Parameters sitting on a selection or clamp boundary, where the loss
    /// is only subdifferentiable: the finite difference there is unstable
    /// across step sizes and does not estimate the one-sided gradient the
    /// reverse pass returns. They are excluded from the comparison.
    pub kinked: usize,
}

impl GradcheckReport {
    pub fn frac_within_1e3(&self) -> f64 {
        self.within_1e3 as f64 / self.params.max(1) as f64
    }
}

/// Central finite differences against the reverse-mode gradients on a batch.
///
/// Max co-pooling selections, deterministic-variance masks, and variance
/// clamps make the objective piecewise smooth. A disagreement is therefore
/// re-probed at halved steps: a stable finite difference that still differs
/// marks a genuine gradient error, an unstable one marks a boundary crossing
/// and is reported in [`GradcheckReport::kinked`].
pub fn gradcheck(
    net: &SeResNet,
    batch: &[&Sample],
    mode: LossMode,
    cold: f64,
    logit_samples: usize,
    h: f64,
    noise_seed: u64,
) -> Result<GradcheckReport> {
    let (_, analytic) = batch_step_loss(net, batch, mode, cold, logit_samples, noise_seed)?;
    let mut names = Vec::new();
    net.visit(&mut names);
    let names: Vec<String> = names.iter().map(|(n, _)| n.clone()).collect();

    let eval_at = |pi: usize, ei: usize, delta: f64| -> Result<f64> {
        let mut shifted = net.clone();
        {
            let mut v = Vec::new();
            shifted.visit_mut(&mut v);
            v[pi].1.data_mut()[ei] += delta;
        }
        batch_loss_value(&shifted, batch, mode, cold, logit_samples, noise_seed)
    };

    let mut params = 0usize;
    let mut within = 0usize;
    let mut kinked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (pi, name) in names.iter().enumerate() {
        let n_elems = analytic[pi].numel();
        for ei in 0..n_elems {
            let fd = (eval_at(pi, ei, h)? - eval_at(pi, ei, -h)?) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let scale = |x: f64, y: f64| x.abs().max(y.abs()).max(1e-6);
            let rel = (a - fd).abs() / scale(a, fd);
            if rel >= 1e-3 {
                let fd2 = (eval_at(pi, ei, h / 2.0)? - eval_at(pi, ei, -h / 2.0)?) / h;
                let fd4 = (eval_at(pi, ei, h / 4.0)? - eval_at(pi, ei, -h / 4.0)?) / (h / 2.0);
                let spread = (fd - fd2).abs().max(fd2 - fd4).abs() / scale(fd, fd2);
                if spread > 1e-3 {
                    kinked += 1;
                    continue;
                }
            }
            params += 1;
            if rel < 1e-3 {
                within += 1;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{ei}] (ad {a:.6e}, fd {fd:.6e})");
            }
        }
    }
    Ok(GradcheckReport {
        params,
        within_1e3: within,
        max_rel_err: max_rel,
        worst_param: worst,
        kinked,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"VPCK";
const CKPT_VERSION: u16 = 1;

/// A full training snapshot: architecture, every parameter tensor, optimizer
/// state, epoch, and the best validation metric. Round-trips bit-exactly.
pub struct Checkpoint {
    pub net: SeResNet,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub epoch: u64,
    pub best_val: f64,
}

impl Checkpoint {
    pub fn of(net: &SeResNet, adam: &Adam, epoch: u64, best_val: f64) -> Self {
        Checkpoint {
            net: net.clone(),
            adam_t: adam.t,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
            epoch,
            best_val,
        }
    }

    pub fn into_adam(&self, lr: f64, b1: f64, b2: f64, eps: f64) -> Adam {
        Adam {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            t: self.adam_t,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.net.config).expect("architecture serializes");
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        let mut params = Vec::new();
        self.net.visit(&mut params);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, tensor) in &params {
            write_named_tensor(&mut out, name, tensor);
        }
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        let have_state = u8::from(!self.adam_m.is_empty());
        out.push(have_state);
        if have_state == 1 {
            for t in self.adam_m.iter().chain(self.adam_v.iter()) {
                write_named_tensor(&mut out, "", t);
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_val.to_bits().to_le_bytes());
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let fail = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::Parse(format!("{}: truncated checkpoint", path.display())))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != CKPT_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(fail(&format!("unsupported checkpoint version {version}")));
        }
        let arch_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let arch: crate::network::ArchitectureConfig =
            serde_json::from_slice(take(&mut pos, arch_len)?)
                .map_err(|e| Error::Parse(format!("architecture decode: {e}")))?;
        let mut net = SeResNet::init(arch, 0)?;
        let n_params = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            loaded.push(read_named_tensor(&bytes, &mut pos, path)?);
        }
        {
            let mut slots = Vec::new();
            net.visit_mut(&mut slots);
            if slots.len() != loaded.len() {
                return Err(Error::Config(format!(
                    "checkpoint has {} params, architecture defines {}",
                    loaded.len(),
                    slots.len()
                )));
            }
            for ((name, slot), (lname, tensor)) in slots.into_iter().zip(loaded.into_iter()) {
                if name != lname || slot.shape() != tensor.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint param '{lname}' does not match architecture param '{name}'"
                    )));
                }
                *slot = tensor;
            }
        }
        let adam_t = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let have_state = take(&mut pos, 1)?[0];
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        if have_state == 1 {
            for _ in 0..n_params {
                adam_m.push(read_named_tensor(&bytes, &mut pos, path)?.1);
            }
            for _ in 0..n_params {
                adam_v.push(read_named_tensor(&bytes, &mut pos, path)?.1);
            }
        }
        let epoch = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let best_val = f64::from_bits(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        if pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Checkpoint {
            net,
            adam_t,
            adam_m,
            adam_v,
            epoch,
            best_val,
        })
    }
}

fn write_named_tensor(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

fn read_named_tensor(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<(String, Tensor)> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::Parse(format!("{}: truncated checkpoint", path.display())))?;
        *pos += n;
        Ok(s)
    };
    let name_len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
    let name = String::from_utf8(take(pos, name_len)?.to_vec())
        .map_err(|_| Error::Parse("bad utf8 in param name".into()))?;
    let rank = take(pos, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(u64::from_le_bytes(
            take(pos, 8)?.try_into().unwrap(),
        )));
    }
    Ok((name, Tensor::new(shape, data)))
}

/// Save per-trial outputs: checkpoint binary, metrics JSON, history CSV.
pub fn write_trial_outputs(
    dir: &Path,
    trial: usize,
    ckpt: &Checkpoint,
    record: &TrialRecord,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ckpt.save(&dir.join(format!("trial{trial}.ckpt")))?;
    let mut f = std::fs::File::create(dir.join(format!("trial{trial}_metrics.json")))?;
    f.write_all(serde_json::to_string_pretty(record).unwrap().as_bytes())?;
    let mut h = std::fs::File::create(dir.join(format!("trial{trial}_history.csv")))?;
    h.write_all(record.history_csv().as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::GeneratorConfig;
    use crate::network::{ArchitectureConfig, PoolKind};

    fn tiny_data(seed: u64) -> Dataset {
        let mut cfg = GeneratorConfig::miniature(seed);
        cfg.shape = (8, 4);
        cfg.train_clips = 24;
        cfg.devel_clips = 12;
        cfg.test_clips = 12;
        cfg.snr = 4.0;
        crate::audio::synthetic_corpus(&cfg).unwrap()
    }

    fn micro_opts(mode: LossMode, seed: u64) -> TrainOptions {
        TrainOptions {
            batch_size: 8,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 3,
            max_epochs: 4,
            cold_posterior: 1e-10,
            mode,
            logit_samples: 4,
            seed,
            augment: None,
        }
    }

    #[test]
    fn early_stopper_stops_at_best_plus_patience() {
        let mut s = EarlyStopper::new(15);
        // improves at epochs 1..=3, then plateaus
        for epoch in 1..=40 {
            let metric = if epoch <= 3 { epoch as f64 } else { 3.0 };
            s.observe(epoch, metric);
            if s.should_stop(epoch) {
                assert_eq!(epoch, 3 + 15);
                return;
            }
        }
        panic!("never stopped");
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut p = Tensor::from_slice(&[5.0, -3.0]);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = p.map(|x| 2.0 * x);
            let mut params = vec![("p".to_string(), &mut p)];
            adam.step(&mut params, &[g]);
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn loss_modes_collapse_in_deterministic_limit() {
        let mut arch = ArchitectureConfig::micro(2, PoolKind::Max);
        arch.frozen_rho = true;
        let net = SeResNet::init(arch, 3).unwrap();
        let data = {
            let mut cfg = GeneratorConfig::miniature(5);
            cfg.shape = (8, 4);
            cfg.tasks = 2;
            cfg.positive_priors = vec![0.5, 0.3];
            cfg.train_clips = 8;
            cfg.devel_clips = 4;
            cfg.test_clips = 4;
            crate::audio::synthetic_corpus(&cfg).unwrap()
        };
        let batch: Vec<&Sample> = data.train.iter().take(6).collect();
        let mut totals = Vec::new();
        for mode in [
            LossMode::Base,
            LossMode::Variational,
            LossMode::Smooth,
            LossMode::UaSmooth,
        ] {
            let (b, _) = batch_step_loss(&net, &batch, mode, 1e-10, 6, 11).unwrap();
            totals.push(b.total());
        }
        for t in &totals[1..] {
            assert!(
                (t - totals[0]).abs() < 1e-12,
                "modes diverge in deterministic limit: {totals:?}"
            );
        }
    }

    #[test]
    fn training_improves_separable_micro_problem() {
        let data = tiny_data(7);
        let arch = ArchitectureConfig::micro(1, PoolKind::Max);
        let mut net = SeResNet::init(arch, 1).unwrap();
        let record = train(&mut net, &data, &micro_opts(LossMode::Variational, 7)).unwrap();
        assert!(!record.epochs.is_empty());
        assert!(record.best_val_au_pr > 0.0);
        // history CSV has one row per epoch
        let csv = record.history_csv();
        assert_eq!(csv.lines().count(), record.epochs.len() + 1);
    }

    #[test]
    fn fixed_seed_reproduces_training_bitwise() {
        let data = tiny_data(9);
        for mode in [LossMode::UaSmooth, LossMode::Smooth] {
            let arch = ArchitectureConfig::micro(1, PoolKind::Attentive);
            let mut net1 = SeResNet::init(arch.clone(), 2).unwrap();
            let mut net2 = SeResNet::init(arch, 2).unwrap();
            let r1 = train(&mut net1, &data, &micro_opts(mode, 5)).unwrap();
            let r2 = train(&mut net2, &data, &micro_opts(mode, 5)).unwrap();
            assert_eq!(r1, r2);
            assert_eq!(net1, net2);
        }
    }

    #[test]
    fn nan_inputs_abort_with_numerical_error() {
        let mut data = tiny_data(3);
        data.train[0].features.data_mut()[0] = f64::NAN;
        let arch = ArchitectureConfig::micro(1, PoolKind::Max);
        let mut net = SeResNet::init(arch, 1).unwrap();
        let err = train(&mut net, &data, &micro_opts(LossMode::Variational, 1)).unwrap_err();
        assert_eq!(err.exit_code(), 3, "unexpected error: {err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact_and_evaluates_identically() {
        let data = tiny_data(13);
        let arch = ArchitectureConfig::micro(1, PoolKind::Attentive);
        let mut net = SeResNet::init(arch, 4).unwrap();
        let _ = train(&mut net, &data, &micro_opts(LossMode::UaSmooth, 3)).unwrap();
        let adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let ckpt = Checkpoint::of(&net, &adam, 4, 0.75);
        let dir = std::env::temp_dir().join("varprop_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.net, net);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.best_val.to_bits(), 0.75f64.to_bits());
        // bytes identical across two saves
        let path2 = dir.join("net2.ckpt");
        Checkpoint::of(&back.net, &adam, 4, 0.75)
            .save(&path2)
            .unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        // evaluation of the restored net is identical
        let e1 = evaluate(&net, &data.test).unwrap();
        let e2 = evaluate(&back.net, &data.test).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn gradcheck_micro_network() {
        let data = tiny_data(21);
        let mut arch = ArchitectureConfig::micro(1, PoolKind::Attentive);
        arch.rho_init = 0.05;
        let net = SeResNet::init(arch, 8).unwrap();
        let batch: Vec<&Sample> = data.train.iter().take(3).collect();
        let report = gradcheck(&net, &batch, LossMode::Variational, 1e-4, 4, 1e-4, 17).unwrap();
        assert!(
            report.frac_within_1e3() >= 0.99,
            "only {} of {} within 1e-3 (worst {})",
            report.within_1e3,
            report.params,
            report.worst_param
        );
        assert!(
            report.max_rel_err < 1e-2,
            "max rel err {}",
            report.max_rel_err
        );
    }
}
