//! Structured run configuration (TOML), with every training default
//! pre-filled: batch size 8, Adam at learning rate 1e-5, early-stopping
//! patience of 15 epochs on validation AU-PR, cold-posterior factor 1e-10,
//! two 24-frame time masks and two 16-bin frequency masks with 1e-6 jitter,
//! and 10 trials.

use serde::{Deserialize, Serialize};

use crate::audio::{FrontendConfig, GeneratorConfig, SpecAugmentConfig};
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::network::{ArchitectureConfig, BlockKind, PoolKind, StageSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub architecture: ArchSection,
    pub frontend: FrontendSection,
    pub augment: AugmentSection,
    pub training: TrainingSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            architecture: ArchSection::default(),
            frontend: FrontendSection::default(),
            augment: AugmentSection::default(),
            training: TrainingSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchSection {
    /// `canonical`, `miniature`, or `micro`; explicit `stages` override it.
    pub preset: String,
    /// `max` or `attentive`.
    pub pooling: String,
    pub tasks: usize,
    pub heads: Option<usize>,
    pub se_reduction: Option<usize>,
    pub rho_init: Option<f64>,
    pub input_shape: Option<[usize; 2]>,
    pub stages: Option<Vec<StageRow>>,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            preset: "canonical".into(),
            pooling: "max".into(),
            tasks: 1,
            heads: None,
            se_reduction: None,
            rho_init: None,
            input_shape: None,
            stages: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub kind: String,
    pub repeats: usize,
    pub channels: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendSection {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub frames: usize,
    pub clip_seconds: f64,
}

impl Default for FrontendSection {
    fn default() -> Self {
        let f = FrontendConfig::default();
        FrontendSection {
            sample_rate: f.sample_rate,
            n_fft: f.n_fft,
            hop: f.hop,
            n_mels: f.n_mels,
            fmin: f.fmin,
            fmax: f.fmax,
            log_floor: f.log_floor,
            frames: f.frames,
            clip_seconds: f.clip_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub enabled: bool,
    pub time_masks: usize,
    pub time_mask_width: usize,
    pub freq_masks: usize,
    pub freq_mask_width: usize,
    pub jitter_std: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = SpecAugmentConfig::default();
        AugmentSection {
            enabled: true,
            time_masks: a.time_masks,
            time_mask_width: a.time_mask_width,
            freq_masks: a.freq_masks,
            freq_mask_width: a.freq_mask_width,
            jitter_std: a.jitter_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Early-stopping patience in epochs on validation (weighted) AU-PR.
    pub patience: usize,
    pub max_epochs: usize,
    pub cold_posterior: f64,
    /// base | variational | smooth | ua-smooth | fixed:<a>
    pub loss_mode: String,
    pub logit_samples: usize,
    pub seed: u64,
    pub trials: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: 8,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: 15,
            max_epochs: 1000,
            cold_posterior: 1e-10,
            loss_mode: "ua-smooth".into(),
            logit_samples: 10,
            seed: 0,
            trials: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub tasks: usize,
    pub train_clips: usize,
    pub devel_clips: usize,
    pub test_clips: usize,
    pub positive_priors: Vec<f64>,
    pub snr: f64,
    pub frames: usize,
    pub mels: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let g = GeneratorConfig::miniature(0);
        SynthSection {
            tasks: g.tasks,
            train_clips: g.train_clips,
            devel_clips: g.devel_clips,
            test_clips: g.test_clips,
            positive_priors: g.positive_priors,
            snr: g.snr,
            frames: g.shape.0,
            mels: g.shape.1,
            seed: g.seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?.validate()?;
        self.frontend().validate()?;
        self.loss_mode()?;
        let t = &self.training;
        if t.batch_size == 0 || t.max_epochs == 0 || t.logit_samples == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, logit_samples must be positive".into(),
            ));
        }
        if t.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if t.cold_posterior < 0.0 {
            return Err(Error::Config("cold_posterior must be >= 0".into()));
        }
        Ok(())
    }

    pub fn pooling(&self) -> Result<PoolKind> {
        match self.architecture.pooling.as_str() {
            "max" => Ok(PoolKind::Max),
            "attentive" => Ok(PoolKind::Attentive),
            other => Err(Error::Config(format!(
                "unknown pooling '{other}' (max|attentive)"
            ))),
        }
    }

    pub fn loss_mode(&self) -> Result<LossMode> {
        LossMode::parse(&self.training.loss_mode)
    }

    /// Materialize the architecture from preset plus overrides. The `base`
    /// loss mode freezes every rho at zero (point-estimate training).
    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        let pooling = self.pooling()?;
        let a = &self.architecture;
        let mut cfg = match a.preset.as_str() {
            "canonical" => ArchitectureConfig::canonical(a.tasks, pooling),
            "miniature" => ArchitectureConfig::miniature(a.tasks, pooling),
            "micro" => ArchitectureConfig::micro(a.tasks, pooling),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
        if let Some(h) = a.heads {
            cfg.heads = h;
        }
        if let Some(r) = a.se_reduction {
            cfg.se_reduction = r;
        }
        if let Some(r) = a.rho_init {
            cfg.rho_init = r;
        }
        if let Some([fh, fw]) = a.input_shape {
            cfg.input_shape = (fh, fw);
        }
        if let Some(stages) = &a.stages {
            cfg.stages = stages
                .iter()
                .map(|s| {
                    let kind = match s.kind.as_str() {
                        "conv" => Ok(BlockKind::Conv),
                        "se" => Ok(BlockKind::Se),
                        other => Err(Error::Config(format!("unknown stage kind '{other}'"))),
                    }?;
                    Ok(StageSpec {
                        kind,
                        repeats: s.repeats,
                        channels: s.channels,
                        pool: s.pool,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        }
        if self.loss_mode()?.is_point_estimate() {
            cfg.frozen_rho = true;
        }
        Ok(cfg)
    }

    pub fn frontend(&self) -> FrontendConfig {
        let f = &self.frontend;
        FrontendConfig {
            sample_rate: f.sample_rate,
            n_fft: f.n_fft,
            hop: f.hop,
            n_mels: f.n_mels,
            fmin: f.fmin,
            fmax: f.fmax,
            log_floor: f.log_floor,
            frames: f.frames,
            clip_seconds: f.clip_seconds,
        }
    }

    pub fn spec_augment(&self) -> Option<SpecAugmentConfig> {
        if !self.augment.enabled {
            return None;
        }
        Some(SpecAugmentConfig {
            time_masks: self.augment.time_masks,
            time_mask_width: self.augment.time_mask_width,
            freq_masks: self.augment.freq_masks,
            freq_mask_width: self.augment.freq_mask_width,
            jitter_std: self.augment.jitter_std,
        })
    }

    pub fn generator(&self) -> GeneratorConfig {
        let s = &self.synth;
        GeneratorConfig {
            tasks: s.tasks,
            train_clips: s.train_clips,
            devel_clips: s.devel_clips,
            test_clips: s.test_clips,
            positive_priors: s.positive_priors.clone(),
            snr: s.snr,
            shape: (s.frames, s.mels),
            seed: s.seed,
        }
    }
}
