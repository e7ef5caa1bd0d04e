//! Run configuration, read from TOML. Unknown keys are rejected at every
//! level; omitted keys take the defaults listed in `docs/config.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::blocks::{DitConfig, StemConfig};
use crate::error::{Error, Result};
use crate::esgf::KneeConfig;
use crate::flowmatch::{Dataset, ToySr, TrainConfig, TwoGaussians};
use crate::snrmoe::{derive_partition, ExpertPartition, LogSnrSchedule, DEFAULT_ANCHOR_T, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    TwoGaussians {
        #[serde(default = "default_gauss_validation")]
        validation: usize,
    },
    ToySr {
        #[serde(default = "default_hr")]
        hr_size: usize,
        #[serde(default = "default_unshuffle")]
        unshuffle: usize,
        #[serde(default = "default_degrade")]
        degrade_factor: usize,
        #[serde(default = "default_noise")]
        noise_sigma: f64,
        #[serde(default = "default_sr_validation")]
        validation: usize,
    },
}

fn default_gauss_validation() -> usize {
    64
}
fn default_hr() -> usize {
    16
}
fn default_unshuffle() -> usize {
    4
}
fn default_degrade() -> usize {
    2
}
fn default_noise() -> f64 {
    0.02
}
fn default_sr_validation() -> usize {
    8
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::TwoGaussians { validation: default_gauss_validation() }
    }
}

impl DataConfig {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Dataset>> {
        Ok(match *self {
            DataConfig::TwoGaussians { validation } => Box::new(TwoGaussians::new(validation, seed)),
            DataConfig::ToySr { hr_size, unshuffle, degrade_factor, noise_sigma, validation } => {
                Box::new(ToySr::new(hr_size, unshuffle, degrade_factor, noise_sigma, validation, seed)?)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub depth: u32,
    pub anchor_t: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig { depth: 2, anchor_t: DEFAULT_ANCHOR_T, sigma_min: DEFAULT_SIGMA_MIN, sigma_max: DEFAULT_SIGMA_MAX }
    }
}

impl MoeConfig {
    pub fn partition(&self) -> Result<ExpertPartition> {
        derive_partition(&LogSnrSchedule::from_sigmas(self.sigma_min, self.sigma_max)?, self.anchor_t, self.depth)
    }
}

/// Stage-2 settings for the two-stage fine-tuning demo.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsgfConfig {
    pub stage2_iterations: u64,
    pub stage2_lr: f64,
}

impl Default for EsgfConfig {
    fn default() -> Self {
        EsgfConfig { stage2_iterations: 300, stage2_lr: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: DitConfig,
    pub moe: Option<MoeConfig>,
    pub train: TrainConfig,
    pub knee: KneeConfig,
    pub esgf: EsgfConfig,
    pub bench: BenchConfig,
}


impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    /// Sets the run seed and the per-module seeds derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
    }

    /// Model for the 16×16 super-resolution toy with a conditioning stem.
    pub fn toy_sr() -> Self {
        RunConfig {
            data: DataConfig::ToySr {
                hr_size: default_hr(),
                unshuffle: default_unshuffle(),
                degrade_factor: default_degrade(),
                noise_sigma: default_noise(),
                validation: default_sr_validation(),
            },
            model: DitConfig {
                latent_channels: 16,
                grid: (4, 4),
                model_dim: 32,
                num_heads: 2,
                mlp_ratio: 2,
                num_blocks: 2,
                time_freq_dim: 16,
                cond_dim: 0,
                stem: Some(StemConfig { in_channels: 1, channels: [8, 8, 8], strides: [2, 1, 1] }),
                num_experts: 1,
                epsilon: crate::attention::DEFAULT_EPSILON,
            },
            train: TrainConfig { iterations: 600, batch_size: 16, eval_interval: 25, ..TrainConfig::default() },
            ..RunConfig::default()
        }
    }

    pub fn partition(&self) -> Result<Option<ExpertPartition>> {
        self.moe.as_ref().map(MoeConfig::partition).transpose()
    }

    /// Cross-section checks beyond what each section validates alone.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = self.partition()? {
            if p.num_experts() != self.model.num_experts {
                return Err(Error::Config(format!(
                    "moe depth {} gives {} experts but model.num_experts is {}",
                    self.moe.expect("partition implies moe").depth,
                    p.num_experts(),
                    self.model.num_experts
                )));
            }
        } else if self.model.num_experts != 1 {
            return Err(Error::Config("model.num_experts > 1 needs a [moe] section".into()));
        }
        let data = self.data.build(self.seed)?;
        let [c, h, w] = data.latent_shape();
        if (c, (h, w)) != (self.model.latent_channels, self.model.grid) {
            return Err(Error::Config(format!(
                "data latents are {c}×{h}×{w} but the model expects {}×{}×{}",
                self.model.latent_channels, self.model.grid.0, self.model.grid.1
            )));
        }
        match (&self.data, self.model.lr_hw()) {
            (DataConfig::ToySr { hr_size, degrade_factor, .. }, Some(lr)) => {
                let want = hr_size / degrade_factor;
                if lr != (want, want) {
                    return Err(Error::Config(format!(
                        "stem expects {}×{} inputs but the degraded images are {want}×{want}",
                        lr.0, lr.1
                    )));
                }
                if self.model.stem.as_ref().is_some_and(|s| s.in_channels != 1) {
                    return Err(Error::Config("toy images have one channel; stem.in_channels must be 1".into()));
                }
            }
            (DataConfig::ToySr { .. }, None) => return Err(Error::Config("toy-sr data needs a [model.stem] section".into())),
            (DataConfig::TwoGaussians { .. }, Some(_)) => {
                return Err(Error::Config("two-gaussians data has no low-resolution input; remove [model.stem]".into()))
            }
            _ => {}
        }
        if self.model.cond_dim != 0 {
            return Err(Error::Config("built-in datasets provide no guidance vector; set model.cond_dim = 0".into()));
        }
        Ok(())
    }
}
