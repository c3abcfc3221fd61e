//! Run configuration: one TOML file drives every command.
//!
//! ```toml
//! [data]            # seed, samples, world (sensor, knobs, rig size, corruption)
//! [data.weather]    # relative weights of clean / night / fog / snow
//! [model]           # denoiser, cond (encoders, alignment, delta), schedule, init_seed
//! [train]           # steps, batch, warmup, log_every, seed, checkpoint_every, adam
//! [sample]          # seed, steps, count, batch
//! [metrics]         # bev_bins, bev_extent, extractor_seed, mmd_bandwidth, crossmodal
//! ```
//!
//! Missing sections fall back to [`RunConfig::default`].

use std::path::Path;

use anyhow::{bail, Context, Result};
use panogen_core::diffusion::{ConditioningConfig, DenoiserConfig, DiffusionSchedule, ModelSpec, TrainConfig};
use panogen_core::metrics::CrossModalConfig;
use panogen_core::nn::AdamConfig;
use panogen_core::synthworld::{Weather, WorldConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;

pub const DETERMINISTIC_ENV: &str = "VEILA_DETERMINISTIC";

/// `VEILA_DETERMINISTIC=1` selects 64-bit training and sampling.
pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub sample: SampleConfig,
    pub metrics: MetricsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Sample `i` uses scene seed `seed + i`.
    pub seed: u64,
    pub samples: usize,
    pub weather: WeatherMix,
    pub world: WorldConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 200,
            weather: WeatherMix::default(),
            world: WorldConfig::default(),
        }
    }
}

/// Unnormalized weather weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherMix {
    pub clean: f64,
    pub night: f64,
    pub fog: f64,
    pub snow: f64,
}

impl Default for WeatherMix {
    fn default() -> Self {
        Self {
            clean: 1.0,
            night: 0.0,
            fog: 0.0,
            snow: 0.0,
        }
    }
}

impl WeatherMix {
    pub fn weights(&self) -> [(Weather, f64); 4] {
        [
            (Weather::Clean, self.clean),
            (Weather::Night, self.night),
            (Weather::Fog, self.fog),
            (Weather::Snow, self.snow),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) || w.iter().map(|(_, p)| p).sum::<f64>() <= 0.0 {
            bail!("weather weights must be finite, non-negative and not all zero");
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Weather {
        let w = self.weights();
        let total: f64 = w.iter().map(|(_, p)| p).sum();
        let mut u = rng.gen::<f64>() * total;
        for (weather, p) in w {
            if u < p {
                return weather;
            }
            u -= p;
        }
        // rounding at the top end lands on the last nonzero weight
        w.iter().rev().find(|(_, p)| *p > 0.0).map_or(Weather::Clean, |(k, _)| *k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        Ok(DiffusionSchedule::linear(self.t_max, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub cond: ConditioningConfig,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig {
                base: 8,
                ..DenoiserConfig::default()
            },
            cond: ConditioningConfig::default(),
            schedule: ScheduleConfig::default(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub warmup: u64,
    pub log_every: u64,
    pub seed: u64,
    /// Numbered checkpoints every this many steps; `latest` is always kept.
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch: t.batch,
            warmup: t.warmup,
            log_every: t.log_every,
            seed: t.seed,
            checkpoint_every: 1000,
            adam: t.adam,
        }
    }
}

impl TrainSection {
    pub fn loop_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            adam: self.adam,
            warmup: self.warmup,
            log_every: self.log_every,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub seed: u64,
    /// Reverse steps after respacing.
    pub steps: usize,
    pub count: usize,
    /// Chains evaluated together; results do not depend on it.
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 100,
            count: 32,
            batch: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub bev_bins: usize,
    /// Half-width of the BEV grid in meters.
    pub bev_extent: f64,
    pub extractor_seed: u64,
    /// Fixed MMD kernel width; the median heuristic when absent.
    pub mmd_bandwidth: Option<f64>,
    pub crossmodal: CrossModalConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bev_bins: 100,
            bev_extent: 50.0,
            extractor_seed: 0,
            mmd_bandwidth: None,
            crossmodal: CrossModalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).context("parsing run config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        panogen_core::io::write_atomic(path, self.to_toml()?.as_bytes())?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the fields that determine generated data.
    pub fn data_hash(&self) -> String {
        sha256_hex(serde_json::to_string(&self.data).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        let seeds = [
            ("data.seed", self.data.seed),
            ("model.init_seed", self.model.init_seed),
            ("train.seed", self.train.seed),
            ("sample.seed", self.sample.seed),
            ("metrics.extractor_seed", self.metrics.extractor_seed),
        ];
        if let Some((name, _)) = seeds.iter().find(|(_, v)| *v > i64::MAX as u64) {
            bail!("{name} must not exceed {}", i64::MAX);
        }
        self.data.weather.validate()?;
        self.data.world.sensor.validate()?;
        self.model_spec()?.build()?;
        if self.train.batch == 0 || self.train.log_every == 0 || self.train.checkpoint_every == 0 {
            bail!("train.batch, train.log_every and train.checkpoint_every must be positive");
        }
        if self.sample.steps == 0 || self.sample.batch == 0 {
            bail!("sample.steps and sample.batch must be positive");
        }
        if self.metrics.bev_bins == 0 || !(self.metrics.bev_extent > 0.0) {
            bail!("metrics.bev_bins and metrics.bev_extent must be positive");
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            sensor: self.data.world.sensor,
            denoiser: self.model.denoiser,
            cond: self.model.cond,
            schedule: self.model.schedule.build()?,
            init_seed: self.model.init_seed,
        })
    }
}
