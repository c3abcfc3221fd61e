//! Training checkpoints in the tensor container.
//!
//! Parameters are stored under `param/<name>`, Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`, the running-loss window under
//! `recent`. Everything else (configs, step counts, dataset hash) lives in
//! the JSON metadata.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::Container;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::rangeview::SensorSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::schedule::DiffusionSchedule;
use super::train::{TrainConfig, TrainState};
use super::unet::{ConditioningConfig, Denoiser, DenoiserConfig};

pub const KIND: &str = "panogen-checkpoint";

/// Everything needed to rebuild the network and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub sensor: SensorSpec,
    pub denoiser: DenoiserConfig,
    pub cond: ConditioningConfig,
    pub schedule: DiffusionSchedule,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<(Denoiser, DiffusionSchedule)> {
        Ok((
            Denoiser::new(self.denoiser, self.sensor, self.cond)?,
            self.schedule.rebuilt()?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub dataset_hash: String,
    pub state: TrainState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": KIND,
            "spec": self.spec,
            "train": self.train,
            "dataset_hash": self.dataset_hash,
            "step": self.state.step,
            "adam": self.state.adam.config,
            "adam_step": self.state.adam.step,
        }));
        for (k, t) in self.state.params.iter() {
            c.insert(format!("param/{k}"), t.clone());
        }
        for (k, t) in self.state.adam.m.iter() {
            c.insert(format!("adam.m/{k}"), t.clone());
        }
        for (k, t) in self.state.adam.v.iter() {
            c.insert(format!("adam.v/{k}"), t.clone());
        }
        let recent: Vec<f64> = self.state.recent.iter().copied().collect();
        c.insert("recent", Tensor::<f64>::from_vec(&[recent.len()], recent).expect("1-d"));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
            return Err(Error::Format("container is not a checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks '{k}'")));
        let mut spec: ModelSpec = serde_json::from_value(field("spec")?)?;
        spec.schedule = spec.schedule.rebuilt()?;
        let train: TrainConfig = serde_json::from_value(field("train")?)?;
        let dataset_hash: String = serde_json::from_value(field("dataset_hash")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let adam_config: AdamConfig = serde_json::from_value(field("adam")?)?;
        let adam_step: u64 = serde_json::from_value(field("adam_step")?)?;
        let group = |prefix: &str| -> Result<ParamStore<T>> {
            let mut s = ParamStore::new();
            for name in c.entries.keys() {
                if let Some(k) = name.strip_prefix(prefix) {
                    s.insert(k, c.get::<T>(name)?);
                }
            }
            Ok(s)
        };
        let params = group("param/")?;
        let (m, v) = (group("adam.m/")?, group("adam.v/")?);
        let (model, _) = spec.build()?;
        let expected = model.init_params::<T>(spec.init_seed);
        for (k, t) in expected.iter() {
            let got = params.get(k).map_err(|_| Error::Format(format!("checkpoint lacks parameter '{k}'")))?;
            if got.shape() != t.shape() {
                return Err(Error::Shape(format!("parameter '{k}': {:?} vs {:?}", got.shape(), t.shape())));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Format("checkpoint has parameters the model does not use".into()));
        }
        let recent: VecDeque<f64> = c.get::<f64>("recent")?.data().iter().copied().collect();
        Ok(Self {
            spec,
            train,
            dataset_hash,
            state: TrainState {
                step,
                params,
                adam: Adam {
                    config: adam_config,
                    step: adam_step,
                    m,
                    v,
                },
                recent,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
