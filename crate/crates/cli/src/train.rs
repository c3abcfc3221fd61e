use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use panogen_core::diffusion::{train_step, Checkpoint, StepLog, TrainSet, TrainState};
use panogen_core::encoders::EncoderPair;
use panogen_core::Scalar;

use crate::config::{deterministic, RunConfig};
use crate::dataset::{Manifest, CONFIG_FILE};
use crate::plot;

pub const LOG_FILE: &str = "metrics.log";
pub const LATEST: &str = "latest.pgt";

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

pub fn latest_checkpoint(out: &Path) -> PathBuf {
    checkpoint_dir(out).join(LATEST)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub logs: Vec<StepLog>,
    /// Mean of the most recent step losses at the end of the run.
    pub running_loss: Option<f64>,
}

/// One `key=value` line per logged step.
pub fn log_line(log: &StepLog, running: Option<f64>, wall_s: f64) -> String {
    format!(
        "step={} loss={} running={} lr={} grad_norm={} wall_s={:.3}",
        log.step,
        log.loss,
        running.unwrap_or(f64::NAN),
        log.lr,
        log.grad_norm,
        wall_s
    )
}

/// `(step, loss)` pairs from a metrics log.
pub fn parse_log(text: &str) -> Vec<(u64, f64)> {
    text.lines()
        .filter_map(|l| {
            let mut step = None;
            let mut loss = None;
            for kv in l.split_whitespace() {
                match kv.split_once('=') {
                    Some(("step", v)) => step = v.parse().ok(),
                    Some(("loss", v)) => loss = v.parse().ok(),
                    _ => {}
                }
            }
            Some((step?, loss?))
        })
        .collect()
}

/// Trains (or resumes) on the dataset at `data` until `config.train.steps`.
pub fn train(config: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    if deterministic() {
        run::<f64>(config, data, out, resume)
    } else {
        run::<f32>(config, data, out, resume)
    }
}

fn run<T: Scalar>(config: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = Manifest::read(data)?;
    manifest.verify(data)?;
    if manifest.samples.is_empty() {
        bail!("dataset at {} has no samples", data.display());
    }
    let dataset_hash = manifest.dataset_hash();
    let spec = config.model_spec()?;
    if manifest.sensor != spec.sensor {
        bail!("dataset sensor differs from the configured sensor");
    }
    let loop_cfg = config.train.loop_config();
    let (model, schedule) = spec.build()?;

    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if ck.spec != spec {
                bail!("checkpoint model differs from the configured model");
            }
            if ck.dataset_hash != dataset_hash {
                bail!("checkpoint was trained on a different dataset");
            }
            ck.state
        }
        None => {
            if latest_checkpoint(out).exists() {
                bail!("{} already holds a run; pass --resume to continue it", out.display());
            }
            TrainState::<T>::fresh(&model, &loop_cfg, spec.init_seed)
        }
    };

    let encoders = EncoderPair::new(spec.cond.semantic, spec.cond.depth)?;
    let items = manifest
        .load_all(data)?
        .into_iter()
        .map(|s| {
            let views = s.camera_views();
            (s.range, views)
        })
        .collect::<Vec<_>>();
    let set = TrainSet::build(&model, &encoders, &items)?;

    fs::create_dir_all(checkpoint_dir(out))?;
    config.save(&out.join(CONFIG_FILE))?;
    fs::write(out.join("config.sha256"), config.hash())?;
    let mut log = OpenOptions::new().create(true).append(true).open(out.join(LOG_FILE))?;

    let save = |state: &TrainState<T>, name: &str| -> Result<PathBuf> {
        let path = checkpoint_dir(out).join(name);
        Checkpoint {
            spec: spec.clone(),
            train: loop_cfg,
            dataset_hash: dataset_hash.clone(),
            state: state.clone(),
        }
        .save(&path)?;
        Ok(path)
    };

    let start = Instant::now();
    let mut logs = Vec::new();
    while state.step < loop_cfg.steps {
        let entry = train_step(&model, &schedule, &set, &loop_cfg, &mut state)?;
        if entry.step % loop_cfg.log_every == 0 {
            writeln!(log, "{}", log_line(&entry, state.running_loss(), start.elapsed().as_secs_f64()))?;
        }
        if entry.step % config.train.checkpoint_every == 0 {
            save(&state, &format!("step-{:08}.pgt", entry.step))?;
            save(&state, LATEST)?;
        }
        logs.push(entry);
    }
    let checkpoint = save(&state, LATEST)?;
    let history = parse_log(&fs::read_to_string(out.join(LOG_FILE))?);
    if history.len() >= 2 {
        plot::loss_curve(&history, &out.join("loss.png"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        logs,
        running_loss: state.running_loss(),
    })
}
