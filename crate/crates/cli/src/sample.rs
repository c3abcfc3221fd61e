use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use panogen_core::diffusion::{rig_of, sample, Checkpoint, CondBatch};
use panogen_core::encoders::EncoderPair;
use panogen_core::io::{kitti_bytes, parse_calib};
use panogen_core::rangeview::{unproject, CameraView, RgbImage};
use panogen_core::Scalar;

use crate::config::{deterministic, SampleConfig};
use crate::dataset::{range_container, LoadedView, Manifest, ManifestKind, SampleEntry, StagedDir, CONFIG_FILE};
use crate::hashing::sha256_file;

#[derive(Debug, Clone)]
pub enum ConditionSource {
    /// Views of a dataset; chain `i` uses sample `i mod len`.
    Dataset(PathBuf),
    /// One KITTI-style image and calibration file.
    Image { image: PathBuf, calib: PathBuf },
}

struct Condition {
    id: Option<String>,
    seed: u64,
    weather: String,
    views: Vec<LoadedView>,
}

fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("reading image {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage {
        height: h as usize,
        width: w as usize,
        data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    })
}

fn conditions(source: &ConditionSource) -> Result<(Vec<Condition>, Option<Manifest>)> {
    match source {
        ConditionSource::Dataset(dir) => {
            let m = Manifest::read(dir)?;
            m.verify(dir)?;
            if m.samples.is_empty() {
                bail!("condition dataset {} has no samples", dir.display());
            }
            let conds = m
                .load_all(dir)?
                .into_iter()
                .map(|s| Condition {
                    id: Some(s.entry.id),
                    seed: s.entry.seed,
                    weather: s.entry.weather,
                    views: s.views,
                })
                .collect();
            Ok((conds, Some(m)))
        }
        ConditionSource::Image { image, calib } => {
            let calib = parse_calib(&std::fs::read_to_string(calib).with_context(|| format!("reading {}", calib.display()))?)?;
            let view = CameraView::new("view0", load_png(image)?, calib)?;
            Ok((
                vec![Condition {
                    id: None,
                    seed: 0,
                    weather: "unknown".into(),
                    views: vec![LoadedView {
                        view,
                        sem: None,
                        depth: None,
                    }],
                }],
                None,
            ))
        }
    }
}

/// Draws `settings.count` range images from the checkpoint and writes a
/// generated manifest to `out`.
pub fn sample_cmd(checkpoint: &Path, source: &ConditionSource, settings: &SampleConfig, out: &Path) -> Result<Manifest> {
    if deterministic() {
        run::<f64>(checkpoint, source, settings, out)
    } else {
        run::<f32>(checkpoint, source, settings, out)
    }
}

fn run<T: Scalar>(checkpoint: &Path, source: &ConditionSource, settings: &SampleConfig, out: &Path) -> Result<Manifest> {
    if settings.steps == 0 || settings.batch == 0 {
        bail!("sample steps and batch must be positive");
    }
    let ck = Checkpoint::<T>::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (model, schedule) = ck.spec.build()?;
    let (conds, cond_manifest) = conditions(source)?;
    if let Some(m) = &cond_manifest {
        if m.sensor != ck.spec.sensor {
            bail!("checkpoint sensor differs from the condition dataset's sensor");
        }
    }
    let conditional = model.config.uses_gcma();
    let encoders = EncoderPair::new(ck.spec.cond.semantic, ck.spec.cond.depth)?;
    let encoded = if conditional {
        conds
            .iter()
            .map(|c| c.views.iter().map(|v| encoders.encode(&v.view)).collect::<panogen_core::Result<Vec<_>>>())
            .collect::<panogen_core::Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let plans = if conditional {
        let rig = rig_of(&conds[0].views.iter().map(|v| v.view.clone()).collect::<Vec<_>>());
        Some(model.plans(&rig)?)
    } else {
        None
    };

    let mut stage = StagedDir::create(out)?;
    let resolved = toml::to_string(settings)?;
    stage.add(CONFIG_FILE, resolved.as_bytes())?;
    let n = settings.count;
    let mut samples = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let end = (start + settings.batch).min(n);
        let which: Vec<usize> = (start..end).map(|i| i % conds.len()).collect();
        let batch = if conditional {
            let items: Vec<Vec<_>> = which.iter().map(|&c| encoded[c].iter().map(|(s, d)| (s, d)).collect()).collect();
            Some(CondBatch::<T>::stack(&items)?)
        } else {
            None
        };
        let cond = batch.as_ref().zip(plans.as_ref());
        let ranges = sample(&model, &ck.state.params, &schedule, cond, settings.seed, start as u64..end as u64, settings.steps)?;
        for ((i, range), &c) in (start..end).zip(ranges).zip(&which) {
            let cond = &conds[c];
            let id = format!("{i:06}");
            let prefix = format!("samples/{id}");
            let cloud = format!("{prefix}/cloud.bin");
            let range_file = format!("{prefix}/range.pgt");
            stage.add(&cloud, &kitti_bytes(&unproject(&range)))?;
            stage.add_container(&range_file, &range_container(&range, None)?)?;
            let views = cond
                .views
                .iter()
                .enumerate()
                .map(|(k, v)| stage.add_view(&prefix, k, &v.view, v.sem.as_deref(), v.depth.as_deref()))
                .collect::<Result<Vec<_>>>()?;
            samples.push(SampleEntry {
                id,
                seed: cond.seed,
                weather: cond.weather.clone(),
                cloud,
                range: range_file,
                views,
                condition: cond.id.clone(),
            });
        }
        start = end;
    }
    let mut provenance = std::collections::BTreeMap::new();
    provenance.insert("checkpoint_sha256".to_string(), sha256_file(checkpoint)?);
    provenance.insert("checkpoint_step".to_string(), ck.state.step.to_string());
    provenance.insert("seed".to_string(), settings.seed.to_string());
    provenance.insert("steps".to_string(), settings.steps.to_string());
    provenance.insert("precision".to_string(), format!("{:?}", T::DTYPE).to_lowercase());
    if let Some(m) = &cond_manifest {
        provenance.insert("condition_dataset".to_string(), m.dataset_hash());
    }
    stage.finish(Manifest {
        kind: ManifestKind::Generated,
        config_hash: spec_hash(&ck.spec)?,
        sensor: ck.spec.sensor,
        world: cond_manifest.and_then(|m| m.world),
        samples,
        files: Default::default(),
        provenance,
    })
}

fn spec_hash(spec: &panogen_core::diffusion::ModelSpec) -> Result<String> {
    Ok(crate::hashing::sha256_hex(serde_json::to_string(spec)?.as_bytes()))
}
