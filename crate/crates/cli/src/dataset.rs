//! On-disk dataset layout shared by `gen-data` (reference data) and
//! `sample` (generated data).
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/config.toml
//! <dir>/samples/<id>/cloud.bin          KITTI float32 records
//! <dir>/samples/<id>/range.pgt          depth, intensity [H, W], labels u8 if known
//! <dir>/samples/<id>/view<k>.pgt        image [H, W, 3], sem u8 / depth [H, W] if known
//! <dir>/samples/<id>/view<k>_calib.txt  P (12 floats) and Tr (16 floats)
//! ```
//!
//! The manifest lists every file with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use panogen_core::io::{format_calib, read_kitti_bin, write_atomic, Container};
use panogen_core::rangeview::{Calibration, CameraView, PointCloud, RangeImage, RgbImage, SensorSpec};
use panogen_core::synthworld::{Weather, WorldConfig};
use panogen_core::Tensor32;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::hashing::{sha256_file, sha256_hex};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    Dataset,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub file: String,
    pub calib_file: String,
    pub height: usize,
    pub width: usize,
    /// Row-major 3x4 intrinsics, whitespace separated.
    pub k: String,
    /// Row-major 4x4 LiDAR-to-camera extrinsics, whitespace separated.
    pub t: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// Scene seed; with the manifest's world config it regenerates the scene.
    pub seed: u64,
    pub weather: String,
    pub cloud: String,
    pub range: String,
    pub views: Vec<ViewEntry>,
    /// Reference sample whose views conditioned a generated sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ManifestKind,
    pub config_hash: String,
    pub sensor: SensorSpec,
    pub world: Option<WorldConfig>,
    pub samples: Vec<SampleEntry>,
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

fn join_floats(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

impl Manifest {
    /// Hash over every listed file hash, in path order.
    pub fn dataset_hash(&self) -> String {
        let mut s = String::new();
        for (path, h) in &self.files {
            s.push_str(path);
            s.push(' ');
            s.push_str(h);
            s.push('\n');
        }
        sha256_hex(s.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| {
            format!("no dataset manifest at {} (run `panogen gen-data` first?)", path.display())
        })?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Re-hashes every listed file.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (rel, want) in &self.files {
            let got = sha256_file(&dir.join(rel))?;
            if &got != want {
                bail!("{} changed since the manifest was written", dir.join(rel).display());
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, dir: &Path, index: usize) -> Result<LoadedSample> {
        let entry = self.samples[index].clone();
        let (range, range_labels) = read_range(&dir.join(&entry.range))?;
        if range.sensor != self.sensor {
            bail!("sample {}: range sensor differs from the manifest's", entry.id);
        }
        let cloud = read_kitti_bin(&dir.join(&entry.cloud))?;
        let views = entry
            .views
            .iter()
            .map(|v| read_view(&dir.join(&v.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedSample {
            entry,
            range,
            range_labels,
            cloud,
            views,
        })
    }

    pub fn load_all(&self, dir: &Path) -> Result<Vec<LoadedSample>> {
        (0..self.samples.len()).map(|i| self.load_sample(dir, i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LoadedView {
    pub view: CameraView,
    pub sem: Option<Vec<u8>>,
    pub depth: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub entry: SampleEntry,
    pub range: RangeImage,
    pub range_labels: Option<Vec<u8>>,
    pub cloud: PointCloud,
    pub views: Vec<LoadedView>,
}

impl LoadedSample {
    pub fn camera_views(&self) -> Vec<CameraView> {
        self.views.iter().map(|v| v.view.clone()).collect()
    }

    pub fn weather(&self) -> Result<Weather> {
        Ok(Weather::parse(&self.entry.weather)?)
    }
}

pub fn range_container(range: &RangeImage, labels: Option<&[u8]>) -> Result<Container> {
    let s = range.sensor;
    let mut c = Container::new(json!({ "kind": "range-image", "sensor": s }));
    c.insert("depth", Tensor32::from_vec(&[s.h, s.w], range.depth.clone())?);
    c.insert("intensity", Tensor32::from_vec(&[s.h, s.w], range.intensity.clone())?);
    if let Some(l) = labels {
        c.insert_u8("labels", &[s.h, s.w], l.to_vec())?;
    }
    Ok(c)
}

pub fn read_range(path: &Path) -> Result<(RangeImage, Option<Vec<u8>>)> {
    let c = Container::read(path).with_context(|| format!("reading {}", path.display()))?;
    let sensor: SensorSpec = serde_json::from_value(c.meta.get("sensor").cloned().context("range image lacks a sensor")?)?;
    let range = RangeImage {
        depth: c.get::<f32>("depth")?.data().to_vec(),
        intensity: c.get::<f32>("intensity")?.data().to_vec(),
        sensor,
    };
    range.validate()?;
    let labels = c.entries.contains_key("labels").then(|| c.get_u8("labels").map(|(_, d)| d.to_vec())).transpose()?;
    Ok((range, labels))
}

pub fn view_container(view: &CameraView, sem: Option<&[u8]>, depth: Option<&[f32]>) -> Result<Container> {
    let (h, w) = view.size();
    let mut c = Container::new(json!({ "kind": "camera-view", "name": view.name, "calib": view.calib }));
    c.insert("image", Tensor32::from_vec(&[h, w, 3], view.image.data.clone())?);
    if let Some(s) = sem {
        c.insert_u8("sem", &[h, w], s.to_vec())?;
    }
    if let Some(d) = depth {
        c.insert("depth", Tensor32::from_vec(&[h, w], d.to_vec())?);
    }
    Ok(c)
}

pub fn read_view(path: &Path) -> Result<LoadedView> {
    let c = Container::read(path).with_context(|| format!("reading {}", path.display()))?;
    let name = c.meta.get("name").and_then(|v| v.as_str()).unwrap_or("view").to_string();
    let calib: Calibration = serde_json::from_value(c.meta.get("calib").cloned().context("view lacks a calibration")?)?;
    let img = c.get::<f32>("image")?;
    let (h, w) = (img.dim(0), img.dim(1));
    let image = RgbImage {
        height: h,
        width: w,
        data: img.data().to_vec(),
    };
    let sem = c.entries.contains_key("sem").then(|| c.get_u8("sem").map(|(_, d)| d.to_vec())).transpose()?;
    let depth = c.entries.contains_key("depth").then(|| c.get::<f32>("depth").map(|t| t.data().to_vec())).transpose()?;
    Ok(LoadedView {
        view: CameraView::new(name, image, calib)?,
        sem,
        depth,
    })
}

/// Builds an output directory under a temporary name and moves it into
/// place on [`StagedDir::finish`]. Dropping it unfinished removes
/// everything written so far.
pub struct StagedDir {
    staging: PathBuf,
    target: PathBuf,
    files: BTreeMap<String, String>,
    done: bool,
}

impl StagedDir {
    /// `target` must not exist or be an empty directory.
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() && fs::read_dir(target)?.next().is_some() {
            bail!("output directory {} is not empty", target.display());
        }
        let name = target.file_name().context("output path has no final component")?.to_string_lossy().into_owned();
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
            files: BTreeMap::new(),
            done: false,
        })
    }

    pub fn staging(&self) -> &Path {
        &self.staging
    }

    /// Writes `bytes` at `rel` and records its hash.
    pub fn add(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.staging.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        write_atomic(&path, bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn add_container(&mut self, rel: &str, c: &Container) -> Result<()> {
        self.add(rel, &c.to_bytes()?)
    }

    pub fn add_view(&mut self, prefix: &str, k: usize, view: &CameraView, sem: Option<&[u8]>, depth: Option<&[f32]>) -> Result<ViewEntry> {
        let file = format!("{prefix}/view{k}.pgt");
        let calib_file = format!("{prefix}/view{k}_calib.txt");
        self.add_container(&file, &view_container(view, sem, depth)?)?;
        self.add(&calib_file, format_calib(&view.calib).as_bytes())?;
        let (height, width) = view.size();
        Ok(ViewEntry {
            name: view.name.clone(),
            file,
            calib_file,
            height,
            width,
            k: join_floats(view.calib.k.iter().flatten().copied()),
            t: join_floats(view.calib.t.iter().flatten().copied()),
        })
    }

    /// Stores the file table in `manifest`, writes it and moves the
    /// directory into place.
    pub fn finish(mut self, mut manifest: Manifest) -> Result<Manifest> {
        manifest.files = std::mem::take(&mut self.files);
        write_atomic(&self.staging.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        self.commit()?;
        Ok(manifest)
    }

    /// Moves the directory into place as is.
    pub fn commit(mut self) -> Result<()> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        self.done = true;
        Ok(())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
