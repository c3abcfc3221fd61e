use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use panogen_core::io::read_kitti_bin;
use panogen_core::metrics::distribution::bev_histogram;
use panogen_core::metrics::{
    cm_dc, cm_sc, extract_stats, frechet, jsd, mmd, oracle_labels, FeatureExtractor, FeatureStats, MetricReport, PointMlp, RangeCnn,
    ReferenceGrid, Region,
};
use panogen_core::rangeview::{project_points, PointCloud, RangeImage, SensorSpec};
use panogen_core::synthworld::{sample_scene, WorldConfig};

use crate::config::{MetricsConfig, RunConfig};
use crate::dataset::{LoadedView, Manifest, StagedDir, CONFIG_FILE};
use crate::plot;

/// Scale applied to squared MMD in reports.
pub const MMD_SCALE: f64 = 1e4;

/// Returned by [`eval_cmd`] after the report is written when some metric
/// is NaN or infinite.
#[derive(Debug)]
pub struct NonFiniteMetrics(pub Vec<String>);

impl fmt::Display for NonFiniteMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite metrics: {}", self.0.join(", "))
    }
}

impl std::error::Error for NonFiniteMetrics {}

/// One evaluated sample.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub range: RangeImage,
    pub cloud: PointCloud,
    pub views: Vec<LoadedView>,
    /// Scene seed for oracle labels.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
    pub world: Option<WorldConfig>,
    pub sensor: SensorSpec,
}

impl EvalSet {
    pub fn from_manifest(dir: &Path) -> Result<Self> {
        let m = Manifest::read(dir)?;
        m.verify(dir)?;
        let items = m
            .load_all(dir)?
            .into_iter()
            .map(|s| EvalItem {
                range: s.range,
                cloud: s.cloud,
                views: s.views,
                seed: Some(s.entry.seed),
            })
            .collect();
        Ok(Self {
            items,
            world: m.world,
            sensor: m.sensor,
        })
    }

    /// Every `*.bin` file of a directory, in name order, projected with `sensor`.
    pub fn from_kitti_dir(dir: &Path, sensor: SensorSpec) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "bin"));
        paths.sort();
        if paths.is_empty() {
            bail!("no .bin files in {}", dir.display());
        }
        let items = paths
            .iter()
            .map(|p| {
                let cloud = read_kitti_bin(p)?;
                let range = project_points(&cloud, &sensor)?;
                Ok(EvalItem {
                    range,
                    cloud,
                    views: Vec::new(),
                    seed: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            world: None,
            sensor,
        })
    }

    pub fn load(dir: &Path, kitti: bool, sensor: SensorSpec) -> Result<Self> {
        if kitti {
            Self::from_kitti_dir(dir, sensor)
        } else {
            Self::from_manifest(dir)
        }
    }
}

/// Mean per-sample cross-modal scores of `set` in `region`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrossModalSummary {
    pub cm_sc: Option<f64>,
    pub miou: Option<f64>,
    pub cm_dc: Option<f64>,
    pub sc_samples: usize,
    pub dc_samples: usize,
    pub oracle_ignored: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn crossmodal_summary(set: &EvalSet, region: Region, settings: &MetricsConfig) -> Result<CrossModalSummary> {
    let cfg = settings.crossmodal;
    let (mut sc, mut miou, mut dc) = (Vec::new(), Vec::new(), Vec::new());
    let mut ignored = 0;
    for item in &set.items {
        let cloud = region.restrict(&item.cloud);
        let labeled = match (&set.world, item.seed) {
            (Some(world), Some(seed)) => {
                let (c, n) = oracle_labels(&cloud, &sample_scene(seed, &world.knobs), cfg.oracle_radius)?;
                ignored += n;
                Some(c)
            }
            _ => None,
        };
        let (mut s_acc, mut s_iou, mut s_dc) = (Vec::new(), Vec::new(), Vec::new());
        for v in &item.views {
            let (h, w) = v.view.size();
            if let (Some(sem), Some(c)) = (&v.sem, &labeled) {
                let r = cm_sc(c, ReferenceGrid { calib: &v.view.calib, height: h, width: w, data: sem }, &cfg)?;
                s_acc.extend(r.accuracy);
                s_iou.extend(r.miou);
            }
            if let Some(depth) = &v.depth {
                let r = cm_dc(&cloud, ReferenceGrid { calib: &v.view.calib, height: h, width: w, data: depth }, &cfg)?;
                s_dc.extend(r.error);
            }
        }
        sc.extend(mean(&s_acc));
        miou.extend(mean(&s_iou));
        dc.extend(mean(&s_dc));
    }
    Ok(CrossModalSummary {
        cm_sc: mean(&sc),
        miou: mean(&miou),
        cm_dc: mean(&dc),
        sc_samples: sc.len(),
        dc_samples: dc.len(),
        oracle_ignored: ignored,
    })
}

fn frechet_of(ex: &dyn FeatureExtractor, a: &[RangeImage], b: &[RangeImage]) -> Result<Option<f64>> {
    if a.len() < 2 || b.len() < 2 {
        return Ok(None);
    }
    let sa: FeatureStats = extract_stats(ex, a)?;
    let sb = extract_stats(ex, b)?;
    Ok(Some(frechet(&sa, &sb)?))
}

/// Distribution and cross-modal metrics of `generated` against `reference`
/// for every region.
pub fn evaluate(reference: &EvalSet, generated: &EvalSet, config: &RunConfig) -> Result<MetricReport> {
    let m = &config.metrics;
    if reference.sensor != generated.sensor {
        bail!("reference and generated sets use different sensors");
    }
    let cnn = RangeCnn::new(m.extractor_seed);
    let mlp = PointMlp::new(m.extractor_seed);
    let mut report = MetricReport::new(config.hash());
    report.tags.insert("frd_extractor".into(), cnn.id().replace(' ', ""));
    report.tags.insert("fpd_extractor".into(), mlp.id().replace(' ', ""));
    report.tags.insert("cm_alignment".into(), format!("{:?}", m.crossmodal.alignment).to_lowercase());
    report.tags.insert("cm_lookup".into(), format!("{:?}", m.crossmodal.lookup).to_lowercase());
    report.counts.insert("reference".into(), reference.items.len());
    report.counts.insert("generated".into(), generated.items.len());

    for region in Region::ALL {
        let key = |name: &str| format!("{name}.{region}");
        let ranges = |s: &EvalSet| s.items.iter().map(|i| region.restrict_range(&i.range)).collect::<Vec<_>>();
        let clouds = |s: &EvalSet| s.items.iter().map(|i| region.restrict(&i.cloud)).collect::<Vec<_>>();
        let (ra, rb) = (ranges(reference), ranges(generated));
        let (ca, cb) = (clouds(reference), clouds(generated));
        report.counts.insert(key("points_reference"), ca.iter().map(PointCloud::len).sum());
        report.counts.insert(key("points_generated"), cb.iter().map(PointCloud::len).sum());

        match frechet_of(&cnn, &ra, &rb)? {
            Some(v) => report.push("frd", region, v, "feature2"),
            None => {
                report.undefined.insert(key("frd"), "fewer_than_two_samples".into());
            }
        }
        if ra.len() >= 2 && rb.len() >= 2 {
            let feats = |cs: &[PointCloud]| cs.iter().map(|c| mlp.extract_cloud(c, reference.sensor.d_max)).collect::<panogen_core::Result<Vec<_>>>();
            let fa = FeatureStats::from_features(&feats(&ca)?)?;
            let fb = FeatureStats::from_features(&feats(&cb)?)?;
            report.push("fpd", region, frechet(&fa, &fb)?, "feature2");
        } else {
            report.undefined.insert(key("fpd"), "fewer_than_two_samples".into());
        }
        match jsd(&ca, &cb, m.bev_bins, m.bev_extent) {
            Ok(v) => report.push("jsd", region, v, "bits"),
            Err(e) => {
                report.undefined.insert(key("jsd"), e.to_string());
            }
        }
        if ca.len() >= 2 && cb.len() >= 2 {
            let r = mmd(&ca, &cb, m.bev_bins, m.bev_extent, m.mmd_bandwidth)?;
            report.push("mmd", region, r.value * MMD_SCALE, "x1e4");
            report.tags.insert(key("mmd_bandwidth"), format!("{:e}", r.bandwidth));
        } else {
            report.undefined.insert(key("mmd"), "fewer_than_two_samples".into());
        }

        let cm = crossmodal_summary(generated, region, m)?;
        report.counts.insert(key("cm_sc_samples"), cm.sc_samples);
        report.counts.insert(key("cm_dc_samples"), cm.dc_samples);
        report.counts.insert(key("oracle_ignored"), cm.oracle_ignored);
        for (name, v, unit) in [("cm_sc", cm.cm_sc, "percent"), ("cm_miou", cm.miou, "percent"), ("cm_dc", cm.cm_dc, "ratio")] {
            match v {
                Some(v) => report.push(name, region, v, unit),
                None => {
                    report.undefined.insert(key(name), "no_valid_projections".into());
                }
            }
        }
    }
    Ok(report)
}

/// Evaluates, writes `report.txt` plus one report per region (and plots
/// when asked) to `out`, then fails if any metric is non-finite.
pub fn eval_cmd(reference: &Path, generated: &Path, config: &RunConfig, out: &Path, plots: bool, kitti: bool) -> Result<MetricReport> {
    config.validate()?;
    let sensor = config.data.world.sensor;
    let ref_set = EvalSet::load(reference, kitti, sensor)?;
    let gen_set = EvalSet::load(generated, kitti, sensor)?;
    let report = evaluate(&ref_set, &gen_set, config)?;

    let mut stage = StagedDir::create(out)?;
    stage.add(CONFIG_FILE, config.to_toml()?.as_bytes())?;
    stage.add("report.txt", report.to_text()?.as_bytes())?;
    for region in Region::ALL {
        let mut part = report.clone();
        part.values.retain(|v| v.region == region);
        stage.add(&format!("report_{region}.txt"), part.to_text()?.as_bytes())?;
    }
    if plots {
        let m = &config.metrics;
        let mean_grid = |s: &EvalSet| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; m.bev_bins * m.bev_bins];
            for i in &s.items {
                for (a, v) in acc.iter_mut().zip(bev_histogram(&i.cloud, m.bev_bins, m.bev_extent)?.grid) {
                    *a += v / s.items.len() as f64;
                }
            }
            Ok(acc)
        };
        plot::bev_pair(&mean_grid(&ref_set)?, &mean_grid(&gen_set)?, m.bev_bins, &stage.staging().join("bev.png"))?;
        plot::metric_bars(&report, &stage.staging().join("metrics.png"))?;
    }
    stage.commit()?;
    let bad: Vec<String> = report.non_finite().iter().map(|v| format!("{}.{}", v.name, v.region)).collect();
    if !bad.is_empty() {
        return Err(NonFiniteMetrics(bad).into());
    }
    Ok(report)
}
