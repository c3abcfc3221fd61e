//! Cross-modal consistency of a LiDAR cloud with per-pixel camera references:
//! label agreement (CM-SC) and scale-aligned depth error (CM-DC).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rangeview::{project_to_image, Calibration, PointCloud, NO_LABEL};
use crate::synthworld::{SceneSpec, NUM_CLASSES, SKY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Median,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthLookup {
    /// Reference pixel containing the projection.
    Nearest,
    /// Bilinear in inverse depth over the four surrounding pixel centers,
    /// used only where the 4x4 neighborhood around them is planar.
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossModalConfig {
    /// Skip points whose reference pixel touches a label boundary.
    pub erode: bool,
    pub alignment: Alignment,
    pub lookup: DepthLookup,
    /// Relative tolerance of the planarity test.
    pub planarity_tol: f64,
    /// Oracle labeling radius in meters.
    pub oracle_radius: f64,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            erode: true,
            alignment: Alignment::Median,
            lookup: DepthLookup::Bilinear,
            planarity_tol: 1e-3,
            oracle_radius: 0.5,
        }
    }
}

/// A calibrated reference image grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceGrid<'a, P> {
    pub calib: &'a Calibration,
    pub height: usize,
    pub width: usize,
    pub data: &'a [P],
}

impl<P> ReferenceGrid<'_, P> {
    fn check(&self) -> Result<()> {
        if self.data.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "reference holds {} pixels, calibration grid is {}x{}",
                self.data.len(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScResult {
    /// Percent of evaluated points whose label matches; `None` if no point
    /// could be evaluated.
    pub accuracy: Option<f64>,
    /// Mean IoU in percent over classes present in either labeling.
    pub miou: Option<f64>,
    pub evaluated: usize,
    pub boundary: usize,
    pub unlabeled: usize,
}

fn on_boundary(sem: &[u8], h: usize, w: usize, row: usize, col: usize) -> bool {
    let c = sem[row * w + col];
    (row.saturating_sub(1)..=(row + 1).min(h - 1))
        .any(|r| (col.saturating_sub(1)..=(col + 1).min(w - 1)).any(|k| sem[r * w + k] != c))
}

pub fn cm_sc(cloud: &PointCloud, reference: ReferenceGrid<'_, u8>, config: &CrossModalConfig) -> Result<ScResult> {
    reference.check()?;
    let (h, w) = (reference.height, reference.width);
    let Some(labels) = cloud.labels.as_ref() else {
        return Ok(ScResult {
            accuracy: None,
            miou: None,
            evaluated: 0,
            boundary: 0,
            unlabeled: cloud.points.len(),
        });
    };
    let mut confusion = vec![[0usize; NUM_CLASSES + 1]; NUM_CLASSES + 1];
    let slot = |l: u8| (l as usize).min(NUM_CLASSES);
    let (mut correct, mut evaluated, mut boundary, mut unlabeled) = (0, 0, 0, 0);
    for (p, &label) in cloud.points.iter().zip(labels) {
        if label == NO_LABEL {
            unlabeled += 1;
            continue;
        }
        let pr = project_to_image(p, reference.calib, (h, w));
        if !pr.valid {
            continue;
        }
        let (col, row) = (pr.u as usize, pr.v as usize);
        if config.erode && on_boundary(reference.data, h, w, row, col) {
            boundary += 1;
            continue;
        }
        let r = reference.data[row * w + col];
        evaluated += 1;
        correct += usize::from(r == label);
        confusion[slot(label)][slot(r)] += 1;
    }
    if evaluated == 0 {
        return Ok(ScResult {
            accuracy: None,
            miou: None,
            evaluated,
            boundary,
            unlabeled,
        });
    }
    let mut ious = Vec::new();
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c];
        let fp: usize = (0..=NUM_CLASSES).filter(|&k| k != c).map(|k| confusion[c][k]).sum();
        let fn_: usize = (0..=NUM_CLASSES).filter(|&k| k != c).map(|k| confusion[k][c]).sum();
        if tp + fp + fn_ > 0 {
            ious.push(tp as f64 / (tp + fp + fn_) as f64);
        }
    }
    Ok(ScResult {
        accuracy: Some(100.0 * correct as f64 / evaluated as f64),
        miou: (!ious.is_empty()).then(|| 100.0 * ious.iter().sum::<f64>() / ious.len() as f64),
        evaluated,
        boundary,
        unlabeled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcResult {
    /// Mean absolute relative error after alignment; `None` if no point
    /// could be evaluated.
    pub error: Option<f64>,
    pub scale: f64,
    pub evaluated: usize,
    /// Valid projections without a usable reference depth.
    pub rejected: usize,
}

fn reference_depth(reference: &ReferenceGrid<'_, f32>, u: f64, v: f64, config: &CrossModalConfig) -> Option<f64> {
    let (h, w) = (reference.height, reference.width);
    let at = |r: usize, c: usize| {
        let d = reference.data[r * w + c] as f64;
        (d.is_finite() && d > 0.0).then_some(d)
    };
    match config.lookup {
        DepthLookup::Nearest => at(v as usize, u as usize),
        DepthLookup::Bilinear => {
            let (x, y) = (u - 0.5, v - 0.5);
            if x < 1.0 || y < 1.0 {
                return None;
            }
            let (c0, r0) = (x as usize, y as usize);
            if c0 + 2 >= w || r0 + 2 >= h {
                return None;
            }
            // inverse depth over the 4x4 stencil around the four neighbors
            let mut inv = [[0.0; 4]; 4];
            for (i, row) in inv.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = 1.0 / at(r0 + i - 1, c0 + j - 1)?;
                }
            }
            // inverse depth is affine in pixel coordinates on a plane, so
            // every second difference across the stencil vanishes
            let big = inv.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
            let tol = config.planarity_tol * big;
            for k in 1..3 {
                for m in 1..3 {
                    let along_row = inv[k][m - 1] - 2.0 * inv[k][m] + inv[k][m + 1];
                    let along_col = inv[m - 1][k] - 2.0 * inv[m][k] + inv[m + 1][k];
                    if along_row.abs() > tol || along_col.abs() > tol {
                        return None;
                    }
                }
            }
            if (inv[1][1] + inv[2][2] - inv[1][2] - inv[2][1]).abs() > tol {
                return None;
            }
            let (fx, fy) = (x - c0 as f64, y - r0 as f64);
            let q = (1.0 - fy) * ((1.0 - fx) * inv[1][1] + fx * inv[1][2]) + fy * ((1.0 - fx) * inv[2][1] + fx * inv[2][2]);
            Some(1.0 / q)
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cm_dc(cloud: &PointCloud, reference: ReferenceGrid<'_, f32>, config: &CrossModalConfig) -> Result<DcResult> {
    reference.check()?;
    let size = (reference.height, reference.width);
    let mut pairs = Vec::new();
    let mut rejected = 0;
    for p in &cloud.points {
        let pr = project_to_image(p, reference.calib, size);
        if !pr.valid {
            continue;
        }
        match reference_depth(&reference, pr.u, pr.v, config) {
            Some(r) => pairs.push((pr.z_cam, r)),
            None => rejected += 1,
        }
    }
    if pairs.is_empty() {
        return Ok(DcResult {
            error: None,
            scale: 1.0,
            evaluated: 0,
            rejected,
        });
    }
    let scale = match config.alignment {
        Alignment::None => 1.0,
        Alignment::Median => median(&mut pairs.iter().map(|(z, r)| r / z).collect::<Vec<_>>()),
        Alignment::LeastSquares => {
            let num: f64 = pairs.iter().map(|(z, r)| z * r).sum();
            let den: f64 = pairs.iter().map(|(z, _)| z * z).sum();
            num / den
        }
    };
    let err = pairs.iter().map(|(z, r)| (scale * z - r).abs() / r).sum::<f64>() / pairs.len() as f64;
    Ok(DcResult {
        error: Some(err),
        scale,
        evaluated: pairs.len(),
        rejected,
    })
}

/// Labels each point with the class of the nearest scene surface within
/// `radius`; farther points get [`NO_LABEL`]. Returns the labeled cloud and
/// the number of unlabeled points.
pub fn oracle_labels(cloud: &PointCloud, scene: &SceneSpec, radius: f64) -> Result<(PointCloud, usize)> {
    let mut ignored = 0;
    let labels = cloud
        .points
        .iter()
        .map(|p| {
            let (class, d) = scene.nearest_surface(p);
            if d <= radius {
                class.id()
            } else {
                ignored += 1;
                SKY
            }
        })
        .collect();
    Ok((cloud.clone().with_labels(labels)?, ignored))
}
