//! LiDAR range-view geometry: spherical projection between point clouds and
//! panoramic range images, per-pixel ray recovery, and LiDAR-to-camera
//! projection.
//!
//! Conventions:
//! * Columns `u` run with decreasing azimuth: column 0 starts at azimuth
//!   `+pi` (pointing backwards, turning left), the forward direction `+x`
//!   sits at column `w/2`. Columns 0 and `w-1` are neighbours.
//! * Rows `v` run top to bottom: row 0 looks up at `+fov_up`, the last row
//!   looks down at `-fov_down`. Both FOV fields are positive magnitudes.
//! * A depth of 0 encodes "no return".

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const NO_LABEL: u8 = u8::MAX;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Reflectance in `[0, 1]`.
    pub intensity: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, intensity: Vec<f32>) -> Result<Self> {
        let c = Self {
            points,
            intensity,
            labels: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(invalid("label count differs from point count"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.intensity.len() {
            return Err(invalid("intensity count differs from point count"));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.points.len() {
                return Err(invalid("label count differs from point count"));
            }
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        if self
            .intensity
            .iter()
            .any(|&e| !(0.0..=1.0).contains(&e))
        {
            return Err(invalid("intensity outside [0, 1]"));
        }
        Ok(())
    }

    /// Keeps points for which `keep` holds, preserving order and attributes.
    pub fn filter(&self, mut keep: impl FnMut(&[f64; 3]) -> bool) -> PointCloud {
        let mut out = PointCloud::default();
        let mut labels = self.labels.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if keep(p) {
                out.points.push(*p);
                out.intensity.push(self.intensity[i]);
                if let (Some(dst), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                    dst.push(src[i]);
                }
            }
        }
        out.labels = labels;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub h: usize,
    pub w: usize,
    /// Upward field of view, radians, positive.
    pub fov_up: f64,
    /// Downward field of view, radians, positive.
    pub fov_down: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h < 2 || self.w < 4 {
            return Err(invalid(format!(
                "sensor grid {}x{} too small (need h>=2, w>=4)",
                self.h, self.w
            )));
        }
        if !(self.fov_up + self.fov_down > 0.0) || !self.fov_up.is_finite() || !self.fov_down.is_finite() {
            return Err(invalid("empty vertical field of view"));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(invalid("need 0 < d_min < d_max"));
        }
        Ok(())
    }

    /// Total vertical field of view.
    pub fn fov(&self) -> f64 {
        self.fov_up.abs() + self.fov_down.abs()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Same field of view sampled on a grid coarser by `factor`.
    pub fn downscaled(&self, factor: usize) -> SensorSpec {
        SensorSpec {
            h: self.h / factor,
            w: self.w / factor,
            ..*self
        }
    }

    /// Angular size of one pixel: `(azimuth step, inclination step)`.
    pub fn pixel_angles(&self) -> (f64, f64) {
        (
            2.0 * std::f64::consts::PI / self.w as f64,
            self.fov() / self.h as f64,
        )
    }

    /// Continuous image coordinates `(u, v)` of a point (no clamping, no
    /// range checks). `d` must be positive.
    pub fn continuous_coords(&self, p: &[f64; 3]) -> (f64, f64) {
        let d = norm(p);
        let u = 0.5 * (1.0 - p[1].atan2(p[0]) / std::f64::consts::PI) * self.w as f64;
        // asin(z/d) is the elevation; fov_down is a magnitude and is added.
        let v = (1.0 - ((p[2] / d).clamp(-1.0, 1.0).asin() + self.fov_down.abs()) / self.fov())
            * self.h as f64;
        (u, v)
    }

    /// Pixel `(col, row)` a point lands on, or `None` when out of range/FOV.
    pub fn pixel_of(&self, p: &[f64; 3]) -> Option<(usize, usize, f32)> {
        let d = norm(p);
        let d32 = d as f32;
        if !(d32 as f64 >= self.d_min && d32 as f64 <= self.d_max) {
            return None;
        }
        let elevation = (p[2] / d).clamp(-1.0, 1.0).asin();
        if elevation > self.fov_up.abs() || elevation < -self.fov_down.abs() {
            return None;
        }
        let (u, v) = self.continuous_coords(p);
        let col = (u.floor().max(0.0) as usize).min(self.w - 1);
        let row = (v.floor().max(0.0) as usize).min(self.h - 1);
        Some((col, row, d32))
    }
}

pub fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    /// Row-major `[h][w]`, meters, 0 for no return.
    pub depth: Vec<f32>,
    /// Row-major `[h][w]`, `[0, 1]`.
    pub intensity: Vec<f32>,
    pub sensor: SensorSpec,
}

impl RangeImage {
    pub fn empty(sensor: SensorSpec) -> Self {
        Self {
            depth: vec![0.0; sensor.pixels()],
            intensity: vec![0.0; sensor.pixels()],
            sensor,
        }
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.sensor.w + col
    }

    pub fn depth_at(&self, col: usize, row: usize) -> f32 {
        self.depth[self.index(col, row)]
    }

    pub fn returns(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let n = self.sensor.pixels();
        if self.depth.len() != n || self.intensity.len() != n {
            return Err(Error::Shape(format!(
                "range image buffers must hold {n} pixels"
            )));
        }
        for &d in &self.depth {
            if !d.is_finite() || (d != 0.0 && ((d as f64) < self.sensor.d_min || d as f64 > self.sensor.d_max)) {
                return Err(invalid(format!("depth {d} outside [d_min, d_max]")));
            }
        }
        if self.intensity.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(invalid("intensity outside [0, 1]"));
        }
        Ok(())
    }
}

/// Spherical projection with nearest-return collision handling.
pub fn project_points(cloud: &PointCloud, sensor: &SensorSpec) -> Result<RangeImage> {
    Ok(project_points_labeled(cloud, sensor)?.0)
}

/// As [`project_points`], also returning a per-pixel label image
/// ([`NO_LABEL`] where empty or unlabeled).
pub fn project_points_labeled(
    cloud: &PointCloud,
    sensor: &SensorSpec,
) -> Result<(RangeImage, Vec<u8>)> {
    sensor.validate()?;
    cloud.validate()?;
    let mut img = RangeImage::empty(*sensor);
    let mut labels = vec![NO_LABEL; sensor.pixels()];
    for (i, p) in cloud.points.iter().enumerate() {
        let Some((col, row, d)) = sensor.pixel_of(p) else {
            continue;
        };
        let idx = row * sensor.w + col;
        let cur = img.depth[idx];
        if cur == 0.0 || d < cur {
            img.depth[idx] = d;
            img.intensity[idx] = cloud.intensity[i];
            labels[idx] = cloud.labels.as_ref().map_or(NO_LABEL, |l| l[i]);
        }
    }
    Ok((img, labels))
}

/// Unit direction through the center of pixel `(col, row)`.
pub fn ray_direction(col: usize, row: usize, sensor: &SensorSpec) -> Result<[f64; 3]> {
    if col >= sensor.w || row >= sensor.h {
        return Err(invalid(format!(
            "pixel ({col}, {row}) outside {}x{} grid",
            sensor.w, sensor.h
        )));
    }
    Ok(ray_direction_unchecked(col, row, sensor))
}

pub(crate) fn ray_direction_unchecked(col: usize, row: usize, sensor: &SensorSpec) -> [f64; 3] {
    let pi = std::f64::consts::PI;
    let azimuth = pi * (1.0 - 2.0 * (col as f64 + 0.5) / sensor.w as f64);
    let inclination =
        sensor.fov() * (1.0 - (row as f64 + 0.5) / sensor.h as f64) - sensor.fov_down.abs();
    let (sa, ca) = azimuth.sin_cos();
    let (si, ci) = inclination.sin_cos();
    [ci * ca, ci * sa, si]
}

/// Inclination angle of a row center.
pub fn row_inclination(row: usize, sensor: &SensorSpec) -> f64 {
    sensor.fov() * (1.0 - (row as f64 + 0.5) / sensor.h as f64) - sensor.fov_down.abs()
}

/// All ray directions in row-major order.
pub fn ray_grid(sensor: &SensorSpec) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(sensor.pixels());
    for row in 0..sensor.h {
        for col in 0..sensor.w {
            out.push(ray_direction_unchecked(col, row, sensor));
        }
    }
    out
}

/// One point per returning pixel, `p = depth * Ray(u, v)`, in row-major order.
pub fn unproject(range: &RangeImage) -> PointCloud {
    unproject_labeled(range, None)
}

pub fn unproject_labeled(range: &RangeImage, labels: Option<&[u8]>) -> PointCloud {
    let s = &range.sensor;
    let mut cloud = PointCloud::default();
    let mut out_labels = labels.map(|_| Vec::new());
    for row in 0..s.h {
        for col in 0..s.w {
            let idx = row * s.w + col;
            let d = range.depth[idx];
            if d <= 0.0 {
                continue;
            }
            let r = ray_direction_unchecked(col, row, s);
            let d = d as f64;
            cloud.points.push([d * r[0], d * r[1], d * r[2]]);
            cloud.intensity.push(range.intensity[idx]);
            if let (Some(dst), Some(src)) = (out_labels.as_mut(), labels) {
                dst.push(src[idx]);
            }
        }
    }
    cloud.labels = out_labels;
    cloud
}

pub type Mat34 = [[f64; 4]; 3];
pub type Mat44 = [[f64; 4]; 4];

/// Camera intrinsics `K` (3x4, pixels) and LiDAR-to-camera extrinsics `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub k: Mat34,
    pub t: Mat44,
}

impl Calibration {
    pub fn new(k: Mat34, t: Mat44) -> Result<Self> {
        let c = Self { k, t };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.iter().chain(self.t.iter()).any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Calibration("non-finite calibration entry".into()));
        }
        if self.t[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Calibration("extrinsic bottom row must be (0,0,0,1)".into()));
        }
        if !(self.k[0][0] > 0.0 && self.k[1][1] > 0.0) {
            return Err(Error::Calibration("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::Calibration("extrinsic rotation block is singular".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let t = &self.t;
        [
            [t[0][0], t[0][1], t[0][2]],
            [t[1][0], t[1][1], t[1][2]],
            [t[2][0], t[2][1], t[2][2]],
        ]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.t[0][3], self.t[1][3], self.t[2][3]]
    }

    /// LiDAR-frame point to camera frame.
    pub fn to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        let t = &self.t;
        [
            t[0][0] * p[0] + t[0][1] * p[1] + t[0][2] * p[2] + t[0][3],
            t[1][0] * p[0] + t[1][1] * p[1] + t[1][2] * p[2] + t[1][3],
            t[2][0] * p[0] + t[2][1] * p[1] + t[2][2] * p[2] + t[2][3],
        ]
    }

    /// `(u', v', z_cam)`: `K T [p; 1]` divided by the camera-frame depth.
    pub fn project(&self, p: &[f64; 3]) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        let k = &self.k;
        let a = k[0][0] * c[0] + k[0][1] * c[1] + k[0][2] * c[2] + k[0][3];
        let b = k[1][0] * c[0] + k[1][1] * c[1] + k[1][2] * c[2] + k[1][3];
        (a / c[2], b / c[2], c[2])
    }

    /// Camera center in the LiDAR frame.
    pub fn camera_center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        // -R^T t, valid for rigid T; general T solved by the inverse below.
        match invert3(&r) {
            Some(ri) => {
                let x = mat3_vec(&ri, &t);
                [-x[0], -x[1], -x[2]]
            }
            None => [0.0; 3],
        }
    }

    /// LiDAR-frame direction of the camera ray through pixel `(x, y)`,
    /// scaled so that its camera-frame z component is 1.
    pub fn pixel_ray(&self, x: f64, y: f64) -> [f64; 3] {
        let k = &self.k;
        let k3 = [
            [k[0][0], k[0][1], k[0][2]],
            [k[1][0], k[1][1], k[1][2]],
            [k[2][0], k[2][1], k[2][2]],
        ];
        let ki = invert3(&k3).expect("validated intrinsics are invertible");
        let mut dc = mat3_vec(&ki, &[x, y, 1.0]);
        let s = 1.0 / dc[2];
        dc = [dc[0] * s, dc[1] * s, 1.0];
        let ri = invert3(&self.rotation()).expect("validated rotation is invertible");
        mat3_vec(&ri, &dc)
    }
}

pub(crate) fn mat3_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    Some([
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ])
}

/// Row-major `[H][W][3]` RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub name: String,
    pub image: RgbImage,
    pub calib: Calibration,
}

impl CameraView {
    pub fn new(name: impl Into<String>, image: RgbImage, calib: Calibration) -> Result<Self> {
        calib.validate()?;
        if image.data.len() != image.height * image.width * 3 {
            return Err(Error::Shape("image buffer must be H*W*3".into()));
        }
        if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("image values outside [0, 1]"));
        }
        Ok(Self {
            name: name.into(),
            image,
            calib,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.height, self.image.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraProjection {
    pub u: f64,
    pub v: f64,
    pub z_cam: f64,
    pub valid: bool,
}

/// Projects a single LiDAR-frame point into an image of size `(height, width)`.
pub fn project_to_image(p: &[f64; 3], calib: &Calibration, size: (usize, usize)) -> CameraProjection {
    let (u, v, z) = calib.project(p);
    let valid = z > 0.0
        && u.is_finite()
        && v.is_finite()
        && u >= 0.0
        && u < size.1 as f64
        && v >= 0.0
        && v < size.0 as f64;
    CameraProjection {
        u,
        v,
        z_cam: z,
        valid,
    }
}

pub fn lidar_to_camera(cloud: &PointCloud, view: &CameraView) -> Vec<CameraProjection> {
    cloud
        .points
        .iter()
        .map(|p| project_to_image(p, &view.calib, view.size()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sensor() -> SensorSpec {
        SensorSpec {
            h: 32,
            w: 256,
            fov_up: 3f64.to_radians(),
            fov_down: 25f64.to_radians(),
            d_min: 1.0,
            d_max: 50.0,
        }
    }

    fn symmetric() -> SensorSpec {
        SensorSpec {
            h: 16,
            w: 64,
            fov_up: 0.2,
            fov_down: 0.2,
            d_min: 0.5,
            d_max: 20.0,
        }
    }

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![0.5; n]).unwrap()
    }

    #[test]
    fn forward_point_hits_center() {
        let s = symmetric();
        assert_eq!(s.pixel_of(&[1.0, 0.0, 0.0]).map(|p| (p.0, p.1)), Some((s.w / 2, s.h / 2)));
    }

    #[test]
    fn backward_point_hits_column_zero() {
        let s = symmetric();
        assert_eq!(s.pixel_of(&[-1.0, 1e-12, 0.0]).unwrap().0, 0);
    }

    #[test]
    fn nearest_return_wins() {
        let s = sensor();
        let dir = ray_direction(40, 20, &s).unwrap();
        let pts = [5.0, 2.0, 9.0].map(|d| [dir[0] * d, dir[1] * d, dir[2] * d]);
        let img = project_points(&cloud(pts.to_vec()), &s).unwrap();
        // brute force: minimum depth over all candidates landing on the pixel
        let want = pts
            .iter()
            .filter(|p| s.pixel_of(p).map(|q| (q.0, q.1)) == Some((40, 20)))
            .map(|p| norm(p) as f32)
            .fold(f32::INFINITY, f32::min);
        assert_eq!(img.depth_at(40, 20), want);
        assert_eq!(img.returns(), 1);
    }

    #[test]
    fn out_of_range_and_fov_points_dropped() {
        let s = sensor();
        let pts = vec![[0.1, 0.0, 0.0], [100.0, 0.0, 0.0], [1.0, 0.0, 10.0], [10.0, 0.0, -1.0]];
        let img = project_points(&cloud(pts), &s).unwrap();
        assert_eq!(img.returns(), 1);
    }

    #[test]
    fn rejects_non_finite_and_empty_fov() {
        let s = sensor();
        assert!(project_points(&PointCloud { points: vec![[f64::NAN, 0.0, 0.0]], intensity: vec![0.0], labels: None }, &s).is_err());
        let bad = SensorSpec { fov_up: 0.0, fov_down: 0.0, ..s };
        assert!(project_points(&PointCloud::default(), &bad).is_err());
    }

    #[test]
    fn first_row_inclination() {
        let s = sensor();
        let want = s.fov_up - 0.5 * s.fov() / s.h as f64;
        assert!((row_inclination(0, &s) - want).abs() < 1e-15);
        let r = ray_direction(7, 0, &s).unwrap();
        assert!((r[2].asin() - want).abs() < 1e-12);
    }

    #[test]
    fn center_ray_points_forward() {
        let s = symmetric();
        let r = ray_direction(s.w / 2, s.h / 2, &s).unwrap();
        let (da, di) = s.pixel_angles();
        let angle = r[0].clamp(-1.0, 1.0).acos();
        assert!(angle < da.max(di));
    }

    #[test]
    fn ray_out_of_bounds_rejected() {
        assert!(ray_direction(256, 0, &sensor()).is_err());
        assert!(ray_direction(0, 32, &sensor()).is_err());
    }

    #[test]
    fn unproject_empty_and_single() {
        let s = sensor();
        assert!(unproject(&RangeImage::empty(s)).is_empty());
        let mut r = RangeImage::empty(s);
        let i = r.index(3, 4);
        r.depth[i] = 7.0;
        let c = unproject(&r);
        assert_eq!(c.len(), 1);
        assert!((norm(&c.points[0]) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn camera_identity_projection() {
        let k = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let t = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let calib = Calibration::new(k, t).unwrap();
        let p = project_to_image(&[0.0, 0.0, 2.0], &calib, (4, 4));
        assert_eq!((p.u, p.v, p.z_cam, p.valid), (0.0, 0.0, 2.0, true));
        let behind = project_to_image(&[0.0, 0.0, -1.0], &calib, (4, 4));
        assert!(!behind.valid);
    }

    #[test]
    fn bad_extrinsics_rejected() {
        let k = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let mut t = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        t[3][0] = 1.0;
        assert!(Calibration::new(k, t).is_err());
        t[3][0] = 0.0;
        t[2] = [0.0, 0.0, 0.0, 0.0];
        assert!(Calibration::new(k, t).is_err());
    }

    proptest! {
        #[test]
        fn project_unproject_is_identity(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let s = sensor();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = RangeImage::empty(s);
            for i in 0..s.pixels() {
                if rng.gen_bool(0.6) {
                    r.depth[i] = rng.gen_range(s.d_min as f32..=s.d_max as f32);
                    r.intensity[i] = rng.gen_range(0.0..=1.0);
                }
            }
            let back = project_points(&unproject(&r), &s).unwrap();
            prop_assert_eq!(back, r);
        }

        #[test]
        fn azimuth_wrap_symmetry(x in -10.0f64..10.0, y in 0.01f64..10.0) {
            let s = sensor();
            let (u1, _) = s.continuous_coords(&[x, y, 0.0]);
            let (u2, _) = s.continuous_coords(&[x, -y, 0.0]);
            let sum = (u1 + u2).rem_euclid(s.w as f64);
            prop_assert!(sum < 1e-9 || (s.w as f64 - sum) < 1e-9);
        }

        #[test]
        fn ray_round_trip_lands_on_pixel(col in 0usize..256, row in 0usize..32, d in 1.0f64..50.0) {
            let s = sensor();
            let r = ray_direction(col, row, &s).unwrap();
            let p = [r[0] * d, r[1] * d, r[2] * d];
            let hit = s.pixel_of(&p).unwrap();
            prop_assert_eq!((hit.0, hit.1), (col, row));
        }

        #[test]
        fn camera_projection_is_translation_equivariant(
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            px in 2.0f64..30.0, py in -10.0f64..10.0, pz in -2.0f64..2.0,
            yaw in -PI..PI,
        ) {
            let (s, c) = yaw.sin_cos();
            let r = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
            let rz = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
            let mut rot = [[0.0; 3]; 3];
            for i in 0..3 { for j in 0..3 { rot[i][j] = (0..3).map(|k| r[i][k] * rz[k][j]).sum(); } }
            let t0 = [0.1, -0.2, 0.3];
            let mk = |t: [f64; 3]| {
                let mut m = [[0.0; 4]; 4];
                for i in 0..3 { for j in 0..3 { m[i][j] = rot[i][j]; } m[i][3] = t[i]; }
                m[3][3] = 1.0;
                m
            };
            let k = [[100.0, 0.0, 64.0, 0.0], [0.0, 100.0, 32.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
            let a = Calibration::new(k, mk(t0)).unwrap();
            let shift = [tx, ty, tz];
            let rt = mat3_vec(&rot, &shift);
            let b = Calibration::new(k, mk([t0[0] - rt[0], t0[1] - rt[1], t0[2] - rt[2]])).unwrap();
            let p = [px, py, pz];
            let q = [px + tx, py + ty, pz + tz];
            let (u1, v1, z1) = a.project(&p);
            let (u2, v2, z2) = b.project(&q);
            prop_assert!((u1 - u2).abs() <= 1e-9 * (1.0 + u1.abs()));
            prop_assert!((v1 - v2).abs() <= 1e-9 * (1.0 + v1.abs()));
            prop_assert!((z1 - z2).abs() <= 1e-9 * (1.0 + z1.abs()));
        }
    }
}
