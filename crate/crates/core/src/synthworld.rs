//! Procedural paired RGB/LiDAR scenes.
//!
//! A scene is a ground plane, a handful of yawed boxes standing on it and a
//! few finite-height vertical walls. The LiDAR raycaster and the camera
//! rasterizer share one closed-form intersection routine, so every emitted
//! semantic and depth map is exact ground truth for the same geometry.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rangeview::{
    project_points_labeled, ray_grid, unproject_labeled, Calibration, CameraView, PointCloud,
    RangeImage, RgbImage, SensorSpec, NO_LABEL,
};
use crate::rng::{mix, stream_rng, streams};

/// Fixed class table. Pixels that see nothing carry [`SKY`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Ground = 0,
    Car = 1,
    Wall = 2,
    Clutter = 3,
}

pub const NUM_CLASSES: usize = 4;
pub const SKY: u8 = NO_LABEL;

impl Class {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(id: u8) -> &'static str {
        match id {
            0 => "ground",
            1 => "car",
            2 => "wall",
            3 => "clutter",
            _ => "sky",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Clean,
    Night,
    Fog,
    Snow,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Clean, Weather::Night, Weather::Fog, Weather::Snow];

    pub fn as_str(self) -> &'static str {
        match self {
            Weather::Clean => "clean",
            Weather::Night => "night",
            Weather::Fog => "fog",
            Weather::Snow => "snow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown weather `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrim {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: Class,
    pub albedo: [f64; 3],
}

impl BoxPrim {
    /// Footprint corners in the ground plane, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hx, hy) = (0.5 * self.size[0], 0.5 * self.size[1]);
        [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]].map(|[x, y]| {
            [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y]
        })
    }
}

/// Finite-height vertical plane `{p : n . p = distance}` with `n` horizontal
/// and pointing away from the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub azimuth: f64,
    pub distance: f64,
    pub height: f64,
    pub albedo: [f64; 3],
}

impl Wall {
    pub fn normal(&self) -> [f64; 3] {
        let (s, c) = self.azimuth.sin_cos();
        [c, s, 0.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Ground height in the LiDAR frame (`-sensor_height`).
    pub ground_z: f64,
    pub boxes: Vec<BoxPrim>,
    pub walls: Vec<Wall>,
    pub sensor_height: f64,
}

/// Difficulty knobs. `None` draws uniformly from the default range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneKnobs {
    pub boxes: Option<usize>,
    pub walls: Option<usize>,
    pub sensor_height: f64,
    /// Box centers lie at horizontal range in `[min_radius, max_radius]`.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SceneKnobs {
    fn default() -> Self {
        Self {
            boxes: None,
            walls: None,
            sensor_height: 1.73,
            min_radius: 4.5,
            max_radius: 20.0,
        }
    }
}

pub const MAX_BOXES: usize = 12;
pub const MIN_BOXES: usize = 2;
pub const MAX_WALLS: usize = 3;

/// Separating-axis test on two box footprints. All boxes stand on the same
/// ground plane, so footprint overlap is equivalent to volume overlap.
pub fn boxes_overlap(a: &BoxPrim, b: &BoxPrim) -> bool {
    let pa = a.footprint();
    let pb = b.footprint();
    for poly in [&pa, &pb] {
        for i in 0..4 {
            let e = [poly[(i + 1) % 4][0] - poly[i][0], poly[(i + 1) % 4][1] - poly[i][1]];
            let axis = [-e[1], e[0]];
            let proj = |p: &[[f64; 2]; 4]| {
                p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                    let d = q[0] * axis[0] + q[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (alo, ahi) = proj(&pa);
            let (blo, bhi) = proj(&pb);
            if ahi <= blo || bhi <= alo {
                return false;
            }
        }
    }
    true
}

fn random_albedo<R: Rng>(class: Class, rng: &mut R) -> [f64; 3] {
    match class {
        Class::Car => [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        Class::Clutter => {
            let g = rng.gen_range(0.25..0.55);
            [g * 0.8, g, g * 0.5]
        }
        Class::Wall => {
            let g = rng.gen_range(0.5..0.8);
            [g, g * 0.85, g * 0.75]
        }
        Class::Ground => [0.45, 0.45, 0.45],
    }
}

pub fn sample_scene(seed: u64, knobs: &SceneKnobs) -> SceneSpec {
    let mut rng = stream_rng(seed, streams::SCENE);
    let n_boxes = knobs
        .boxes
        .unwrap_or_else(|| rng.gen_range(MIN_BOXES..=MAX_BOXES));
    let n_walls = knobs.walls.unwrap_or_else(|| rng.gen_range(0..=MAX_WALLS));
    let ground_z = -knobs.sensor_height;
    let mut boxes: Vec<BoxPrim> = Vec::with_capacity(n_boxes);
    let mut attempts = 0;
    while boxes.len() < n_boxes && attempts < 200 * n_boxes.max(1) {
        attempts += 1;
        let class = if rng.gen_bool(0.6) { Class::Car } else { Class::Clutter };
        let size = match class {
            Class::Car => [
                rng.gen_range(3.6..4.6),
                rng.gen_range(1.6..2.0),
                rng.gen_range(1.4..1.8),
            ],
            _ => [
                rng.gen_range(0.5..1.6),
                rng.gen_range(0.5..1.6),
                rng.gen_range(0.5..2.2),
            ],
        };
        let r = rng.gen_range(knobs.min_radius..knobs.max_radius);
        let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let albedo = random_albedo(class, &mut rng);
        let candidate = BoxPrim {
            center: [r * az.cos(), r * az.sin(), ground_z + 0.5 * size[2]],
            size,
            yaw,
            class,
            albedo,
        };
        if boxes.iter().all(|b| !boxes_overlap(b, &candidate)) {
            boxes.push(candidate);
        }
    }
    let reach = knobs.max_radius + 3.0;
    let walls = (0..n_walls)
        .map(|_| {
            let class_albedo = random_albedo(Class::Wall, &mut rng);
            Wall {
                azimuth: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                distance: rng.gen_range(reach..reach + 15.0),
                height: rng.gen_range(2.5..6.0),
                albedo: class_albedo,
            }
        })
        .collect();
    SceneSpec {
        seed,
        ground_z,
        boxes,
        walls,
        sensor_height: knobs.sensor_height,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    /// Unit surface normal facing the ray origin.
    pub normal: [f64; 3],
    pub class: Class,
    pub albedo: [f64; 3],
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn ground_albedo(x: f64, y: f64) -> [f64; 3] {
    // 2 m checkerboard so the camera sees ground perspective.
    let cell = ((x / 2.0).floor() as i64 + (y / 2.0).floor() as i64).rem_euclid(2);
    let g = if cell == 0 { 0.40 } else { 0.52 };
    [g, g, g * 0.95]
}

impl SceneSpec {
    /// Every positive-distance intersection of the ray `o + t d`, any order.
    pub fn intersections(&self, o: &[f64; 3], d: &[f64; 3]) -> Vec<Hit> {
        let mut hits = Vec::new();
        if d[2] < 0.0 && o[2] > self.ground_z {
            let t = (self.ground_z - o[2]) / d[2];
            let x = o[0] + t * d[0];
            let y = o[1] + t * d[1];
            hits.push(Hit {
                t,
                normal: [0.0, 0.0, 1.0],
                class: Class::Ground,
                albedo: ground_albedo(x, y),
            });
        }
        for b in &self.boxes {
            if let Some(h) = intersect_box(b, o, d) {
                hits.push(h);
            }
        }
        for w in &self.walls {
            let n = w.normal();
            let nd = dot(&n, d);
            if nd <= 0.0 {
                continue;
            }
            let t = (w.distance - dot(&n, o)) / nd;
            if t <= 0.0 {
                continue;
            }
            let z = o[2] + t * d[2];
            if z >= self.ground_z && z <= self.ground_z + w.height {
                hits.push(Hit {
                    t,
                    normal: [-n[0], -n[1], 0.0],
                    class: Class::Wall,
                    albedo: w.albedo,
                });
            }
        }
        hits
    }

    /// Nearest hit with `t` in `[t_min, t_max]`.
    /// Class of and distance to the surface nearest `p`; ties keep the
    /// earlier primitive (ground, then boxes, then walls).
    pub fn nearest_surface(&self, p: &[f64; 3]) -> (Class, f64) {
        let mut best = (Class::Ground, (p[2] - self.ground_z).abs());
        for b in &self.boxes {
            let d = box_distance(b, p);
            if d < best.1 {
                best = (b.class, d);
            }
        }
        for w in &self.walls {
            let across = dot(&w.normal(), p) - w.distance;
            let top = self.ground_z + w.height;
            let vertical = (self.ground_z - p[2]).max(p[2] - top).max(0.0);
            let d = across.hypot(vertical);
            if d < best.1 {
                best = (Class::Wall, d);
            }
        }
        best
    }

    pub fn first_hit(&self, o: &[f64; 3], d: &[f64; 3], t_min: f64, t_max: f64) -> Option<Hit> {
        self.intersections(o, d)
            .into_iter()
            .filter(|h| h.t >= t_min && h.t <= t_max)
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }
}

/// Unsigned distance from `p` to the surface of `b`.
fn box_distance(b: &BoxPrim, p: &[f64; 3]) -> f64 {
    let (s, c) = b.yaw.sin_cos();
    let rel = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
    let local = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let q: [f64; 3] = std::array::from_fn(|i| local[i].abs() - 0.5 * b.size[i]);
    let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    let inside = q[0].max(q[1]).max(q[2]).min(0.0);
    (outside + inside).abs()
}

fn intersect_box(b: &BoxPrim, o: &[f64; 3], d: &[f64; 3]) -> Option<Hit> {
    let (s, c) = b.yaw.sin_cos();
    // world -> box-local: rotate by -yaw about z
    let rel = [o[0] - b.center[0], o[1] - b.center[1], o[2] - b.center[2]];
    let lo = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let half = [0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for i in 0..3 {
        if ld[i].abs() < 1e-15 {
            if lo[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / ld[i];
        let mut t0 = (-half[i] - lo[i]) * inv;
        let mut t1 = (half[i] - lo[i]) * inv;
        let mut entry_sign = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            entry_sign = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            axis = i;
            sign = entry_sign;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 0.0 {
        return None;
    }
    let mut ln = [0.0; 3];
    ln[axis] = sign;
    let normal = [c * ln[0] - s * ln[1], s * ln[0] + c * ln[1], ln[2]];
    Some(Hit {
        t: t_near,
        normal,
        class: b.class,
        albedo: b.albedo,
    })
}

pub fn luminance(rgb: &[f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Casts one ray per pixel center from the sensor origin. Returns the cloud
/// (labels attached, one point per return, row-major order), the range image
/// and the per-pixel label image ([`SKY`] where empty).
pub fn raycast_lidar(scene: &SceneSpec, sensor: &SensorSpec) -> Result<(PointCloud, RangeImage, Vec<u8>)> {
    sensor.validate()?;
    let rays = ray_grid(sensor);
    let mut range = RangeImage::empty(*sensor);
    let mut labels = vec![SKY; sensor.pixels()];
    let origin = [0.0; 3];
    for (i, dir) in rays.iter().enumerate() {
        let Some(hit) = scene.first_hit(&origin, dir, sensor.d_min, sensor.d_max) else {
            continue;
        };
        let d = hit.t as f32;
        if (d as f64) < sensor.d_min || d as f64 > sensor.d_max {
            continue;
        }
        let cos_inc = dot(dir, &hit.normal).abs();
        range.depth[i] = d;
        range.intensity[i] = (luminance(&hit.albedo) * cos_inc).clamp(0.0, 1.0) as f32;
        labels[i] = hit.class.id();
    }
    let cloud = unproject_labeled(&range, Some(&labels));
    Ok((cloud, range, labels))
}

/// One calibrated camera of a rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub calib: Calibration,
}

/// Pinhole camera at LiDAR-frame position `center` looking along azimuth
/// `yaw` with a horizontal field of view `hfov`.
pub fn pinhole_camera(
    name: &str,
    height: usize,
    width: usize,
    hfov: f64,
    yaw: f64,
    center: [f64; 3],
) -> Result<CameraSpec> {
    let f = 0.5 * width as f64 / (0.5 * hfov).tan();
    let k = [
        [f, 0.0, 0.5 * width as f64, 0.0],
        [0.0, f, 0.5 * height as f64, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ];
    let (s, c) = yaw.sin_cos();
    // camera axes in LiDAR frame: x right, y down, z forward
    let right = [s, -c, 0.0];
    let down = [0.0, 0.0, -1.0];
    let fwd = [c, s, 0.0];
    let rows = [right, down, fwd];
    let mut t = [[0.0; 4]; 4];
    for (i, r) in rows.iter().enumerate() {
        t[i][..3].copy_from_slice(r);
        t[i][3] = -dot(r, &center);
    }
    t[3][3] = 1.0;
    Ok(CameraSpec {
        name: name.to_string(),
        height,
        width,
        calib: Calibration::new(k, t)?,
    })
}

/// `n_views` cameras spaced evenly in azimuth, the first facing forward.
pub fn camera_rig(n_views: usize, height: usize, width: usize) -> Result<Vec<CameraSpec>> {
    if n_views == 0 {
        return Err(invalid("rig needs at least one camera"));
    }
    const NAMES: [&str; 4] = ["front", "left", "rear", "right"];
    (0..n_views)
        .map(|i| {
            let yaw = 2.0 * std::f64::consts::PI * i as f64 / n_views as f64;
            let name = if n_views <= 4 && n_views != 3 {
                NAMES[i * 4 / n_views].to_string()
            } else {
                format!("cam{i}")
            };
            let offset = [0.1, 0.0, -0.05];
            let (s, c) = yaw.sin_cos();
            let center = [c * offset[0] - s * offset[1], s * offset[0] + c * offset[1], offset[2]];
            pinhole_camera(&name, height, width, 90f64.to_radians(), yaw, center)
        })
        .collect()
}

/// Rasterized camera frame with exact per-pixel ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub view: CameraView,
    /// `[H][W]` class ids, [`SKY`] where no surface.
    pub sem_map: Vec<u8>,
    /// `[H][W]` camera-frame depth in meters, `+inf` where no surface.
    pub depth_map: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Fog extinction coefficient, 1/m.
    pub fog_beta: f64,
    /// Fraction of fog-dropped rays that return a scatter echo.
    pub fog_scatter_fraction: f64,
    pub fog_scatter_max: f64,
    /// Fraction of pixels replaced by snow clutter.
    pub snow_rate: f64,
    pub snow_max: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            fog_beta: 0.02,
            fog_scatter_fraction: 0.02,
            fog_scatter_max: 15.0,
            snow_rate: 0.01,
            snow_max: 8.0,
        }
    }
}

const SUN: [f64; 3] = [0.3, 0.2, 0.932_737_905_308_881_5];
const NIGHT_GAIN: f64 = 0.25;
const NIGHT_NOISE: f64 = 0.02;
const FOG_COLOR: [f64; 3] = [0.78, 0.8, 0.82];

fn sky_color(dir_z: f64) -> [f64; 3] {
    let t = dir_z.clamp(0.0, 1.0);
    [0.62 - 0.2 * t, 0.74 - 0.15 * t, 0.92 - 0.05 * t]
}

/// Geometry at continuous pixel `(x, y)`: `(camera depth, hit)`.
pub fn camera_ray_hit(scene: &SceneSpec, calib: &Calibration, x: f64, y: f64) -> Option<(f64, Hit)> {
    let origin = calib.camera_center();
    let dir = calib.pixel_ray(x, y);
    // `dir` has unit camera-frame z, so the ray parameter is the camera depth.
    scene
        .intersections(&origin, &dir)
        .into_iter()
        .filter(|h| h.t > 1e-6)
        .min_by(|a, b| a.t.total_cmp(&b.t))
        .map(|h| (h.t, h))
}

/// Renders the scene from one camera. Weather changes only the image.
pub fn rasterize_view(
    scene: &SceneSpec,
    camera: &CameraSpec,
    weather: Weather,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<RenderedView> {
    camera.calib.validate()?;
    let (h, w) = (camera.height, camera.width);
    let mut image = RgbImage::new(h, w);
    let mut sem_map = vec![SKY; h * w];
    let mut depth_map = vec![f32::INFINITY; h * w];
    let sun_norm = SUN.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sun = SUN.map(|v| v / sun_norm);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let idx = y * w + x;
            let rgb = match camera_ray_hit(scene, &camera.calib, px, py) {
                Some((z, hit)) => {
                    sem_map[idx] = hit.class.id();
                    depth_map[idx] = z as f32;
                    let shade = 0.4 + 0.6 * dot(&hit.normal, &sun).max(0.0);
                    let mut c = hit.albedo.map(|a| a * shade);
                    if weather == Weather::Fog {
                        let tr = (-corruption.fog_beta * z).exp();
                        for k in 0..3 {
                            c[k] = c[k] * tr + FOG_COLOR[k] * (1.0 - tr);
                        }
                    }
                    c
                }
                None => {
                    if weather == Weather::Fog {
                        FOG_COLOR
                    } else {
                        let d = camera.calib.pixel_ray(px, py);
                        let n = dot(&d, &d).sqrt();
                        sky_color(d[2] / n)
                    }
                }
            };
            image.set_pixel(x, y, rgb.map(|v| v.clamp(0.0, 1.0) as f32));
        }
    }
    let mut rng = stream_rng(mix(seed, camera.name.len() as u64 ^ hash_name(&camera.name)), streams::RENDER);
    match weather {
        Weather::Night => {
            let noise = Normal::new(0.0, NIGHT_NOISE).expect("valid sigma");
            for v in image.data.iter_mut() {
                *v = (*v as f64 * NIGHT_GAIN + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Weather::Snow => {
            for px in image.data.chunks_mut(3) {
                if rng.gen_bool(0.02) {
                    let b = rng.gen_range(0.85..1.0);
                    px.fill(b);
                } else {
                    for v in px.iter_mut() {
                        *v = (*v * 0.85 + 0.12).min(1.0);
                    }
                }
            }
        }
        Weather::Clean | Weather::Fog => {}
    }
    let view = CameraView::new(camera.name.clone(), image, camera.calib)?;
    Ok(RenderedView {
        view,
        sem_map,
        depth_map,
    })
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub seed: u64,
    pub weather: Weather,
    pub cloud: PointCloud,
    pub range_image: RangeImage,
    /// Per-pixel class ids of the range image, [`SKY`] where empty.
    pub range_labels: Vec<u8>,
    pub views: Vec<RenderedView>,
}

/// Applies fog or snow to the LiDAR half of a sample. The cloud is rebuilt
/// from the corrupted range image, so `range_image == project(cloud)` holds.
pub fn corrupt_lidar(
    sample: &PairedSample,
    weather: Weather,
    config: &CorruptionConfig,
) -> Result<PairedSample> {
    let mut out = sample.clone();
    let sensor = sample.range_image.sensor;
    let mut rng = stream_rng(sample.seed, streams::WEATHER);
    let range = &mut out.range_image;
    let labels = &mut out.range_labels;
    match weather {
        Weather::Fog => {
            if !(config.fog_beta >= 0.0) || !(0.0..=1.0).contains(&config.fog_scatter_fraction) {
                return Err(invalid("fog needs beta >= 0 and scatter fraction in [0, 1]"));
            }
            let scatter_max = config.fog_scatter_max.min(sensor.d_max);
            for i in 0..range.depth.len() {
                let d = range.depth[i] as f64;
                if d <= 0.0 {
                    continue;
                }
                let transmit = (-config.fog_beta * d).exp();
                let survive: f64 = rng.gen();
                if survive < transmit {
                    range.intensity[i] = (range.intensity[i] as f64 * transmit) as f32;
                    continue;
                }
                let echo: f64 = rng.gen();
                if echo < config.fog_scatter_fraction && scatter_max > sensor.d_min {
                    range.depth[i] = rng.gen_range(sensor.d_min..=scatter_max) as f32;
                    range.intensity[i] = rng.gen_range(0.0..0.1);
                    labels[i] = Class::Clutter.id();
                } else {
                    range.depth[i] = 0.0;
                    range.intensity[i] = 0.0;
                    labels[i] = SKY;
                }
            }
        }
        Weather::Snow => {
            if !(0.0..=1.0).contains(&config.snow_rate) {
                return Err(invalid("snow rate must lie in [0, 1]"));
            }
            let snow_max = config.snow_max.min(sensor.d_max);
            if config.snow_rate > 0.0 && snow_max <= sensor.d_min {
                return Err(invalid("snow clutter range is empty"));
            }
            for i in 0..range.depth.len() {
                let u: f64 = rng.gen();
                if u < config.snow_rate {
                    range.depth[i] = rng.gen_range(sensor.d_min..=snow_max) as f32;
                    range.intensity[i] = rng.gen_range(0.3..0.9);
                    labels[i] = Class::Clutter.id();
                }
            }
        }
        Weather::Clean | Weather::Night => {
            return Err(invalid(format!(
                "weather `{}` does not corrupt LiDAR",
                weather.as_str()
            )))
        }
    }
    out.cloud = unproject_labeled(&out.range_image, Some(&out.range_labels));
    out.weather = weather;
    Ok(out)
}

/// Everything needed to turn a seed into a [`PairedSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub sensor: SensorSpec,
    pub knobs: SceneKnobs,
    pub image_height: usize,
    pub image_width: usize,
    pub n_views: usize,
    pub corruption: CorruptionConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sensor: default_sensor(),
            knobs: SceneKnobs::default(),
            image_height: 64,
            image_width: 128,
            n_views: 1,
            corruption: CorruptionConfig::default(),
        }
    }
}

/// 32 x 256 panorama, +3 / -25 degree vertical field of view, 1-50 m.
pub fn default_sensor() -> SensorSpec {
    SensorSpec {
        h: 32,
        w: 256,
        fov_up: 3f64.to_radians(),
        fov_down: 25f64.to_radians(),
        d_min: 1.0,
        d_max: 50.0,
    }
}

impl WorldConfig {
    pub fn rig(&self) -> Result<Vec<CameraSpec>> {
        camera_rig(self.n_views, self.image_height, self.image_width)
    }
}

pub fn generate_sample(config: &WorldConfig, seed: u64, weather: Weather) -> Result<PairedSample> {
    let scene = sample_scene(seed, &config.knobs);
    let (cloud, range_image, range_labels) = raycast_lidar(&scene, &config.sensor)?;
    let views = config
        .rig()?
        .iter()
        .map(|cam| rasterize_view(&scene, cam, weather, &config.corruption, seed))
        .collect::<Result<Vec<_>>>()?;
    let clean = PairedSample {
        seed,
        weather: Weather::Clean,
        cloud,
        range_image,
        range_labels,
        views,
    };
    match weather {
        Weather::Fog | Weather::Snow => corrupt_lidar(&clean, weather, &config.corruption),
        Weather::Clean | Weather::Night => Ok(PairedSample { weather, ..clean }),
    }
}

/// Range image re-derived from a sample's cloud; equals `sample.range_image`.
pub fn reproject(sample: &PairedSample) -> Result<RangeImage> {
    Ok(project_points_labeled(&sample.cloud, &sample.range_image.sensor)?.0)
}
