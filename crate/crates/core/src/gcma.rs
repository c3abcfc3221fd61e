//! Geometric cross-modal alignment.
//!
//! Every range pixel casts its ray, places `K` candidate points at fixed
//! log-spaced depths, projects them into each camera and bilinearly samples
//! the conditioning features there. A per-pixel query (the range feature
//! plus a Fourier-encoded ray embedding) attends over the valid candidates
//! with keys equal to values; the log of the depth weight `exp(-d/tau)`
//! enters as an additive logit prior, so a zero query reproduces the
//! depth-weighted average exactly. The result is injected through a
//! zero-initialized 1x1 convolution.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::kernels::{ConvSpec, GatherPlan, Tap};
use crate::nn::ParamStore;
use crate::rangeview::{project_to_image, ray_direction_unchecked, Calibration, SensorSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    /// Depth decay, meters.
    pub tau: f64,
    /// Candidate depths per ray.
    pub samples: usize,
    /// Fourier bands.
    pub bands: usize,
    pub heads: usize,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self {
            tau: 20.0,
            samples: 16,
            bands: 8,
            heads: 2,
        }
    }
}

impl AlignmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(invalid("tau must be positive"));
        }
        if self.samples == 0 || self.bands == 0 || self.heads == 0 {
            return Err(invalid("samples, bands and heads must be at least 1"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        6 * self.bands + 3
    }
}

/// Log-uniform depths with midpoint placement:
/// `d_k = d_min (d_max/d_min)^((k - 1/2)/K)`, `k = 1..K`.
pub fn sample_depths(k: usize, d_min: f64, d_max: f64) -> Vec<f64> {
    let ratio = (d_max / d_min).ln();
    (0..k)
        .map(|i| d_min * (ratio * (i as f64 + 0.5) / k as f64).exp())
        .collect()
}

/// One camera as seen by the alignment planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGeometry {
    pub calib: Calibration,
    /// Image `(height, width)`.
    pub image: (usize, usize),
    /// Feature map `(height, width)` sampled for this view.
    pub feature: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub points: Vec<[f64; 3]>,
    /// Image-pixel projections `(u', v')`.
    pub proj: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
}

pub fn sample_ray(
    col: usize,
    row: usize,
    sensor: &SensorSpec,
    params: &AlignmentParams,
    calib: &Calibration,
    image: (usize, usize),
) -> Result<RaySamples> {
    let ray = crate::rangeview::ray_direction(col, row, sensor)?;
    Ok(sample_along(&ray, sensor, params, calib, image))
}

fn sample_along(
    ray: &[f64; 3],
    sensor: &SensorSpec,
    params: &AlignmentParams,
    calib: &Calibration,
    image: (usize, usize),
) -> RaySamples {
    let depths = sample_depths(params.samples, sensor.d_min, sensor.d_max);
    let points: Vec<[f64; 3]> = depths.iter().map(|&d| ray.map(|c| d * c)).collect();
    let mut proj = Vec::with_capacity(points.len());
    let mut mask = Vec::with_capacity(points.len());
    for p in &points {
        let c = project_to_image(p, calib, image);
        proj.push([c.u, c.v]);
        mask.push(c.valid);
    }
    RaySamples {
        depths,
        points,
        proj,
        mask,
    }
}

/// `w_k = exp(-d_k / tau) m_k`.
pub fn depth_weights(samples: &RaySamples, tau: f64) -> Vec<f64> {
    samples
        .depths
        .iter()
        .zip(&samples.mask)
        .map(|(&d, &m)| if m { (-d / tau).exp() } else { 0.0 })
        .collect()
}

/// Four bilinear taps (align-corners-false, edge-clamped) of a feature map
/// `(fh, fw)` at image pixel `(u, v)` of an `(ih, iw)` image.
pub fn bilinear_taps(u: f64, v: f64, image: (usize, usize), feature: (usize, usize)) -> [(usize, f64); 4] {
    let axis = |x: f64, n_img: usize, n_feat: usize| -> (usize, usize, f64) {
        let f = x * n_feat as f64 / n_img as f64 - 0.5;
        let f = f.clamp(0.0, (n_feat - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n_feat - 1);
        (i0, i1, f - i0 as f64)
    };
    let (x0, x1, fx) = axis(u, image.1, feature.1);
    let (y0, y1, fy) = axis(v, image.0, feature.0);
    let w = feature.1;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Depth-weighted average of bilinearly sampled features `[C, fh, fw]`.
/// Returns the zero vector and `true` when no sample is valid.
pub fn aggregate_value<T: Scalar>(
    samples: &RaySamples,
    feature: &Tensor<T>,
    image: (usize, usize),
    tau: f64,
) -> (Vec<T>, bool) {
    let (c, fh, fw) = (feature.dim(0), feature.dim(1), feature.dim(2));
    let w = depth_weights(samples, tau);
    let total: f64 = w.iter().sum();
    let mut out = vec![T::zero(); c];
    if total == 0.0 {
        return (out, true);
    }
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let [u, v] = samples.proj[k];
        for (off, bw) in bilinear_taps(u, v, image, (fh, fw)) {
            let s = T::lit(wk / total * bw);
            for (ch, o) in out.iter_mut().enumerate() {
                *o += s * feature.data()[ch * fh * fw + off];
            }
        }
    }
    (out, false)
}

/// `(p, sin(2^l pi p_j), cos(2^l pi p_j))`: the input first, then per
/// coordinate `j` the `L` sin/cos pairs.
pub fn fourier_encode(p: &[f64; 3], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * bands + 3);
    out.extend_from_slice(p);
    for &x in p {
        for l in 0..bands {
            let a = (1u64 << l) as f64 * std::f64::consts::PI * x;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Precomputed sampling geometry for one range grid and one camera rig.
#[derive(Debug, Clone)]
pub struct AlignmentPlan {
    pub sensor: SensorSpec,
    pub gather: Arc<GatherPlan>,
    /// `ln w_k` per `(pixel, sample)`; 0 where invalid.
    pub log_prior: Vec<f64>,
    pub valid: Vec<bool>,
    /// Pixels with no valid sample in any view.
    pub unconditioned: Vec<bool>,
    /// Fourier embedding of `Ray(u, v) / d_max`, `[P, 6L+3]`.
    pub embedding: Tensor<f64>,
}

impl AlignmentPlan {
    /// Samples are ordered view-major within each pixel: `[view][k]`.
    pub fn build(sensor: &SensorSpec, views: &[ViewGeometry], params: &AlignmentParams) -> Result<Self> {
        sensor.validate()?;
        params.validate()?;
        if views.is_empty() {
            return Err(invalid("alignment needs at least one view"));
        }
        let k = params.samples;
        let s = k * views.len();
        let p = sensor.pixels();
        let mut taps = Vec::with_capacity(p * s * 4);
        let mut log_prior = vec![0.0; p * s];
        let mut valid = vec![false; p * s];
        let mut unconditioned = vec![true; p];
        let mut embedding = Tensor::zeros(&[p, params.embedding_dim()]);
        let dim = params.embedding_dim();
        for row in 0..sensor.h {
            for col in 0..sensor.w {
                let pi = row * sensor.w + col;
                let ray = ray_direction_unchecked(col, row, sensor);
                let r = ray.map(|c| c / sensor.d_max);
                embedding.data_mut()[pi * dim..(pi + 1) * dim]
                    .copy_from_slice(&fourier_encode(&r, params.bands));
                for (vi, view) in views.iter().enumerate() {
                    let rs = sample_along(&ray, sensor, params, &view.calib, view.image);
                    for ki in 0..k {
                        let slot = pi * s + vi * k + ki;
                        if rs.mask[ki] {
                            valid[slot] = true;
                            unconditioned[pi] = false;
                            log_prior[slot] = -rs.depths[ki] / params.tau;
                            let [u, v] = rs.proj[ki];
                            for (off, w) in bilinear_taps(u, v, view.image, view.feature) {
                                taps.push(Tap {
                                    view: vi as u32,
                                    offset: off as u32,
                                    weight: w,
                                });
                            }
                        } else {
                            taps.extend(std::iter::repeat(Tap { view: vi as u32, offset: 0, weight: 0.0 }).take(4));
                        }
                    }
                }
            }
        }
        Ok(Self {
            sensor: *sensor,
            gather: Arc::new(GatherPlan {
                points: p,
                samples: s,
                sources: views.iter().map(|v| v.feature).collect(),
                taps,
            }),
            log_prior,
            valid,
            unconditioned,
            embedding,
        })
    }

    pub fn samples_per_pixel(&self) -> usize {
        self.gather.samples
    }

    pub fn conditioned_fraction(&self) -> f64 {
        self.unconditioned.iter().filter(|&&u| !u).count() as f64 / self.unconditioned.len() as f64
    }
}

/// Learnable part of one alignment site (one UNet scale).
#[derive(Debug, Clone, PartialEq)]
pub struct Gcma {
    pub params: AlignmentParams,
    pub width: usize,
    prefix: String,
}

impl Gcma {
    pub fn new(params: AlignmentParams, width: usize, prefix: &str) -> Result<Self> {
        params.validate()?;
        if width == 0 || width % params.heads != 0 {
            return Err(invalid(format!(
                "width {width} must be a positive multiple of {} heads",
                params.heads
            )));
        }
        Ok(Self {
            params,
            width,
            prefix: prefix.to_string(),
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.params.heads
    }

    /// Query MLP `(6L+3) -> C -> C` with a zero last layer, and a zero 1x1
    /// injection convolution.
    pub fn init_params<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.init_linear(&self.name("mlp1"), self.params.embedding_dim(), self.width, rng);
        store.init_zero_linear(&self.name("mlp2"), self.width, self.width);
        store.init_zero_conv(&self.name("out"), self.width, self.width, 1);
    }

    /// `Q = R + MLP(gamma(Ray / d_max))`, as tokens `[B, P, C]`.
    pub fn build_query<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        range_tokens: Var,
        plan: &AlignmentPlan,
    ) -> Result<Var> {
        let emb = g.constant(plan.embedding.cast());
        let h = store.linear(g, &self.name("mlp1"), emb)?;
        let h = g.silu(h);
        let pos = store.linear(g, &self.name("mlp2"), h)?;
        Ok(g.add_broadcast(range_tokens, pos))
    }

    /// Candidate features `[B, P, S, C]` sampled from per-view sources
    /// `[B, C, fh, fw]`.
    pub fn gather<T: Scalar>(&self, g: &mut Graph<T>, sources: &[Var], plan: &AlignmentPlan) -> Result<Var> {
        if sources.len() != plan.gather.sources.len() {
            return Err(Error::Calibration(format!(
                "plan has {} views, got {} feature maps",
                plan.gather.sources.len(),
                sources.len()
            )));
        }
        for (&s, &(fh, fw)) in sources.iter().zip(&plan.gather.sources) {
            let sh = g.value(s).shape();
            if sh[1] != self.width || sh[2] != fh || sh[3] != fw {
                return Err(Error::Shape(format!(
                    "feature map {:?} does not match plan ({}, {fh}, {fw})",
                    sh, self.width
                )));
            }
        }
        Ok(g.gather(sources, plan.gather.clone()))
    }

    /// Masked multi-head attention with keys equal to values.
    pub fn cross_attend<T: Scalar>(&self, g: &mut Graph<T>, q: Var, kv: Var, plan: &AlignmentPlan) -> Var {
        let prior: Vec<T> = plan.log_prior.iter().map(|&x| T::lit(x)).collect();
        g.prior_attention(q, kv, &prior, &plan.valid, self.params.heads)
    }

    /// Depth-weighted average of the candidates: the zero-query case of
    /// [`Gcma::cross_attend`], as tokens `[B, P, C]`.
    pub fn aggregate<T: Scalar>(&self, g: &mut Graph<T>, kv: Var, plan: &AlignmentPlan) -> Var {
        let sh = g.value(kv).shape().to_vec();
        let zero_q = g.constant(Tensor::zeros(&[sh[0], sh[1], sh[3]]));
        let prior: Vec<T> = plan.log_prior.iter().map(|&x| T::lit(x)).collect();
        g.prior_attention(zero_q, kv, &prior, &plan.valid, 1)
    }

    /// `R + ZeroConv1x1(R~)` on `[B, C, h, w]` maps.
    pub fn inject<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, r: Var, aligned: Var) -> Result<Var> {
        let z = store.conv(g, &self.name("out"), aligned, ConvSpec::same(1, false))?;
        Ok(g.add(r, z))
    }

    /// Full site: `r` is the range feature map `[B, C, h, w]` on the plan's
    /// grid, `sources` one conditioning map per view.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        r: Var,
        sources: &[Var],
        plan: &AlignmentPlan,
    ) -> Result<Var> {
        let (h, w) = {
            let s = g.value(r).shape();
            (s[2], s[3])
        };
        if (h, w) != (plan.sensor.h, plan.sensor.w) {
            return Err(Error::Shape(format!(
                "range map {h}x{w} does not match plan grid {}x{}",
                plan.sensor.h, plan.sensor.w
            )));
        }
        let tokens = g.to_tokens(r);
        let q = self.build_query(g, store, tokens, plan)?;
        let kv = self.gather(g, sources, plan)?;
        let att = self.cross_attend(g, q, kv, plan);
        let aligned = g.from_tokens(att, h, w);
        self.inject(g, store, r, aligned)
    }
}
