//! Panoramic UNet noise predictor.
//!
//! Four scales, one residual block per scale on each path, 3x3 convolutions
//! that wrap around in azimuth and zero-pad in elevation. Camera features
//! enter at every enabled scale through GCMA after the down-path block; a
//! global self-attention block (PFC) sits between the two bottleneck blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cacm::{Cacm, CacmConfig, DEFAULT_DELTA};
use crate::encoders::{level_size, EncoderConfig, FeaturePyramid, LEVELS};
use crate::error::{invalid, Error, Result};
use crate::gcma::{AlignmentParams, AlignmentPlan, Gcma, ViewGeometry};
use crate::kernels::ConvSpec;
use crate::nn::{norm_groups, ParamStore};
use crate::rangeview::{Calibration, SensorSpec};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SCALES: usize = LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base: usize,
    pub mults: [usize; SCALES],
    pub pfc: bool,
    pub pfc_heads: usize,
    /// Scales that receive camera features.
    pub gcma: [bool; SCALES],
    pub max_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base: 16,
            mults: [1, 2, 2, 4],
            pfc: true,
            pfc_heads: 2,
            gcma: [true; SCALES],
            max_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn widths(&self) -> [usize; SCALES] {
        self.mults.map(|m| m * self.base)
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base
    }

    pub fn uses_gcma(&self) -> bool {
        self.gcma.iter().any(|&g| g)
    }

    /// Same backbone with every conditioning path and PFC removed.
    pub fn plain(&self) -> Self {
        Self {
            pfc: false,
            gcma: [false; SCALES],
            ..*self
        }
    }
}

/// Frozen-encoder and alignment settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub semantic: EncoderConfig,
    pub depth: EncoderConfig,
    pub align: AlignmentParams,
    pub delta: f64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            semantic: EncoderConfig::semantic(),
            depth: EncoderConfig::depth(),
            align: AlignmentParams::default(),
            delta: DEFAULT_DELTA,
        }
    }
}

/// One calibrated camera of the conditioning rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigCamera {
    pub calib: Calibration,
    pub height: usize,
    pub width: usize,
}

/// Alignment plans for one rig, one per scale (`None` where disabled).
#[derive(Debug, Clone)]
pub struct RigPlans {
    pub cameras: Vec<RigCamera>,
    pub plans: Vec<Option<AlignmentPlan>>,
}

/// Encoder pyramids of a batch, one entry per view. Levels are
/// `[B, C, H_i, W_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondBatch<T: Scalar> {
    pub semantic: Vec<Vec<Tensor<T>>>,
    pub depth: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> CondBatch<T> {
    /// Stacks per-sample pyramids: `items[b][view] = (semantic, depth)`.
    pub fn stack(items: &[Vec<(&FeaturePyramid<f32>, &FeaturePyramid<f32>)>]) -> Result<Self> {
        let views = items.first().map_or(0, |v| v.len());
        if items.iter().any(|v| v.len() != views) {
            return Err(Error::Shape("every batch item needs the same views".into()));
        }
        let mut semantic = Vec::with_capacity(views);
        let mut depth = Vec::with_capacity(views);
        for v in 0..views {
            let mut s_levels = Vec::with_capacity(LEVELS);
            let mut d_levels = Vec::with_capacity(LEVELS);
            for l in 0..LEVELS {
                let s: Vec<Tensor<T>> = items.iter().map(|it| it[v].0.levels[l].cast()).collect();
                let d: Vec<Tensor<T>> = items.iter().map(|it| it[v].1.levels[l].cast()).collect();
                s_levels.push(Tensor::stack(&s)?);
                d_levels.push(Tensor::stack(&d)?);
            }
            semantic.push(s_levels);
            depth.push(d_levels);
        }
        Ok(Self { semantic, depth })
    }

    pub fn views(&self) -> usize {
        self.semantic.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub sensor: SensorSpec,
    pub cond: ConditioningConfig,
    cacm: Option<Cacm>,
    sites: Vec<Option<Gcma>>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, sensor: SensorSpec, cond: ConditioningConfig) -> Result<Self> {
        sensor.validate()?;
        cond.align.validate()?;
        let div = 1 << (SCALES - 1);
        if sensor.h % div != 0 || sensor.w % div != 0 {
            return Err(invalid(format!("range grid must be divisible by {div}")));
        }
        if let Some(coarsest) = (0..SCALES).rev().find(|&s| config.gcma[s]) {
            sensor.downscaled(1 << coarsest).validate()?;
        }
        if config.base == 0 || config.mults.contains(&0) {
            return Err(invalid("denoiser widths must be positive"));
        }
        let widths = config.widths();
        if config.pfc && widths[SCALES - 1] % config.pfc_heads.max(1) != 0 {
            return Err(invalid("bottleneck width must split into PFC heads"));
        }
        let cacm = if config.uses_gcma() {
            Some(Cacm::new(
                CacmConfig {
                    semantic_widths: cond.semantic.widths,
                    depth_widths: cond.depth.widths,
                    shared_widths: widths,
                    delta: cond.delta,
                },
                "cacm",
            )?)
        } else {
            None
        };
        let sites = (0..SCALES)
            .map(|s| {
                config.gcma[s]
                    .then(|| Gcma::new(cond.align, widths[s], &format!("gcma{s}")))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            sensor,
            cond,
            cacm,
            sites,
        })
    }

    pub fn widths(&self) -> [usize; SCALES] {
        self.config.widths()
    }

    fn groups(&self, c: usize) -> usize {
        norm_groups(c, self.config.max_groups)
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = stream_rng(seed, streams::MODEL_INIT);
        let mut p = ParamStore::new();
        let w = self.widths();
        let td = self.config.time_dim();
        p.init_linear("time.l1", self.config.base, td, &mut rng);
        p.init_linear("time.l2", td, td, &mut rng);
        p.init_conv("conv_in", 2, w[0], 3, &mut rng);
        for s in 0..SCALES {
            self.init_res(&mut p, &format!("down{s}"), w[s], w[s], &mut rng);
            if s + 1 < SCALES {
                p.init_conv(&format!("ds{s}"), w[s], w[s + 1], 3, &mut rng);
            }
        }
        let c = w[SCALES - 1];
        self.init_res(&mut p, "mid1", c, c, &mut rng);
        self.init_res(&mut p, "mid2", c, c, &mut rng);
        for s in (0..SCALES).rev() {
            self.init_res(&mut p, &format!("up{s}"), 2 * w[s], w[s], &mut rng);
            if s > 0 {
                p.init_conv(&format!("us{s}"), w[s], w[s - 1], 3, &mut rng);
            }
        }
        p.init_norm("out.norm", w[0]);
        p.init_conv("out.conv", w[0], 2, 3, &mut rng);
        // conditioning and PFC draw last so the backbone matches the plain model
        if self.config.pfc {
            p.init_norm("pfc.norm", c);
            for n in ["q", "k", "v"] {
                p.init_linear(&format!("pfc.{n}"), c, c, &mut rng);
            }
            p.init_zero_linear("pfc.o", c, c);
        }
        if let Some(cacm) = &self.cacm {
            cacm.init_levels(&mut p, &mut rng, &self.config.gcma);
        }
        for site in self.sites.iter().flatten() {
            site.init_params(&mut p, &mut rng);
        }
        p
    }

    fn init_res<T: Scalar, R: Rng>(&self, p: &mut ParamStore<T>, name: &str, ci: usize, co: usize, rng: &mut R) {
        p.init_norm(&format!("{name}.n1"), ci);
        p.init_conv(&format!("{name}.c1"), ci, co, 3, rng);
        p.init_linear(&format!("{name}.t"), self.config.time_dim(), co, rng);
        p.init_norm(&format!("{name}.n2"), co);
        p.init_conv(&format!("{name}.c2"), co, co, 3, rng);
        if ci != co {
            p.init_conv(&format!("{name}.skip"), ci, co, 1, rng);
        }
    }

    /// Alignment plans for a camera rig; views are sampled in the given order.
    pub fn plans(&self, cameras: &[RigCamera]) -> Result<RigPlans> {
        if !self.config.uses_gcma() {
            return Ok(RigPlans {
                cameras: cameras.to_vec(),
                plans: vec![None; SCALES],
            });
        }
        if cameras.is_empty() {
            return Err(Error::Calibration("conditioning needs at least one calibrated view".into()));
        }
        let plans = (0..SCALES)
            .map(|s| {
                if !self.config.gcma[s] {
                    return Ok(None);
                }
                let grid = self.sensor.downscaled(1 << s);
                let views: Vec<ViewGeometry> = cameras
                    .iter()
                    .map(|c| ViewGeometry {
                        calib: c.calib,
                        image: (c.height, c.width),
                        feature: level_size(c.height, c.width, s),
                    })
                    .collect();
                AlignmentPlan::build(&grid, &views, &self.cond.align).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RigPlans {
            cameras: cameras.to_vec(),
            plans,
        })
    }

    fn time_embedding<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, t: &[usize]) -> Result<Var> {
        let dim = self.config.base;
        let half = dim / 2;
        let mut e = Tensor::<T>::zeros(&[t.len(), dim]);
        for (b, &tb) in t.iter().enumerate() {
            for i in 0..half {
                let f = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
                let a = tb as f64 * f;
                e.data_mut()[b * dim + i] = T::lit(a.sin());
                e.data_mut()[b * dim + half + i] = T::lit(a.cos());
            }
        }
        let e = g.constant(e);
        let h = p.linear(g, "time.l1", e)?;
        let h = g.silu(h);
        let h = p.linear(g, "time.l2", h)?;
        Ok(g.silu(h))
    }

    fn res_block<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var, temb: Var) -> Result<Var> {
        let wrap = ConvSpec::same(3, true);
        let ci = g.value(x).dim(1);
        let h = p.norm(g, &format!("{name}.n1"), x, self.groups(ci))?;
        let h = g.silu(h);
        let h = p.conv(g, &format!("{name}.c1"), h, wrap)?;
        let co = g.value(h).dim(1);
        let te = p.linear(g, &format!("{name}.t"), temb)?;
        let h = g.add_channel(h, te);
        let h = p.norm(g, &format!("{name}.n2"), h, self.groups(co))?;
        let h = g.silu(h);
        let h = p.conv(g, &format!("{name}.c2"), h, wrap)?;
        let skip = if ci != co {
            p.conv(g, &format!("{name}.skip"), x, ConvSpec::same(1, true))?
        } else {
            x
        };
        Ok(g.add(skip, h))
    }

    /// `R + Out(Attn(Norm(R)))` over all bottleneck positions.
    pub fn pfc<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let (h, w, c) = {
            let s = g.value(x).shape();
            (s[2], s[3], s[1])
        };
        let n = p.norm(g, "pfc.norm", x, self.groups(c))?;
        let tok = g.to_tokens(n);
        let q = p.linear(g, "pfc.q", tok)?;
        let k = p.linear(g, "pfc.k", tok)?;
        let v = p.linear(g, "pfc.v", tok)?;
        let a = g.attention(q, k, v, self.config.pfc_heads);
        let o = p.linear(g, "pfc.o", a)?;
        let o = g.from_tokens(o, h, w);
        Ok(g.add(x, o))
    }

    /// Predicted noise `[B, 2, h, w]` for `x_t` at timesteps `t`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        t: &[usize],
        cond: Option<(&CondBatch<T>, &RigPlans)>,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != 2 || shape[2] != self.sensor.h || shape[3] != self.sensor.w {
            return Err(Error::Shape(format!(
                "expected [B, 2, {}, {}], got {shape:?}",
                self.sensor.h, self.sensor.w
            )));
        }
        if t.len() != shape[0] {
            return Err(Error::Shape("one timestep per batch item".into()));
        }
        let sources = match (&self.cacm, cond) {
            (Some(cacm), Some((batch, plans))) => Some(self.fused_sources(g, p, cacm, batch, plans, shape[0])?),
            (Some(_), None) => {
                return Err(Error::Calibration("model is conditional but no views were given".into()))
            }
            (None, _) => None,
        };
        let temb = self.time_embedding(g, p, t)?;
        let wrap = ConvSpec::same(3, true);
        let mut h = p.conv(g, "conv_in", x, wrap)?;
        let mut skips = Vec::with_capacity(SCALES);
        for s in 0..SCALES {
            h = self.res_block(g, p, &format!("down{s}"), h, temb)?;
            if let (Some(site), Some(src)) = (&self.sites[s], &sources) {
                let plan = cond
                    .and_then(|(_, rp)| rp.plans[s].as_ref())
                    .ok_or_else(|| Error::Calibration(format!("no alignment plan for scale {s}")))?;
                h = site.forward(g, p, h, &src[s], plan)?;
            }
            skips.push(h);
            if s + 1 < SCALES {
                h = p.conv(g, &format!("ds{s}"), h, ConvSpec::down(3, true))?;
            }
        }
        h = self.res_block(g, p, "mid1", h, temb)?;
        if self.config.pfc {
            h = self.pfc(g, p, h)?;
        }
        h = self.res_block(g, p, "mid2", h, temb)?;
        for s in (0..SCALES).rev() {
            h = g.concat_channels(h, skips[s]);
            h = self.res_block(g, p, &format!("up{s}"), h, temb)?;
            if s > 0 {
                h = g.upsample2(h);
                h = p.conv(g, &format!("us{s}"), h, wrap)?;
            }
        }
        let c = g.value(h).dim(1);
        h = p.norm(g, "out.norm", h, self.groups(c))?;
        h = g.silu(h);
        p.conv(g, "out.conv", h, wrap)
    }

    /// Fused camera features per scale, one map per view.
    fn fused_sources<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        cacm: &Cacm,
        batch: &CondBatch<T>,
        plans: &RigPlans,
        b: usize,
    ) -> Result<Vec<Vec<Var>>> {
        if batch.views() != plans.cameras.len() {
            return Err(Error::Calibration(format!(
                "{} conditioning views but {} calibrated cameras",
                batch.views(),
                plans.cameras.len()
            )));
        }
        let mut out = vec![Vec::new(); SCALES];
        for v in 0..batch.views() {
            for s in 0..SCALES {
                if !self.config.gcma[s] {
                    continue;
                }
                let st = &batch.semantic[v][s];
                let dt = &batch.depth[v][s];
                if st.dim(0) != b || dt.dim(0) != b {
                    return Err(Error::Shape("conditioning batch size differs from input".into()));
                }
                let fs = g.constant(st.clone());
                let fd = g.constant(dt.clone());
                let fused = cacm.forward_level(g, p, s, fs, fd)?;
                out[s].push(fused.fused);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderPair;
    use crate::synthworld::{default_sensor, generate_sample, Weather, WorldConfig};

    pub(crate) fn tiny() -> (Denoiser, SensorSpec) {
        let sensor = SensorSpec { h: 16, w: 32, ..default_sensor() };
        let config = DenoiserConfig {
            base: 8,
            mults: [1, 1, 2, 2],
            pfc: true,
            pfc_heads: 2,
            gcma: [true; SCALES],
            max_groups: 4,
        };
        let cond = ConditioningConfig {
            semantic: EncoderConfig { widths: [4, 4, 6, 6], stem: 4, seed: 1 },
            depth: EncoderConfig { widths: [3, 3, 5, 5], stem: 4, seed: 2 },
            align: AlignmentParams { samples: 4, bands: 2, heads: 2, tau: 20.0 },
            delta: DEFAULT_DELTA,
        };
        (Denoiser::new(config, sensor, cond).unwrap(), sensor)
    }

    #[test]
    fn plain_backbone_param_count_matches() {
        let (full, sensor) = tiny();
        let plain = Denoiser::new(full.config.plain(), sensor, full.cond).unwrap();
        let pf = full.init_params::<f64>(0);
        let pp = plain.init_params::<f64>(0);
        let extra = pf.count_with_prefix("gcma") + pf.count_with_prefix("cacm") + pf.count_with_prefix("pfc");
        assert!(extra > 0);
        assert_eq!(pf.count() - extra, pp.count());
        for (name, t) in pp.iter() {
            assert_eq!(pf.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let world = WorldConfig { image_height: 32, image_width: 32, ..WorldConfig::default() };
        let (model, _) = tiny();
        let enc = EncoderPair::new(model.cond.semantic, model.cond.depth).unwrap();
        let sample = generate_sample(&world, 0, Weather::Clean).unwrap();
        let cam = &world.rig().unwrap()[0];
        let plans = model
            .plans(&[RigCamera { calib: cam.calib, height: 32, width: 32 }])
            .unwrap();
        let (s, d) = enc.encode(&sample.views[0].view).unwrap();
        let batch = CondBatch::<f64>::stack(&[vec![(&s, &d)], vec![(&s, &d)]]).unwrap();
        let p = model.init_params::<f64>(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 16, 32]));
        let y = model.forward(&mut g, &p, x, &[1, 500], Some((&batch, &plans))).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 16, 32]);
        // conditional model refuses to run without views
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 16, 32]));
        assert!(model.forward(&mut g, &p, x, &[1], None).is_err());
    }
}
