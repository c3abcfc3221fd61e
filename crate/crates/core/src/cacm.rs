//! Confidence-aware fusion of the semantic and depth pyramids.
//!
//! Per level: the depth map is bilinearly resized onto the semantic grid,
//! both branches are projected to a shared width by 1x1 convolutions, each
//! branch gets a sigmoid confidence from a 3x3 convolution, and the two are
//! blended by normalized confidence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::LEVELS;
use crate::error::{invalid, Error, Result};
use crate::kernels::{sigmoid, ConvSpec};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacmConfig {
    pub semantic_widths: [usize; LEVELS],
    pub depth_widths: [usize; LEVELS],
    pub shared_widths: [usize; LEVELS],
    pub delta: f64,
}

impl CacmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(invalid(format!("fusion delta must be > 0, got {}", self.delta)));
        }
        if self
            .semantic_widths
            .iter()
            .chain(&self.depth_widths)
            .chain(&self.shared_widths)
            .any(|&w| w == 0)
        {
            return Err(invalid("CACM widths must be positive"));
        }
        Ok(())
    }
}

/// Fused level plus the confidences that produced it.
#[derive(Debug, Clone, Copy)]
pub struct FusedLevel {
    pub fused: Var,
    pub conf_s: Var,
    pub conf_d: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cacm {
    pub config: CacmConfig,
    prefix: String,
}

impl Cacm {
    pub fn new(config: CacmConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
        })
    }

    fn name(&self, part: &str, level: usize) -> String {
        format!("{}.{part}{level}", self.prefix)
    }

    /// 1x1 projections get He init; confidence estimators start at zero so
    /// both branches begin equally weighted.
    pub fn init_params<T: Scalar, R: Rng>(&self, params: &mut ParamStore<T>, rng: &mut R) {
        self.init_levels(params, rng, &[true; LEVELS]);
    }

    /// [`Cacm::init_params`] restricted to the levels marked in `enabled`.
    pub fn init_levels<T: Scalar, R: Rng>(&self, params: &mut ParamStore<T>, rng: &mut R, enabled: &[bool; LEVELS]) {
        let c = &self.config;
        for i in (0..LEVELS).filter(|&i| enabled[i]) {
            params.init_conv(&self.name("proj_s", i), c.semantic_widths[i], c.shared_widths[i], 1, rng);
            params.init_conv(&self.name("proj_d", i), c.depth_widths[i], c.shared_widths[i], 1, rng);
            params.init_zero_conv(&self.name("conf_s", i), c.shared_widths[i], 1, 3);
            params.init_zero_conv(&self.name("conf_d", i), c.shared_widths[i], 1, 3);
        }
    }

    /// Aligns a depth level `[B,Cd,h,w]` with a semantic level `[B,Cs,H,W]`
    /// and projects both to the shared width.
    pub fn project_to_shared<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        level: usize,
        fs: Var,
        fd: Var,
    ) -> Result<(Var, Var)> {
        let (h, w) = {
            let s = g.value(fs).shape();
            (s[2], s[3])
        };
        let (dh, dw) = {
            let s = g.value(fd).shape();
            (s[2], s[3])
        };
        let fd = if (dh, dw) == (h, w) {
            fd
        } else {
            g.resize_bilinear(fd, h, w)
        };
        let pw = ConvSpec::same(1, false);
        let ss = params.conv(g, &self.name("proj_s", level), fs, pw)?;
        let sd = params.conv(g, &self.name("proj_d", level), fd, pw)?;
        Ok((ss, sd))
    }

    pub fn estimate_confidence<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        level: usize,
        ss: Var,
        sd: Var,
    ) -> Result<(Var, Var)> {
        let k3 = ConvSpec::same(3, false);
        let ls = params.conv(g, &self.name("conf_s", level), ss, k3)?;
        let ld = params.conv(g, &self.name("conf_d", level), sd, k3)?;
        Ok((g.sigmoid(ls), g.sigmoid(ld)))
    }

    /// Full path for all levels. Inputs are `[B,C,H,W]` per level.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        semantic: &[Var],
        depth: &[Var],
    ) -> Result<Vec<FusedLevel>> {
        if semantic.len() != LEVELS || depth.len() != LEVELS {
            return Err(Error::Shape(format!(
                "CACM needs {LEVELS} levels per branch, got {} and {}",
                semantic.len(),
                depth.len()
            )));
        }
        (0..LEVELS)
            .map(|i| self.forward_level(g, params, i, semantic[i], depth[i]))
            .collect()
    }

    pub fn forward_level<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        level: usize,
        fs: Var,
        fd: Var,
    ) -> Result<FusedLevel> {
        let (ss, sd) = self.project_to_shared(g, params, level, fs, fd)?;
        let (cs, cd) = self.estimate_confidence(g, params, level, ss, sd)?;
        let fused = g.fuse(ss, sd, cs, cd, T::lit(self.config.delta));
        Ok(FusedLevel {
            fused,
            conf_s: cs,
            conf_d: cd,
        })
    }
}

/// Normalized confidence blend on plain tensors. `fs`, `fd` are `[B,C,...]`
/// and the confidences `[B,1,...]`.
pub fn fuse<T: Scalar>(
    fs: &Tensor<T>,
    fd: &Tensor<T>,
    cs: &Tensor<T>,
    cd: &Tensor<T>,
    delta: f64,
) -> Result<Tensor<T>> {
    if !(delta > 0.0) {
        return Err(invalid(format!("fusion delta must be > 0, got {delta}")));
    }
    fuse_with(fs, fd, cs, cd, delta)
}

/// The `delta -> 0` limit of [`fuse`]; confidences must be strictly positive.
pub fn fuse_unregularized<T: Scalar>(
    fs: &Tensor<T>,
    fd: &Tensor<T>,
    cs: &Tensor<T>,
    cd: &Tensor<T>,
) -> Result<Tensor<T>> {
    if cs.data().iter().chain(cd.data()).any(|&c| !(c > T::zero())) {
        return Err(invalid("unregularized fusion needs positive confidences"));
    }
    fuse_with(fs, fd, cs, cd, 0.0)
}

fn fuse_with<T: Scalar>(
    fs: &Tensor<T>,
    fd: &Tensor<T>,
    cs: &Tensor<T>,
    cd: &Tensor<T>,
    delta: f64,
) -> Result<Tensor<T>> {
    if fs.shape() != fd.shape() || cs.shape() != cd.shape() {
        return Err(Error::Shape("fuse inputs must be aligned".into()));
    }
    let (b, c) = (fs.dim(0), fs.dim(1));
    let s = fs.numel() / (b * c).max(1);
    if cs.numel() != b * s {
        return Err(Error::Shape("confidences must be [B,1,...]".into()));
    }
    let mut g = Graph::new();
    let (a, d, x, y) = (
        g.constant(fs.clone()),
        g.constant(fd.clone()),
        g.constant(cs.clone()),
        g.constant(cd.clone()),
    );
    let out = g.fuse(a, d, x, y, T::lit(delta));
    Ok(g.value(out).clone())
}

/// Sigmoid confidence from raw logits; exposed for inspection tools.
pub fn confidence_from_logits<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    logits.map(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn small_config() -> CacmConfig {
        CacmConfig {
            semantic_widths: [3, 4, 4, 5],
            depth_widths: [2, 3, 3, 4],
            shared_widths: [4, 4, 6, 6],
            delta: DEFAULT_DELTA,
        }
    }

    #[test]
    fn nonpositive_delta_rejected() {
        let mut c = small_config();
        c.delta = 0.0;
        assert!(Cacm::new(c, "cacm").is_err());
        let t = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        assert!(fuse(&t, &t, &t, &t, 0.0).is_err());
        assert!(fuse(&t, &t, &t, &t, -1.0).is_err());
    }

    #[test]
    fn zero_estimator_gives_half_confidence() {
        let cacm = Cacm::new(small_config(), "cacm").unwrap();
        let mut params = ParamStore::<f64>::new();
        cacm.init_params(&mut params, &mut stream_rng(0, 0));
        let mut g = Graph::new();
        let mut rng = stream_rng(1, 0);
        let fs = g.constant(Tensor::randn(&[1, 3, 4, 6], 1.0, &mut rng));
        let fd = g.constant(Tensor::randn(&[1, 2, 2, 3], 1.0, &mut rng));
        let out = cacm.forward_level(&mut g, &params, 0, fs, fd).unwrap();
        assert!(g.value(out.conf_s).data().iter().all(|&c| c == 0.5));
        assert!(g.value(out.conf_d).data().iter().all(|&c| c == 0.5));
    }

    #[test]
    fn saturated_bias_drives_confidence_to_one() {
        let cacm = Cacm::new(small_config(), "cacm").unwrap();
        let mut params = ParamStore::<f64>::new();
        cacm.init_params(&mut params, &mut stream_rng(0, 0));
        params.get_mut("cacm.conf_s0.b").unwrap().data_mut()[0] = 50.0;
        let mut g = Graph::new();
        let fs = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let fd = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let out = cacm.forward_level(&mut g, &params, 0, fs, fd).unwrap();
        assert!(g.value(out.conf_s).data().iter().all(|&c| c > 1.0 - 1e-12));
    }

    #[test]
    fn constant_depth_level_stays_constant_after_resize() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 5], 1.75));
        let y = g.resize_bilinear(x, 8, 12);
        assert!(g.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
        let same = g.resize_bilinear(x, 3, 5);
        assert_eq!(g.value(same), g.value(x));
    }

    #[test]
    fn equal_and_one_sided_confidence_limits() {
        let mut rng = stream_rng(3, 0);
        let fs = Tensor::<f64>::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let fd = Tensor::<f64>::randn(&[1, 3, 2, 2], 1.0, &mut rng);
        let c = Tensor::full(&[1, 1, 2, 2], 0.3);
        let f = fuse_unregularized(&fs, &fd, &c, &c).unwrap();
        for i in 0..f.numel() {
            assert!((f.data()[i] - 0.5 * (fs.data()[i] + fd.data()[i])).abs() < 1e-15);
        }
        let tiny = Tensor::full(&[1, 1, 2, 2], 1e-300);
        let one = Tensor::full(&[1, 1, 2, 2], 1.0);
        let f = fuse_unregularized(&fs, &fd, &one, &tiny).unwrap();
        for i in 0..f.numel() {
            assert!((f.data()[i] - fs.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_path_gradients_match_finite_differences() {
        let cacm = Cacm::new(small_config(), "cacm").unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream_rng(5, 0);
        cacm.init_params(&mut store, &mut rng);
        // move estimators off zero so every branch of the blend is exercised
        for (name, t) in store.iter_mut() {
            if name.contains("conf") {
                *t = Tensor::randn(t.shape(), 0.3, &mut rng);
            }
        }
        let sizes = [(4, 6), (2, 3), (2, 2), (1, 1)];
        for i in 0..LEVELS {
            let (h, w) = sizes[i];
            let c = small_config();
            store.insert(format!("in.s{i}"), Tensor::randn(&[2, c.semantic_widths[i], h, w], 1.0, &mut rng));
            store.insert(format!("in.d{i}"), Tensor::randn(&[2, c.depth_widths[i], h.div_ceil(2), w.div_ceil(2)], 1.0, &mut rng));
        }
        let report = crate::gradcheck::check_store(&store, 12, 1e-6, |g, p| {
            let s: Vec<Var> = (0..LEVELS).map(|i| p.var(g, &format!("in.s{i}"))).collect::<Result<_>>()?;
            let d: Vec<Var> = (0..LEVELS).map(|i| p.var(g, &format!("in.d{i}"))).collect::<Result<_>>()?;
            let out = cacm.forward(g, p, &s, &d)?;
            // collapse the levels into one scalar-friendly output
            let mut acc = g.weighted_sum(out[0].fused, &Tensor::ones(g.value(out[0].fused).shape()));
            for l in &out[1..] {
                let ones = Tensor::ones(g.value(l.fused).shape());
                let v = g.weighted_sum(l.fused, &ones);
                acc = g.add(acc, v);
            }
            let sq = g.mul(acc, acc);
            Ok(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn fuse_is_convex_symmetric_and_shrinking(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, 0);
            let fs = Tensor::<f64>::randn(&[1, 2, 3, 3], 2.0, &mut rng);
            let fd = Tensor::<f64>::randn(&[1, 2, 3, 3], 2.0, &mut rng);
            let cs = Tensor::<f64>::uniform(&[1, 1, 3, 3], 1e-3, 1.0, &mut rng);
            let cd = Tensor::<f64>::uniform(&[1, 1, 3, 3], 1e-3, 1.0, &mut rng);
            let exact = fuse_unregularized(&fs, &fd, &cs, &cd).unwrap();
            let reg = fuse(&fs, &fd, &cs, &cd, DEFAULT_DELTA).unwrap();
            let swapped = fuse(&fd, &fs, &cd, &cs, DEFAULT_DELTA).unwrap();
            prop_assert_eq!(&reg, &swapped);
            for i in 0..exact.numel() {
                let (a, b) = (fs.data()[i], fd.data()[i]);
                let v = exact.data()[i];
                prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
                prop_assert!(reg.data()[i].abs() <= a.abs().max(b.abs()));
            }
        }
    }
}
