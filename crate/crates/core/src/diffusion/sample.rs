//! DDPM ancestral sampling on a respaced timestep subsequence.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rangeview::RangeImage;
use crate::rng::{mix, stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::normalize::decode_range;
use super::schedule::DiffusionSchedule;
use super::unet::{CondBatch, Denoiser, RigPlans};

/// Coefficients of one reverse step from `t` to `t_prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseStep {
    pub t: usize,
    pub abar: f64,
    pub abar_prev: f64,
    /// Effective beta of the respaced step, `1 - abar_t / abar_prev`.
    pub beta: f64,
}

impl ReverseStep {
    /// Coefficients `(c_x0, c_xt)` of the posterior mean.
    pub fn mean_coefs(&self) -> (f64, f64) {
        let denom = 1.0 - self.abar;
        (
            self.abar_prev.sqrt() * self.beta / denom,
            (1.0 - self.beta).sqrt() * (1.0 - self.abar_prev) / denom,
        )
    }

    pub fn variance(&self) -> f64 {
        self.beta * (1.0 - self.abar_prev) / (1.0 - self.abar)
    }
}

/// Reverse steps in sampling order (largest `t` first).
pub fn reverse_steps(schedule: &DiffusionSchedule, steps: usize) -> Result<Vec<ReverseStep>> {
    let ts = schedule.respaced(steps)?;
    let mut out = Vec::with_capacity(ts.len());
    for (i, &t) in ts.iter().enumerate().rev() {
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let (abar, abar_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        out.push(ReverseStep {
            t,
            abar,
            abar_prev,
            beta: 1.0 - abar / abar_prev,
        });
    }
    Ok(out)
}

/// Generates one range image per chain id. Chain `c` draws all its noise
/// from its own stream keyed by `(seed, c)`, so results do not depend on
/// how chains are batched. `cond` must hold one batch item per chain.
pub fn sample<T: Scalar>(
    model: &Denoiser,
    params: &ParamStore<T>,
    schedule: &DiffusionSchedule,
    cond: Option<(&CondBatch<T>, &RigPlans)>,
    seed: u64,
    chains: Range<u64>,
    steps: usize,
) -> Result<Vec<RangeImage>> {
    let n = (chains.end.saturating_sub(chains.start)) as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    if let Some((c, _)) = cond {
        if c.semantic.iter().flatten().any(|t| t.dim(0) != n) {
            return Err(Error::Shape(format!("conditioning batch must hold {n} items")));
        }
    }
    let (h, w) = (model.sensor.h, model.sensor.w);
    let per = 2 * h * w;
    let mut rngs: Vec<ChaCha8Rng> = chains.map(|c| stream_rng(mix(seed, c), streams::SAMPLE)).collect();
    let mut x: Vec<T> = Vec::with_capacity(n * per);
    for r in rngs.iter_mut() {
        x.extend((0..per).map(|_| T::lit(r.sample::<f64, _>(StandardNormal))));
    }
    let plan = reverse_steps(schedule, steps)?;
    for (k, step) in plan.iter().enumerate() {
        let xt = Tensor::from_vec(&[n, 2, h, w], x.clone())?;
        let mut g = Graph::new();
        let xv = g.constant(xt);
        let eps = model.forward(&mut g, params, xv, &vec![step.t; n], cond)?;
        let eps = g.value(eps).data();
        let (cx0, cxt) = step.mean_coefs();
        let (sa, sb) = (step.abar.sqrt(), (1.0 - step.abar).sqrt());
        let sigma = step.variance().sqrt();
        let last = k + 1 == plan.len();
        for (b, r) in rngs.iter_mut().enumerate() {
            for i in b * per..(b + 1) * per {
                let xi = x[i].to_f64_lossy();
                let x0 = ((xi - sb * eps[i].to_f64_lossy()) / sa).clamp(-1.0, 1.0);
                let mut v = cx0 * x0 + cxt * xi;
                if !last {
                    v += sigma * r.sample::<f64, _>(StandardNormal);
                }
                x[i] = T::lit(v);
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampler produced non-finite values".into()));
    }
    x.chunks(per)
        .map(|c| decode_range(&Tensor::from_vec(&[2, h, w], c.to_vec())?, &model.sensor))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_length_respacing_recovers_original_betas() {
        let s = DiffusionSchedule::default();
        let steps = reverse_steps(&s, 1000).unwrap();
        assert_eq!(steps.len(), 1000);
        for st in &steps {
            assert!((st.beta - s.beta(st.t)).abs() < 1e-12, "t={}", st.t);
        }
        assert_eq!(steps.last().unwrap().t, 1);
        assert_eq!(steps.last().unwrap().abar_prev, 1.0);
    }

    #[test]
    fn posterior_mean_reproduces_x0_at_consistent_input() {
        // x_t built noise-free from x0 on the last step (abar_prev = 1): mean = x0
        let s = DiffusionSchedule::default();
        let st = reverse_steps(&s, 10).unwrap().pop().unwrap();
        let x0 = 0.3;
        let xt = st.abar.sqrt() * x0;
        let (a, b) = st.mean_coefs();
        let m = a * x0 + b * xt;
        assert!((m - x0).abs() < 1e-12);
        assert!(st.variance().abs() < 1e-15);
    }

    #[test]
    fn respaced_variances_are_in_range() {
        let s = DiffusionSchedule::default();
        for st in reverse_steps(&s, 50).unwrap() {
            assert!(st.beta > 0.0 && st.beta < 1.0);
            assert!(st.variance() >= 0.0 && st.variance() <= st.beta);
        }
    }
}
