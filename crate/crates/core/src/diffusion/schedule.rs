use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear-beta DDPM schedule indexed by `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    betas: Vec<f64>,
    #[serde(skip)]
    alpha_bars: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid("need 0 < beta_start <= beta_end < 1"));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            t_max,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    /// Rebuilds derived tables after deserialization.
    pub fn rebuilt(&self) -> Result<Self> {
        Self::linear(self.t_max, self.beta_start, self.beta_end)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(invalid(format!("timestep {t} outside [1, {}]", self.t_max)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `X_t = sqrt(abar_t) X_0 + sqrt(1 - abar_t) eps`.
    pub fn forward_noise<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape("x0 and noise shapes differ".into()));
        }
        let ab = self.alpha_bar(t);
        let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Ok(x0.zip_map(eps, |x, e| a * x + s * e))
    }

    /// Evenly spaced subsequence of `steps` timesteps ending at `T`,
    /// ascending.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max {
            return Err(invalid(format!("sampling steps must lie in [1, {}]", self.t_max)));
        }
        let mut ts: Vec<usize> = (1..=steps)
            .map(|i| ((i as f64 * self.t_max as f64 / steps as f64).round() as usize).clamp(1, self.t_max))
            .collect();
        ts.dedup();
        Ok(ts)
    }
}
