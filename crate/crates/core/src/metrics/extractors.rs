//! Frozen random-weight feature extractors for the Fréchet scores.
//!
//! Scores are only comparable under the same extractor; [`FeatureExtractor::id`]
//! names the architecture and seed and is recorded in reports.

use rand::Rng;

use crate::diffusion::normalize::encode_range;
use crate::error::{invalid, Result};
use crate::kernels::{self, ConvSpec};
use crate::rangeview::{unproject, PointCloud, RangeImage};
use crate::rng::{mix, stream_rng, streams};
use crate::tensor::Tensor;

use super::frechet::FeatureStats;

pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, range: &RangeImage) -> Result<Vec<f64>>;
}

/// Features of every sample, then their Gaussian moments.
pub fn extract_stats(extractor: &dyn FeatureExtractor, samples: &[RangeImage]) -> Result<FeatureStats> {
    let rows = samples.iter().map(|r| extractor.extract(r)).collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&rows)
}

fn he<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Three stride-2 azimuth-wrapping convolutions with SiLU, then global
/// mean and standard-deviation pooling of the last layer.
#[derive(Debug, Clone)]
pub struct RangeCnn {
    pub seed: u64,
    layers: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl RangeCnn {
    pub const WIDTHS: [usize; 3] = [16, 32, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = stream_rng(mix(seed, 1), streams::EXTRACTOR);
        let mut ci = 2;
        let layers = Self::WIDTHS
            .iter()
            .map(|&co| {
                let w = he(&[co, ci, 3, 3], ci * 9, &mut rng);
                let b = Tensor::randn(&[co], 0.1, &mut rng);
                ci = co;
                (w, b)
            })
            .collect();
        Self { seed, layers }
    }
}

impl FeatureExtractor for RangeCnn {
    fn id(&self) -> String {
        format!("range-cnn-{:?}-seed{}", Self::WIDTHS, self.seed)
    }

    fn dim(&self) -> usize {
        2 * Self::WIDTHS[2]
    }

    fn extract(&self, range: &RangeImage) -> Result<Vec<f64>> {
        let (h, w) = (range.sensor.h, range.sensor.w);
        let mut x = encode_range::<f64>(range).reshape(&[1, 2, h, w])?;
        for (wt, b) in &self.layers {
            x = kernels::conv2d(&x, wt, Some(b), ConvSpec::down(3, true)).map(kernels::silu);
        }
        let (c, n) = (x.dim(1), x.dim(2) * x.dim(3));
        let mut out = Vec::with_capacity(2 * c);
        let mut stds = Vec::with_capacity(c);
        for ch in x.data().chunks(n) {
            let m = ch.iter().sum::<f64>() / n as f64;
            let v = ch.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
            out.push(m);
            stds.push(v.sqrt());
        }
        out.extend(stds);
        Ok(out)
    }
}

/// Shared per-point MLP on `(x, y, z)/d_max` and intensity, then mean and
/// max pooling over points.
#[derive(Debug, Clone)]
pub struct PointMlp {
    pub seed: u64,
    w1: Tensor<f64>,
    b1: Tensor<f64>,
    w2: Tensor<f64>,
    b2: Tensor<f64>,
}

impl PointMlp {
    pub const HIDDEN: usize = 64;
    pub const OUT: usize = 32;

    pub fn new(seed: u64) -> Self {
        let mut rng = stream_rng(mix(seed, 2), streams::EXTRACTOR);
        Self {
            seed,
            w1: he(&[Self::HIDDEN, 4], 4, &mut rng),
            b1: Tensor::randn(&[Self::HIDDEN], 0.1, &mut rng),
            w2: he(&[Self::OUT, Self::HIDDEN], Self::HIDDEN, &mut rng),
            b2: Tensor::randn(&[Self::OUT], 0.1, &mut rng),
        }
    }

    pub fn extract_cloud(&self, cloud: &PointCloud, d_max: f64) -> Result<Vec<f64>> {
        if !(d_max > 0.0) {
            return Err(invalid("point features need d_max > 0"));
        }
        let n = cloud.points.len();
        if n == 0 {
            return Ok(vec![0.0; 2 * Self::OUT]);
        }
        let mut input = Vec::with_capacity(4 * n);
        for (p, &e) in cloud.points.iter().zip(&cloud.intensity) {
            input.extend([p[0] / d_max, p[1] / d_max, p[2] / d_max, e as f64]);
        }
        let x = Tensor::from_vec(&[n, 4], input)?;
        let h = kernels::linear(&x, &self.w1, Some(&self.b1)).map(kernels::silu);
        let y = kernels::linear(&h, &self.w2, Some(&self.b2)).map(kernels::silu);
        let mut mean = vec![0.0; Self::OUT];
        let mut max = vec![f64::NEG_INFINITY; Self::OUT];
        for row in y.data().chunks(Self::OUT) {
            for (k, &v) in row.iter().enumerate() {
                mean[k] += v;
                max[k] = max[k].max(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        mean.extend(max);
        Ok(mean)
    }
}

impl FeatureExtractor for PointMlp {
    fn id(&self) -> String {
        format!("point-mlp-{}x{}-seed{}", Self::HIDDEN, Self::OUT, self.seed)
    }

    fn dim(&self) -> usize {
        2 * Self::OUT
    }

    fn extract(&self, range: &RangeImage) -> Result<Vec<f64>> {
        self.extract_cloud(&unproject(range), range.sensor.d_max)
    }
}
