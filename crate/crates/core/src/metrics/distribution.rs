//! BEV occupancy histograms and the set divergences built on them.

use rand::seq::SliceRandom;

use crate::error::{invalid, Result};
use crate::rangeview::PointCloud;
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct BevHistogram {
    pub bins: usize,
    pub extent: f64,
    /// Row-major `[bins][bins]`, rows along `y`, columns along `x`.
    pub grid: Vec<f64>,
    /// No point fell inside the extent; `grid` is all zero.
    pub empty: bool,
}

/// Normalized 2-D histogram of `(x, y)` over `[-extent, extent]^2`.
pub fn bev_histogram(cloud: &PointCloud, bins: usize, extent: f64) -> Result<BevHistogram> {
    if !(extent > 0.0) || bins == 0 {
        return Err(invalid("BEV histogram needs extent > 0 and bins > 0"));
    }
    let mut grid = vec![0.0; bins * bins];
    let scale = bins as f64 / (2.0 * extent);
    let mut n = 0usize;
    for p in &cloud.points {
        let (x, y) = (p[0], p[1]);
        if x < -extent || x >= extent || y < -extent || y >= extent {
            continue;
        }
        let col = (((x + extent) * scale) as usize).min(bins - 1);
        let row = (((y + extent) * scale) as usize).min(bins - 1);
        grid[row * bins + col] += 1.0;
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        grid.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(BevHistogram {
        bins,
        extent,
        grid,
        empty: n == 0,
    })
}

/// Base-2 Jensen-Shannon divergence of two distributions on the same support.
pub fn jsd_distributions(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    let kl_to_mid = |a: f64, b: f64| {
        if a > 0.0 {
            a * (2.0 * a / (a + b)).log2()
        } else {
            0.0
        }
    };
    let v: f64 = p.iter().zip(q).map(|(&a, &b)| 0.5 * (kl_to_mid(a, b) + kl_to_mid(b, a))).sum();
    v.clamp(0.0, 1.0)
}

fn mean_histogram(set: &[BevHistogram]) -> Option<Vec<f64>> {
    let used: Vec<&BevHistogram> = set.iter().filter(|h| !h.empty).collect();
    let first = used.first()?;
    let mut m = vec![0.0; first.grid.len()];
    for h in &used {
        for (a, b) in m.iter_mut().zip(&h.grid) {
            *a += b;
        }
    }
    let inv = 1.0 / used.len() as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    Some(m)
}

/// JSD between the mean BEV histograms of two sets of clouds.
pub fn jsd(a: &[PointCloud], b: &[PointCloud], bins: usize, extent: f64) -> Result<f64> {
    let ha = a.iter().map(|c| bev_histogram(c, bins, extent)).collect::<Result<Vec<_>>>()?;
    let hb = b.iter().map(|c| bev_histogram(c, bins, extent)).collect::<Result<Vec<_>>>()?;
    let (Some(ma), Some(mb)) = (mean_histogram(&ha), mean_histogram(&hb)) else {
        return Err(invalid("JSD needs at least one nonempty cloud per set"));
    };
    Ok(jsd_distributions(&ma, &mb))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the pairwise Euclidean distances over the pooled samples,
/// ignoring exact duplicates; 1 if every pair coincides.
pub fn median_bandwidth(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let pool: Vec<&Vec<f64>> = xs.iter().chain(ys).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let v = sq_dist(pool[i], pool[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Unbiased squared MMD with kernel `exp(-|x-y|^2 / (2 sigma^2))`.
pub fn mmd_unbiased(xs: &[Vec<f64>], ys: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid("MMD bandwidth must be positive"));
    }
    let (m, n) = (xs.len(), ys.len());
    if m < 2 || n < 2 {
        return Err(invalid("unbiased MMD needs at least two samples per set"));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += k(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in xs {
        for y in ys {
            cross += k(x, y);
        }
    }
    Ok(within(xs) + within(ys) - 2.0 * cross / (m * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdResult {
    pub value: f64,
    pub bandwidth: f64,
}

/// MMD between per-cloud BEV histograms; `bandwidth = None` uses the
/// median heuristic.
pub fn mmd(a: &[PointCloud], b: &[PointCloud], bins: usize, extent: f64, bandwidth: Option<f64>) -> Result<MmdResult> {
    let flat = |set: &[PointCloud]| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|c| bev_histogram(c, bins, extent).map(|h| h.grid)).collect()
    };
    let (xa, xb) = (flat(a)?, flat(b)?);
    let bandwidth = bandwidth.unwrap_or_else(|| median_bandwidth(&xa, &xb));
    Ok(MmdResult {
        value: mmd_unbiased(&xa, &xb, bandwidth)?,
        bandwidth,
    })
}

/// Mean and standard error of the unbiased MMD over random equal splits of
/// one pool. Under a shared distribution the mean is zero in expectation.
pub fn mmd_split_statistics(pool: &[Vec<f64>], sigma: f64, splits: usize, seed: u64) -> Result<(f64, f64)> {
    if pool.len() < 4 || splits < 2 {
        return Err(invalid("split test needs at least 4 samples and 2 splits"));
    }
    let mut rng = stream_rng(seed, streams::SAMPLE);
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let half = pool.len() / 2;
    let mut vals = Vec::with_capacity(splits);
    for _ in 0..splits {
        idx.shuffle(&mut rng);
        let xs: Vec<Vec<f64>> = idx[..half].iter().map(|&i| pool[i].clone()).collect();
        let ys: Vec<Vec<f64>> = idx[half..2 * half].iter().map(|&i| pool[i].clone()).collect();
        vals.push(mmd_unbiased(&xs, &ys, sigma)?);
    }
    let mean = vals.iter().sum::<f64>() / splits as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (splits - 1) as f64;
    Ok((mean, (var / splits as f64).sqrt()))
}
