//! Range images <-> network tensors.
//!
//! Depth `d > 0` maps to `2 log(1+d)/log(1+d_max) - 1`; no-return maps to
//! `-1`. Intensity maps linearly to `[-1, 1]`. On decode, depth values
//! below [`NO_RETURN_THRESHOLD`] or below `d_min` become no-return.

use crate::error::{Error, Result};
use crate::rangeview::{RangeImage, SensorSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NO_RETURN_THRESHOLD: f64 = -0.95;

pub fn normalize_depth(d: f64, d_max: f64) -> f64 {
    if d <= 0.0 {
        -1.0
    } else {
        2.0 * d.ln_1p() / d_max.ln_1p() - 1.0
    }
}

pub fn denormalize_depth(n: f64, sensor: &SensorSpec) -> f64 {
    if !(n >= NO_RETURN_THRESHOLD) {
        return 0.0;
    }
    let d = (0.5 * (n + 1.0) * sensor.d_max.ln_1p()).exp_m1().clamp(0.0, sensor.d_max);
    if d < sensor.d_min {
        0.0
    } else {
        d
    }
}

/// `[2, h, w]` tensor: channel 0 depth, channel 1 intensity.
pub fn encode_range<T: Scalar>(r: &RangeImage) -> Tensor<T> {
    let n = r.sensor.pixels();
    let mut data = Vec::with_capacity(2 * n);
    data.extend(r.depth.iter().map(|&d| T::lit(normalize_depth(d as f64, r.sensor.d_max))));
    data.extend(r.intensity.iter().map(|&e| T::lit(2.0 * e as f64 - 1.0)));
    Tensor::from_vec(&[2, r.sensor.h, r.sensor.w], data).expect("buffer sized from sensor")
}

/// Inverse of [`encode_range`] with clamping; accepts `[2,h,w]` or `[1,2,h,w]`.
pub fn decode_range<T: Scalar>(x: &Tensor<T>, sensor: &SensorSpec) -> Result<RangeImage> {
    let n = sensor.pixels();
    if x.numel() != 2 * n || x.shape().last() != Some(&sensor.w) {
        return Err(Error::Shape(format!(
            "tensor {:?} does not hold a 2x{}x{} range image",
            x.shape(),
            sensor.h,
            sensor.w
        )));
    }
    let mut out = RangeImage::empty(*sensor);
    for i in 0..n {
        let dn = x.data()[i].to_f64_lossy();
        let d = if dn.is_finite() { denormalize_depth(dn, sensor) } else { 0.0 };
        // f32 rounding can push a clamped value past d_max
        let d32 = (d as f32).min(sensor.d_max as f32);
        if d32 > 0.0 && (d32 as f64) >= sensor.d_min {
            out.depth[i] = d32;
            let e = x.data()[n + i].to_f64_lossy();
            out.intensity[i] = if e.is_finite() { (0.5 * (e + 1.0)).clamp(0.0, 1.0) as f32 } else { 0.0 };
        }
    }
    Ok(out)
}
