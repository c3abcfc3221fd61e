//! Minimal raster plots: no axes text, fixed palettes.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use panogen_core::metrics::{MetricReport, Region};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([160, 160, 160]);

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// Loss against step on a log-scaled vertical axis.
pub fn loss_curve(points: &[(u64, f64)], path: &Path) -> Result<()> {
    let (w, h, pad) = (640u32, 360u32, 20.0);
    let mut img = RgbImage::from_pixel(w, h, BG);
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, l)| *l > 0.0 && l.is_finite()).map(|&(s, l)| (s as f64, l.log10())).collect();
    if pts.len() >= 2 {
        let (x_lo, x_hi) = (pts[0].0, pts[pts.len() - 1].0.max(pts[0].0 + 1.0));
        let y_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(y_lo + 1e-9);
        let to_px = |(x, y): (f64, f64)| {
            (
                pad + (x - x_lo) / (x_hi - x_lo) * (w as f64 - 2.0 * pad),
                h as f64 - pad - (y - y_lo) / (y_hi - y_lo) * (h as f64 - 2.0 * pad),
            )
        };
        line(&mut img, (pad, h as f64 - pad), (w as f64 - pad, h as f64 - pad), AXIS);
        line(&mut img, (pad, pad), (pad, h as f64 - pad), AXIS);
        for pair in pts.windows(2) {
            line(&mut img, to_px(pair[0]), to_px(pair[1]), Rgb([31, 119, 180]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn heat(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    Rgb([(255.0 * t.sqrt()) as u8, (255.0 * t * t) as u8, (255.0 * (1.0 - t) * t * 2.0).min(255.0) as u8])
}

/// Two BEV densities side by side, sharing one color scale (sqrt-compressed).
pub fn bev_pair(a: &[f64], b: &[f64], bins: usize, path: &Path) -> Result<()> {
    let scale = 4u32;
    let side = bins as u32 * scale;
    let gap = 8;
    let mut img = RgbImage::from_pixel(2 * side + gap, side, BG);
    let top = a.iter().chain(b).fold(0.0f64, |m, &v| m.max(v)).max(f64::MIN_POSITIVE);
    for (k, grid) in [a, b].into_iter().enumerate() {
        let x_off = k as u32 * (side + gap);
        for (i, &v) in grid.iter().enumerate() {
            // rows index y, columns x; forward (+x) points up, +y left
            let (iy, ix) = (i / bins, i % bins);
            let c = heat((v / top).sqrt());
            for dy in 0..scale {
                for dx in 0..scale {
                    let px = x_off + (bins - 1 - iy) as u32 * scale + dx;
                    let py = (bins - 1 - ix) as u32 * scale + dy;
                    img.put_pixel(px, py, c);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// One bar group per metric; bars are full / front / rear, each scaled by
/// the group's largest magnitude.
pub fn metric_bars(report: &MetricReport, path: &Path) -> Result<()> {
    let mut names: Vec<&str> = report.values.iter().map(|v| v.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    let colors = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44])];
    let (group_w, bar_w, h, pad) = (48u32, 12u32, 240u32, 10u32);
    let w = pad * 2 + group_w * names.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(w, h, BG);
    line(&mut img, (0.0, (h - pad) as f64), (w as f64, (h - pad) as f64), AXIS);
    for (g, name) in names.iter().enumerate() {
        let vals: Vec<Option<f64>> = Region::ALL.iter().map(|&r| report.get(name, r).filter(|v| v.is_finite())).collect();
        let top = vals.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for (k, v) in vals.iter().enumerate() {
            let Some(v) = v else { continue };
            let bar_h = ((v.abs() / top) * (h - 2 * pad) as f64) as u32;
            let x0 = pad + g as u32 * group_w + 4 + k as u32 * (bar_w + 2);
            for x in x0..x0 + bar_w {
                for y in (h - pad - bar_h)..(h - pad) {
                    img.put_pixel(x, y, colors[k]);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
