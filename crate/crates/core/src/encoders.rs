//! Frozen image encoders producing four-level feature pyramids.
//!
//! The built-in encoder is a small seeded CNN whose weights never change
//! after construction. External backbones plug in through [`PyramidEncoder`]
//! and [`ResizingAdapter`], which enforces the pyramid shape law.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::nn::ParamStore;
use crate::rangeview::{CameraView, RgbImage};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;
pub const MIN_IMAGE_SIDE: usize = 32;

/// Four feature maps `[C_i, H/2^(i+1), W/2^(i+1)]`, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
    pub view: String,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn widths(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim(0)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            levels: self.levels.iter().map(|l| l.cast()).collect(),
            view: self.view.clone(),
        }
    }
}

/// Spatial size of level `i` (0-based) for an `h x w` image.
pub fn level_size(h: usize, w: usize, level: usize) -> (usize, usize) {
    let f = 1usize << (level + 2);
    (h.div_ceil(f), w.div_ceil(f))
}

/// Checks a pyramid against the shape law for an `h x w` image.
pub fn check_pyramid<T: Scalar>(
    p: &FeaturePyramid<T>,
    h: usize,
    w: usize,
    widths: &[usize; LEVELS],
) -> Result<()> {
    if p.levels.len() != LEVELS {
        return Err(Error::Shape(format!("pyramid has {} levels, need {LEVELS}", p.levels.len())));
    }
    for (i, l) in p.levels.iter().enumerate() {
        let (lh, lw) = level_size(h, w, i);
        if l.shape() != [widths[i], lh, lw] {
            return Err(Error::Shape(format!(
                "level {i} has shape {:?}, expected [{}, {lh}, {lw}]",
                l.shape(),
                widths[i]
            )));
        }
        if !l.all_finite() {
            return Err(Error::NonFinite(format!("level {i} of view `{}`", p.view)));
        }
    }
    Ok(())
}

pub trait PyramidEncoder: Send + Sync {
    fn widths(&self) -> [usize; LEVELS];
    fn encode(&self, view: &CameraView) -> Result<FeaturePyramid<f32>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub widths: [usize; LEVELS],
    pub stem: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn semantic() -> Self {
        Self {
            widths: [32, 64, 96, 128],
            stem: 16,
            seed: 0x5e3a,
        }
    }

    pub fn depth() -> Self {
        Self {
            widths: [16, 32, 64, 96],
            stem: 16,
            seed: 0xde97,
        }
    }
}

/// Seeded CNN: stride-2 stem, then per level a stride-2 conv and a residual
/// 3x3 conv, SiLU after each conv.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    config: EncoderConfig,
    params: ParamStore<f32>,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.widths.contains(&0) || config.stem == 0 {
            return Err(invalid("encoder widths must be positive"));
        }
        let mut rng = stream_rng(config.seed, streams::ENCODER);
        let mut params = ParamStore::<f32>::new();
        params.init_conv("stem", 3, config.stem, 3, &mut rng);
        let mut ci = config.stem;
        for (i, &co) in config.widths.iter().enumerate() {
            params.init_conv(&format!("down{i}"), ci, co, 3, &mut rng);
            params.init_conv(&format!("res{i}"), co, co, 3, &mut rng);
            ci = co;
        }
        // Small random biases so a blank image has a non-trivial response.
        for (name, t) in params.iter_mut() {
            if name.ends_with(".b") {
                *t = Tensor::randn(t.shape(), 0.1, &mut rng);
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn encode_image(&self, image: &RgbImage, view: &str) -> Result<FeaturePyramid<f32>> {
        if image.height < MIN_IMAGE_SIDE || image.width < MIN_IMAGE_SIDE {
            return Err(invalid(format!(
                "image {}x{} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}",
                image.height, image.width
            )));
        }
        let (h, w) = (image.height, image.width);
        let mut x = Tensor::<f32>::zeros(&[1, 3, h, w]);
        for y in 0..h {
            for xx in 0..w {
                let px = image.pixel(xx, y);
                for c in 0..3 {
                    x.data_mut()[(c * h + y) * w + xx] = 2.0 * px[c] - 1.0;
                }
            }
        }
        let conv = |name: &str, x: &Tensor<f32>, spec: ConvSpec| -> Result<Tensor<f32>> {
            let y = kernels::conv2d(
                x,
                self.params.get(&format!("{name}.w"))?,
                Some(self.params.get(&format!("{name}.b"))?),
                spec,
            );
            Ok(y.map(kernels::silu))
        };
        let down = ConvSpec::down(3, false);
        let same = ConvSpec::same(3, false);
        let mut x = conv("stem", &x, down)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            x = conv(&format!("down{i}"), &x, down)?;
            let r = conv(&format!("res{i}"), &x, same)?;
            x.axpy(0.5, &r);
            let (c, lh, lw) = (x.dim(1), x.dim(2), x.dim(3));
            levels.push(x.reshaped(&[c, lh, lw])?);
        }
        Ok(FeaturePyramid {
            levels,
            view: view.to_string(),
        })
    }
}

impl PyramidEncoder for FrozenEncoder {
    fn widths(&self) -> [usize; LEVELS] {
        self.config.widths
    }

    fn encode(&self, view: &CameraView) -> Result<FeaturePyramid<f32>> {
        self.encode_image(&view.image, &view.name)
    }
}

/// Semantic (`E_s`) and depth (`E_d`) encoders used together.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub semantic: FrozenEncoder,
    pub depth: FrozenEncoder,
}

impl EncoderPair {
    pub fn new(semantic: EncoderConfig, depth: EncoderConfig) -> Result<Self> {
        Ok(Self {
            semantic: FrozenEncoder::new(semantic)?,
            depth: FrozenEncoder::new(depth)?,
        })
    }

    pub fn standard() -> Self {
        Self::new(EncoderConfig::semantic(), EncoderConfig::depth()).expect("default widths are valid")
    }

    pub fn encode(&self, view: &CameraView) -> Result<(FeaturePyramid<f32>, FeaturePyramid<f32>)> {
        Ok((self.semantic.encode(view)?, self.depth.encode(view)?))
    }
}

pub fn encode_semantic(pair: &EncoderPair, view: &CameraView) -> Result<FeaturePyramid<f32>> {
    pair.semantic.encode(view)
}

pub fn encode_depth(pair: &EncoderPair, view: &CameraView) -> Result<FeaturePyramid<f32>> {
    pair.depth.encode(view)
}

type Backbone = dyn Fn(&RgbImage) -> Result<Vec<Tensor<f32>>> + Send + Sync;

/// Wraps an arbitrary multi-scale backbone: each of its four outputs
/// `[C_i, h_i, w_i]` is bilinearly resized onto the pyramid grid.
pub struct ResizingAdapter {
    widths: [usize; LEVELS],
    backbone: Box<Backbone>,
}

impl ResizingAdapter {
    pub fn new(
        widths: [usize; LEVELS],
        backbone: impl Fn(&RgbImage) -> Result<Vec<Tensor<f32>>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            widths,
            backbone: Box::new(backbone),
        }
    }
}

impl PyramidEncoder for ResizingAdapter {
    fn widths(&self) -> [usize; LEVELS] {
        self.widths
    }

    fn encode(&self, view: &CameraView) -> Result<FeaturePyramid<f32>> {
        let (h, w) = view.size();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(invalid("image smaller than 32x32"));
        }
        let raw = (self.backbone)(&view.image)?;
        if raw.len() != LEVELS {
            return Err(Error::Shape(format!("backbone returned {} maps", raw.len())));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        for (i, m) in raw.into_iter().enumerate() {
            if m.ndim() != 3 || m.dim(0) != self.widths[i] {
                return Err(Error::Shape(format!(
                    "backbone level {i} has shape {:?}, expected {} channels",
                    m.shape(),
                    self.widths[i]
                )));
            }
            let (lh, lw) = level_size(h, w, i);
            let (mh, mw) = (m.dim(1), m.dim(2));
            if mh == 0 || mw == 0 {
                return Err(Error::Shape(format!("backbone level {i} is empty")));
            }
            let src = m.reshape(&[1, self.widths[i], mh, mw])?;
            let r = kernels::resize_bilinear(&src, lh, lw);
            levels.push(r.reshape(&[self.widths[i], lh, lw])?);
        }
        let p = FeaturePyramid {
            levels,
            view: view.name.clone(),
        };
        check_pyramid(&p, h, w, &self.widths)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{camera_rig, generate_sample, Weather, WorldConfig};

    fn view() -> CameraView {
        generate_sample(&WorldConfig::default(), 3, Weather::Clean)
            .unwrap()
            .views
            .remove(0)
            .view
    }

    #[test]
    fn pyramid_shape_law() {
        let pair = EncoderPair::standard();
        for (h, w) in [(32, 32), (64, 128), (96, 64)] {
            let cam = &camera_rig(1, h, w).unwrap()[0];
            let v = CameraView::new("v", RgbImage::new(h, w), cam.calib).unwrap();
            let (s, d) = pair.encode(&v).unwrap();
            check_pyramid(&s, h, w, &EncoderConfig::semantic().widths).unwrap();
            check_pyramid(&d, h, w, &EncoderConfig::depth().widths).unwrap();
            assert_eq!(s.levels[0].dim(1), h / 4);
            assert_eq!(s.levels[3].dim(2), w / 32);
        }
    }

    #[test]
    fn deterministic_and_sensitive() {
        let pair = EncoderPair::standard();
        let v = view();
        assert_eq!(pair.encode(&v).unwrap(), pair.encode(&v).unwrap());
        let mut v2 = v.clone();
        v2.image.data[0] = 1.0 - v2.image.data[0];
        assert_ne!(pair.semantic.encode(&v).unwrap(), pair.semantic.encode(&v2).unwrap());
        assert_ne!(pair.depth.encode(&v).unwrap(), pair.depth.encode(&v2).unwrap());
    }

    #[test]
    fn blank_image_gives_reproducible_bias_response() {
        let a = EncoderPair::standard();
        let b = EncoderPair::standard();
        let mut v = view();
        v.image.data.fill(0.0);
        let pa = a.semantic.encode(&v).unwrap();
        assert_eq!(pa, b.semantic.encode(&v).unwrap());
        assert!(pa.levels[0].max_abs() > 0.0);
    }

    #[test]
    fn small_images_rejected() {
        let pair = EncoderPair::standard();
        let cam = &camera_rig(1, 16, 64).unwrap()[0];
        let v = CameraView::new("v", RgbImage::new(16, 64), cam.calib).unwrap();
        assert!(pair.encode(&v).is_err());
    }

    #[test]
    fn default_branch_widths_differ() {
        let s = EncoderConfig::semantic().widths;
        let d = EncoderConfig::depth().widths;
        assert!(s.iter().zip(&d).all(|(a, b)| a != b));
    }

    #[test]
    fn adapter_preserves_shape_law() {
        // stand-in for a pretrained backbone with its own strides
        let adapter = ResizingAdapter::new([8, 8, 16, 16], |img: &RgbImage| {
            let sizes = [(img.height / 3, img.width / 3), (7, 9), (5, 5), (1, 2)];
            Ok(sizes
                .iter()
                .zip([8, 8, 16, 16])
                .map(|(&(h, w), c)| Tensor::full(&[c, h, w], 0.25f32))
                .collect())
        });
        let v = view();
        let p = adapter.encode(&v).unwrap();
        check_pyramid(&p, 64, 128, &[8, 8, 16, 16]).unwrap();
        assert!(p.levels.iter().all(|l| l.data().iter().all(|&x| (x - 0.25).abs() < 1e-6)));
        let bad = ResizingAdapter::new([8, 8, 16, 16], |_: &RgbImage| Ok(vec![Tensor::zeros(&[8, 4, 4])]));
        assert!(bad.encode(&v).is_err());
    }
}
