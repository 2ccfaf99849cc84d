//! Differentiable siamese augmentation and multiformation decoding.
//!
//! Each application uses exactly one of six transforms, drawn uniformly:
//! color (brightness, saturation, contrast in sequence), crop, cutout,
//! horizontal flip, scale, and rotation. Geometric transforms are expressed as
//! fixed [`SpatialMap`]s with bilinear weights and zero fill, so the same
//! parameters applied to a real and a synthetic batch produce the same warp
//! and gradients flow to the synthetic pixels.
//!
//! Inputs are normalized images, so the dataset mean is zero and cutout fills
//! with zeros.

use std::ops::Range;
use std::rc::Rc;

use crate::data::SyntheticSet;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{SpatialMap, Tape, Tensor, Var};

pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.3, 0.3);
pub const SATURATION_RANGE: (f64, f64) = (0.5, 1.5);
pub const CONTRAST_RANGE: (f64, f64) = (0.5, 1.5);
pub const ROTATION_DEGREES: (f64, f64) = (-15.0, 15.0);
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Color,
    Crop,
    Cutout,
    Flip,
    Scale,
    Rotate,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Color,
        Transform::Crop,
        Transform::Cutout,
        Transform::Flip,
        Transform::Scale,
        Transform::Rotate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentationParams {
    Color { brightness: f64, saturation: f64, contrast: f64 },
    /// Window offsets into the image padded by [`CROP_PAD`] on every side,
    /// each in `0..=2 * CROP_PAD`.
    Crop { offset_y: usize, offset_x: usize },
    /// Box center as a fraction of the image size, in `[0, 1)`.
    Cutout { center_y: f64, center_x: f64 },
    Flip { flip: bool },
    Scale { factor: f64 },
    Rotate { degrees: f64 },
}

/// One transform choice followed by its scalars, all from `stream`.
pub fn sample_params(stream: &mut Stream) -> AugmentationParams {
    match Transform::ALL[stream.below(6)] {
        Transform::Color => AugmentationParams::Color {
            brightness: stream.uniform_in(BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1),
            saturation: stream.uniform_in(SATURATION_RANGE.0, SATURATION_RANGE.1),
            contrast: stream.uniform_in(CONTRAST_RANGE.0, CONTRAST_RANGE.1),
        },
        Transform::Crop => AugmentationParams::Crop {
            offset_y: stream.below(2 * CROP_PAD + 1),
            offset_x: stream.below(2 * CROP_PAD + 1),
        },
        Transform::Cutout => AugmentationParams::Cutout {
            center_y: stream.uniform(),
            center_x: stream.uniform(),
        },
        Transform::Flip => AugmentationParams::Flip { flip: stream.coin() },
        Transform::Scale => AugmentationParams::Scale {
            factor: stream.uniform_in(SCALE_RANGE.0, SCALE_RANGE.1),
        },
        Transform::Rotate => AugmentationParams::Rotate {
            degrees: stream.uniform_in(ROTATION_DEGREES.0, ROTATION_DEGREES.1),
        },
    }
}

/// Bilinear taps at a continuous source location, dropping out-of-range corners.
fn bilinear_taps(sy: f64, sx: f64, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (y, x) = (y0 + dy, x0 + dx);
            let wt = wy * wx;
            if wt != 0.0 && y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                taps.push((y as usize, x as usize, wt));
            }
        }
    }
    taps
}

impl AugmentationParams {
    pub fn transform(&self) -> Transform {
        match self {
            AugmentationParams::Color { .. } => Transform::Color,
            AugmentationParams::Crop { .. } => Transform::Crop,
            AugmentationParams::Cutout { .. } => Transform::Cutout,
            AugmentationParams::Flip { .. } => Transform::Flip,
            AugmentationParams::Scale { .. } => Transform::Scale,
            AugmentationParams::Rotate { .. } => Transform::Rotate,
        }
    }

    /// Whether every scalar lies within its declared range.
    pub fn in_range(&self) -> bool {
        let within = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
        match *self {
            AugmentationParams::Color {
                brightness,
                saturation,
                contrast,
            } => {
                within(brightness, BRIGHTNESS_RANGE)
                    && within(saturation, SATURATION_RANGE)
                    && within(contrast, CONTRAST_RANGE)
            }
            AugmentationParams::Crop { offset_y, offset_x } => offset_y <= 2 * CROP_PAD && offset_x <= 2 * CROP_PAD,
            AugmentationParams::Cutout { center_y, center_x } => {
                (0.0..1.0).contains(&center_y) && (0.0..1.0).contains(&center_x)
            }
            AugmentationParams::Flip { .. } => true,
            AugmentationParams::Scale { factor } => within(factor, SCALE_RANGE),
            AugmentationParams::Rotate { degrees } => within(degrees, ROTATION_DEGREES),
        }
    }

    /// The warp for geometric transforms on `h x w` images; `None` for color
    /// and for an unset flip.
    pub fn spatial_map(&self, h: usize, w: usize) -> Option<SpatialMap> {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let map = match *self {
            AugmentationParams::Color { .. } | AugmentationParams::Flip { flip: false } => return None,
            AugmentationParams::Flip { flip: true } => {
                SpatialMap::from_fn((h, w), (h, w), 1, |_, y, x| vec![(y, w - 1 - x, 1.0)])
            }
            AugmentationParams::Crop { offset_y, offset_x } => SpatialMap::from_fn((h, w), (h, w), 1, |_, y, x| {
                let sy = (y + offset_y) as isize - CROP_PAD as isize;
                let sx = (x + offset_x) as isize - CROP_PAD as isize;
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    vec![(sy as usize, sx as usize, 1.0)]
                } else {
                    vec![]
                }
            }),
            AugmentationParams::Cutout { center_y, center_x } => {
                let (bh, bw) = ((h / 4).max(1), (w / 4).max(1));
                let y0 = (center_y * h as f64).floor() as isize - (bh / 2) as isize;
                let x0 = (center_x * w as f64).floor() as isize - (bw / 2) as isize;
                SpatialMap::from_fn((h, w), (h, w), 1, |_, y, x| {
                    let (y, x) = (y as isize, x as isize);
                    if y >= y0 && y < y0 + bh as isize && x >= x0 && x < x0 + bw as isize {
                        vec![]
                    } else {
                        vec![(y as usize, x as usize, 1.0)]
                    }
                })
            }
            AugmentationParams::Scale { factor } => SpatialMap::from_fn((h, w), (h, w), 1, |_, y, x| {
                bilinear_taps((y as f64 - cy) / factor + cy, (x as f64 - cx) / factor + cx, h, w)
            }),
            AugmentationParams::Rotate { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                SpatialMap::from_fn((h, w), (h, w), 1, |_, y, x| {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    bilinear_taps(-s * dx + c * dy + cy, c * dx + s * dy + cx, h, w)
                })
            }
        };
        Some(map)
    }

    /// Applies the transform to a `[B, C, H, W]` batch on `tape`.
    pub fn apply(&self, tape: &mut Tape, batch: Var) -> Result<Var> {
        let s = tape.shape(batch).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("augmentation expects [B,C,H,W], got {s:?}")));
        }
        if let AugmentationParams::Color {
            brightness,
            saturation,
            contrast,
        } = *self
        {
            let x = tape.add_scalar(batch, brightness)?;
            let x = tape.saturation(x, saturation)?;
            return tape.contrast(x, contrast);
        }
        match self.spatial_map(s[2], s[3]) {
            Some(map) => tape.spatial_map(batch, Rc::new(map)),
            None => Ok(batch),
        }
    }

    /// Gradient-free convenience around [`AugmentationParams::apply`].
    pub fn apply_tensor(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let y = self.apply(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Splits storage slots into a `rho x rho` grid of sub-images and bilinearly
/// upsamples each back to full size (half-pixel centers, edge clamping).
#[derive(Debug, Clone)]
pub struct MultiformationCodec {
    rho: usize,
    map: Option<Rc<SpatialMap>>,
}

impl MultiformationCodec {
    pub fn new(rho: usize, h: usize, w: usize) -> Result<Self> {
        if rho < 1 {
            return Err(Error::Config("multiformation factor must be at least 1".into()));
        }
        if h % rho != 0 || w % rho != 0 {
            return Err(Error::Config(format!("image size {h}x{w} not divisible by rho={rho}")));
        }
        if rho == 1 {
            return Ok(MultiformationCodec { rho, map: None });
        }
        let (sh, sw) = (h / rho, w / rho);
        let axis = |dst: usize, len: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) / rho as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let map = SpatialMap::from_fn((h, w), (h, w), rho * rho, |g, y, x| {
            let (oy, ox) = ((g / rho) * sh, (g % rho) * sw);
            let (y0, y1, fy) = axis(y, sh);
            let (x0, x1, fx) = axis(x, sw);
            let mut taps = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    if wy * wx != 0.0 {
                        taps.push((oy + yy, ox + xx, wy * wx));
                    }
                }
            }
            taps
        });
        Ok(MultiformationCodec {
            rho,
            map: Some(Rc::new(map)),
        })
    }

    pub fn rho(&self) -> usize {
        self.rho
    }

    /// `[S, C, H, W]` storage -> `[S * rho^2, C, H, W]` images.
    pub fn decode(&self, tape: &mut Tape, storage: Var) -> Result<Var> {
        match &self.map {
            None => Ok(storage),
            Some(map) => tape.spatial_map(storage, map.clone()),
        }
    }
}

/// Decodes slots `slots` of `syn` into full-resolution images and their labels.
pub fn decode(syn: &SyntheticSet, slots: Range<usize>) -> Result<(Tensor, Vec<usize>)> {
    let (h, w) = syn.image_hw();
    let codec = MultiformationCodec::new(syn.rho(), h, w)?;
    let mut tape = Tape::new();
    let part = syn.storage.rows(slots.start, slots.len())?;
    let x = tape.constant(part);
    let y = codec.decode(&mut tape, x)?;
    let per = syn.rho() * syn.rho();
    let labels = syn.labels()[slots]
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, per))
        .collect();
    Ok((tape.value(y).clone(), labels))
}

/// Every slot of `syn`, decoded.
pub fn decode_all(syn: &SyntheticSet) -> Result<(Tensor, Vec<usize>)> {
    decode(syn, 0..syn.labels().len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormStats;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, 1, h, w], (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn unset_flip_is_bitwise_identity() {
        let x = ramp(4, 5);
        let y = AugmentationParams::Flip { flip: false }.apply_tensor(&x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn flip_is_an_involution() {
        let x = ramp(4, 5);
        let p = AugmentationParams::Flip { flip: true };
        let once = p.apply_tensor(&x).unwrap();
        assert_eq!(&once.data()[..5], &[4.0, 3.0, 2.0, 1.0, 0.0]);
        assert!(p.apply_tensor(&once).unwrap().bit_eq(&x));
    }

    #[test]
    fn centered_crop_and_unit_scale_are_identity() {
        let x = ramp(6, 6);
        let crop = AugmentationParams::Crop {
            offset_y: CROP_PAD,
            offset_x: CROP_PAD,
        };
        assert!(crop.apply_tensor(&x).unwrap().bit_eq(&x));
        let scale = AugmentationParams::Scale { factor: 1.0 };
        assert!(scale.apply_tensor(&x).unwrap().bit_eq(&x));
        let rot = AugmentationParams::Rotate { degrees: 0.0 };
        assert!(rot.apply_tensor(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn crop_shifts_with_zero_fill() {
        let x = ramp(3, 3);
        let y = AugmentationParams::Crop {
            offset_y: CROP_PAD + 1,
            offset_x: CROP_PAD,
        }
        .apply_tensor(&x)
        .unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cutout_zeroes_a_quarter_side_box() {
        let x = Tensor::full(&[1, 2, 8, 8], 1.0);
        let y = AugmentationParams::Cutout {
            center_y: 0.5,
            center_x: 0.5,
        }
        .apply_tensor(&x)
        .unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 2 * 2 * 2);
    }

    #[test]
    fn sampled_params_respect_ranges() {
        let mut s = Stream::new(1, "aug");
        for _ in 0..2000 {
            assert!(sample_params(&mut s).in_range());
        }
    }

    #[test]
    fn decode_identity_and_constant_quadrants() {
        let stats = NormStats::identity(1);
        let storage = ramp(4, 4);
        let syn = SyntheticSet::new(storage.clone(), 1, 1, 1, stats.clone());
        // a single class is not a valid dataset but is a valid storage layout
        assert!(syn.is_ok());
        let (img, labels) = decode_all(&syn.unwrap()).unwrap();
        assert!(img.bit_eq(&storage));
        assert_eq!(labels, vec![0]);

        let mut quad = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                quad[y * 4 + x] = [1.0, 2.0, 3.0, 4.0][(y / 2) * 2 + x / 2];
            }
        }
        let syn = SyntheticSet::new(Tensor::new(vec![1, 1, 4, 4], quad).unwrap(), 1, 1, 2, stats).unwrap();
        let (img, labels) = decode_all(&syn).unwrap();
        assert_eq!(img.shape(), &[4, 1, 4, 4]);
        assert_eq!(labels, vec![0; 4]);
        for (g, c) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!(img.data()[g * 16..(g + 1) * 16].iter().all(|v| (v - c).abs() < 1e-15));
        }
    }
}
