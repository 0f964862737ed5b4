//! Stochastic image transformations for the two contrastive views.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::FaceImage;
use crate::error::{Error, Result};
use crate::label::Class;
use crate::prompts::PromptSet;

/// View-generation recipe. Probabilities are per image; jitter strengths
/// follow the usual brightness/contrast/saturation/hue convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Range of the crop area as a fraction of the image.
    pub crop_scale: [f64; 2],
    /// Range of the crop aspect ratio (width / height).
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.5, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("augment: {what}")));
        let [s0, s1] = self.crop_scale;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return bad("crop_scale must satisfy 0 < lo <= hi <= 1");
        }
        let [r0, r1] = self.crop_ratio;
        if !(0.0 < r0 && r0 <= r1) {
            return bad("crop_ratio must satisfy 0 < lo <= hi");
        }
        for p in [self.flip_p, self.jitter_p, self.grayscale_p] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("brightness/contrast/saturation must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad("hue must lie in [0, 0.5]");
        }
        Ok(())
    }

    /// One random view of `img`, same size as the input.
    pub fn apply(&self, img: &FaceImage, rng: &mut impl Rng) -> FaceImage {
        let (h, w) = (img.height(), img.width());
        let mut rgb = img.to_unit_rgb();
        let mut changed = false;

        let (top, left, ch, cw) = self.crop_box(h, w, rng);
        if (ch, cw) != (h, w) {
            rgb = crop_resize(&rgb, top, left, ch, cw, h, w);
            changed = true;
        }
        if rng.random_bool(self.flip_p) {
            rgb.invert_axis(ndarray::Axis(1));
            changed = true;
        }
        if rng.random_bool(self.jitter_p) {
            self.jitter(&mut rgb, rng);
            changed = true;
        }
        if rng.random_bool(self.grayscale_p) {
            to_grayscale(&mut rgb);
            changed = true;
        }
        if !changed {
            return img.clone();
        }
        FaceImage::from_unit_rgb(rgb).expect("augmentation keeps 3 finite channels")
    }

    /// Random resized crop box `(top, left, height, width)`.
    fn crop_box(&self, h: usize, w: usize, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
        let area = (h * w) as f64;
        let (lr0, lr1) = (self.crop_ratio[0].ln(), self.crop_ratio[1].ln());
        for _ in 0..10 {
            let target = area * uniform(rng, self.crop_scale[0], self.crop_scale[1]);
            let ratio = uniform(rng, lr0, lr1).exp();
            let cw = (target * ratio).sqrt().round() as usize;
            let ch = (target / ratio).sqrt().round() as usize;
            if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
                let top = rng.random_range(0..=h - ch);
                let left = rng.random_range(0..=w - cw);
                return (top, left, ch, cw);
            }
        }
        // Fallback: the largest centered crop within the ratio range.
        let in_ratio = w as f64 / h as f64;
        let (ch, cw) = if in_ratio < self.crop_ratio[0] {
            ((w as f64 / self.crop_ratio[0]).round() as usize, w)
        } else if in_ratio > self.crop_ratio[1] {
            (h, (h as f64 * self.crop_ratio[1]).round() as usize)
        } else {
            (h, w)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    }

    fn jitter(&self, rgb: &mut Array3<f32>, rng: &mut impl Rng) {
        let mut order = [0, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 if self.brightness > 0.0 => {
                    let f = uniform(rng, 1.0 - self.brightness, 1.0 + self.brightness) as f32;
                    rgb.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
                }
                1 if self.contrast > 0.0 => {
                    let f = uniform(rng, 1.0 - self.contrast, 1.0 + self.contrast) as f32;
                    let mean = gray_plane(rgb).mean().unwrap_or(0.0);
                    rgb.mapv_inplace(|v| ((v - mean) * f + mean).clamp(0.0, 1.0));
                }
                2 if self.saturation > 0.0 => {
                    let f = uniform(rng, 1.0 - self.saturation, 1.0 + self.saturation) as f32;
                    let gray = gray_plane(rgb);
                    for ((y, x, _), v) in rgb.indexed_iter_mut() {
                        let g = gray[[y, x]];
                        *v = ((*v - g) * f + g).clamp(0.0, 1.0);
                    }
                }
                3 if self.hue > 0.0 => {
                    let shift = uniform(rng, -self.hue, self.hue) as f32;
                    shift_hue(rgb, shift);
                }
                _ => {}
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn crop_resize(rgb: &Array3<f32>, top: usize, left: usize, ch: usize, cw: usize, h: usize, w: usize) -> Array3<f32> {
    let (ih, iw, _) = rgb.dim();
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(iw as u32, ih as u32, rgb.iter().copied().collect())
            .expect("buffer matches dimensions");
    let cropped = imageops::crop_imm(&buf, left as u32, top as u32, cw as u32, ch as u32).to_image();
    let resized = imageops::resize(&cropped, w as u32, h as u32, FilterType::Triangle);
    Array3::from_shape_vec((h, w, 3), resized.into_raw())
        .expect("resized buffer matches dimensions")
        .mapv(|v| v.clamp(0.0, 1.0))
}

fn gray_plane(rgb: &Array3<f32>) -> ndarray::Array2<f32> {
    let (h, w, _) = rgb.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * rgb[[y, x, 0]] + 0.587 * rgb[[y, x, 1]] + 0.114 * rgb[[y, x, 2]]
    })
}

fn to_grayscale(rgb: &mut Array3<f32>) {
    let gray = gray_plane(rgb);
    for ((y, x, _), v) in rgb.indexed_iter_mut() {
        *v = gray[[y, x]];
    }
}

/// Rotates the hue of every pixel by `shift` turns.
fn shift_hue(rgb: &mut Array3<f32>, shift: f32) {
    let (h, w, _) = rgb.dim();
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            if delta <= 0.0 {
                continue;
            }
            let mut hue = if max == r {
                ((g - b) / delta).rem_euclid(6.0)
            } else if max == g {
                (b - r) / delta + 2.0
            } else {
                (r - g) / delta + 4.0
            } / 6.0;
            hue = (hue + shift).rem_euclid(1.0);
            let (sat, val) = (delta / max, max);
            let sector = hue * 6.0;
            let i = sector.floor();
            let f = sector - i;
            let p = val * (1.0 - sat);
            let q = val * (1.0 - sat * f);
            let t = val * (1.0 - sat * (1.0 - f));
            let (nr, ng, nb) = match i as i32 % 6 {
                0 => (val, t, p),
                1 => (q, val, p),
                2 => (p, val, t),
                3 => (p, q, val),
                4 => (t, p, val),
                _ => (val, p, q),
            };
            rgb[[y, x, 0]] = nr;
            rgb[[y, x, 1]] = ng;
            rgb[[y, x, 2]] = nb;
        }
    }
}

/// Two views of one training image and two different prompts of its class.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    /// The untransformed image.
    pub original: FaceImage,
    pub view1: FaceImage,
    pub view2: FaceImage,
    pub label: Class,
    pub prompt_view1: String,
    pub prompt_view2: String,
}

pub fn make_views(
    img: &FaceImage,
    label: Class,
    ps: &PromptSet,
    aug: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedPair> {
    let (prompt_view1, prompt_view2) = ps.sample_views(label, rng)?;
    let view1 = aug.apply(img, rng);
    let view2 = aug.apply(img, rng);
    Ok(AugmentedPair {
        original: img.clone(),
        view1,
        view2,
        label,
        prompt_view1,
        prompt_view2,
    })
}
