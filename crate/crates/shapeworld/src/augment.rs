use autodiff::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{hsv_to_rgb, rgb_to_hsv, ImageSample};

/// Stochastic view generation: random resized crop, colour jitter, blur.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Area fraction of the crop window.
    pub crop_scale: (f64, f64),
    /// Width / height ratio of the crop window, sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub color: bool,
    /// Probability that colour jitter is applied at all.
    pub color_prob: f64,
    /// Multiplicative factors are drawn from `[1 - s, 1 + s]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation drawn from `[-hue, hue]`, in turns.
    pub hue: f64,
    pub blur: bool,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            color: true,
            color_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            blur: true,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn identity() -> Self {
        Self { crop: false, color: false, blur: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale {:?} must lie in (0, 1]", self.crop_scale)));
        }
        if !(self.crop_ratio.0 > 0.0 && self.crop_ratio.0 <= self.crop_ratio.1) {
            return Err(Error::Config(format!("invalid crop ratio {:?}", self.crop_ratio)));
        }
        if !(0.0 <= self.blur_sigma.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config(format!("invalid blur sigma {:?}", self.blur_sigma)));
        }
        for p in [self.color_prob, self.blur_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        for s in [self.brightness, self.contrast, self.saturation, self.hue] {
            if s < 0.0 {
                return Err(Error::Config(format!("negative jitter strength {s}")));
            }
        }
        Ok(())
    }
}

fn sample_bilinear(plane: &[f64], size: usize, x: f64, y: f64) -> f64 {
    let max = (size - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * size + x0] * (1.0 - fx) + plane[y0 * size + x1] * fx;
    let bottom = plane[y1 * size + x0] * (1.0 - fx) + plane[y1 * size + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn random_resized_crop(px: &[f64], size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let sf = size as f64;
    let area = rng.uniform_in(cfg.crop_scale.0, cfg.crop_scale.1) * sf * sf;
    let ratio = rng.uniform_in(cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln()).exp();
    let w = (area * ratio).sqrt().min(sf);
    let h = (area / ratio).sqrt().min(sf);
    let x0 = rng.uniform_in(0.0, sf - w);
    let y0 = rng.uniform_in(0.0, sf - h);
    let mut out = vec![0.0; px.len()];
    for c in 0..3 {
        let plane = &px[c * size * size..(c + 1) * size * size];
        for oy in 0..size {
            let sy = y0 + (oy as f64 + 0.5) * h / sf - 0.5;
            for ox in 0..size {
                let sx = x0 + (ox as f64 + 0.5) * w / sf - 0.5;
                out[(c * size + oy) * size + ox] = sample_bilinear(plane, size, sx, sy);
            }
        }
    }
    out
}

fn color_jitter(px: &mut [f64], size: usize, cfg: &AugmentConfig, rng: &mut Rng) {
    let n = size * size;
    let factor = |s: f64, rng: &mut Rng| rng.uniform_in((1.0 - s).max(0.0), 1.0 + s);
    let brightness = factor(cfg.brightness, rng);
    let contrast = factor(cfg.contrast, rng);
    let saturation = factor(cfg.saturation, rng);
    let hue = rng.uniform_in(-cfg.hue, cfg.hue) * 360.0;
    let clamp = |px: &mut [f64]| px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    px.iter_mut().for_each(|v| *v *= brightness);
    clamp(px);
    let gray = |px: &[f64], i: usize| 0.299 * px[i] + 0.587 * px[n + i] + 0.114 * px[2 * n + i];
    let mean = (0..n).map(|i| gray(px, i)).sum::<f64>() / n as f64;
    px.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    clamp(px);
    for i in 0..n {
        let g = gray(px, i);
        for c in 0..3 {
            px[c * n + i] = (px[c * n + i] - g) * saturation + g;
        }
    }
    clamp(px);
    if hue != 0.0 {
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv([px[i], px[n + i], px[2 * n + i]]);
            let [r, g, b] = hsv_to_rgb(h + hue, s, v);
            px[i] = r;
            px[n + i] = g;
            px[2 * n + i] = b;
        }
        clamp(px);
    }
}

/// Separable Gaussian blur of a `channels × size × size` image with
/// clamp-to-edge borders. The kernel spans `±⌈3σ⌉` pixels.
pub fn gaussian_blur(px: &[f64], channels: usize, size: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return px.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let last = size as isize - 1;
    let mut tmp = vec![0.0; px.len()];
    let mut out = vec![0.0; px.len()];
    for c in 0..channels {
        let base = c * size * size;
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let xx = (x as isize + d).clamp(0, last) as usize;
                    acc += k * px[base + y * size + xx];
                }
                tmp[base + y * size + x] = acc;
            }
        }
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let yy = (y as isize + d).clamp(0, last) as usize;
                    acc += k * tmp[base + yy * size + x];
                }
                out[base + y * size + x] = acc;
            }
        }
    }
    out
}

/// Applies crop-and-resize, colour jitter and blur, in that order, each when
/// enabled. The category and dimensions are preserved; output is clamped to
/// `[0, 1]`.
pub fn augment(image: &ImageSample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<ImageSample> {
    let size = image.size();
    let mut px = image.pixels.data().to_vec();
    if cfg.crop {
        px = random_resized_crop(&px, size, cfg, rng);
    }
    if cfg.color && rng.bernoulli(cfg.color_prob) {
        color_jitter(&mut px, size, cfg, rng);
    }
    if cfg.blur && rng.bernoulli(cfg.blur_prob) {
        let sigma = rng.uniform_in(cfg.blur_sigma.0, cfg.blur_sigma.1);
        px = gaussian_blur(&px, 3, size, sigma);
    }
    if cfg.crop || cfg.color || cfg.blur {
        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(ImageSample { pixels: Tensor::new(image.pixels.shape(), px)?, ..image.clone() })
}
