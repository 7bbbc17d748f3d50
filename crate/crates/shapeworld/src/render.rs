use std::f64::consts::PI;

use autodiff::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{Category, Fill, NodeId, ShapeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Ood,
    Blob,
}

impl Split {
    pub fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Ood => 2,
            Split::Blob => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Ood => "ood",
            Split::Blob => "blob",
        }
    }
}

/// One `3 × H × W` image. Rendered images lie in `[0, 1]`; blobs do not.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    /// Taxonomy leaf; `None` for noise blobs.
    pub category: Option<NodeId>,
    pub sample_id: u64,
    pub split: Split,
}

impl ImageSample {
    pub fn size(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Global rendering knobs shared by every category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub image_size: usize,
    /// Maximum offset of the shape centre from the image centre, as a
    /// fraction of the side.
    pub position_jitter: f64,
    /// Added to every category hue, in degrees. Non-zero values give a
    /// shifted world for transfer probes.
    pub hue_shift_deg: f64,
    /// Added to every background level.
    pub background_shift: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { image_size: 32, position_jitter: 0.18, hue_shift_deg: 0.0, background_shift: 0.0 }
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn box_sdf(x: f64, y: f64, bx: f64, by: f64) -> f64 {
    let qx = x.abs() - bx;
    let qy = y.abs() - by;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn triangle_sdf(x: f64, y: f64, r: f64) -> f64 {
    let k = 3f64.sqrt();
    let mut px = x.abs() - r;
    let mut py = y + r / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * r, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

/// Signed distance (image units, negative inside) of a centred, unrotated
/// shape of radius `r`.
fn shape_sdf(kind: ShapeKind, x: f64, y: f64, r: f64) -> f64 {
    match kind {
        ShapeKind::Circle => (x * x + y * y).sqrt() - r,
        ShapeKind::Square => box_sdf(x, y, 0.82 * r, 0.82 * r),
        ShapeKind::Triangle => triangle_sdf(x, y - 0.15 * r, 1.15 * r),
        ShapeKind::Cross => box_sdf(x, y, r, 0.32 * r).min(box_sdf(x, y, 0.32 * r, r)),
        ShapeKind::Star => {
            let phi = y.atan2(x);
            (x * x + y * y).sqrt() - r * (0.62 + 0.38 * (5.0 * phi).cos())
        }
        ShapeKind::Ring => ((x * x + y * y).sqrt() - 0.7 * r).abs() - 0.3 * r,
    }
}

/// Draws one instance of `category` with jittered placement, size, rotation,
/// hue and background. Deterministic given the generator state.
pub fn render_sample(category: &Category, rng: &mut Rng, cfg: &RenderConfig) -> Result<ImageSample> {
    let size = cfg.image_size;
    if size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {size}")));
    }
    let sf = size as f64;
    let cx = 0.5 + rng.uniform_in(-cfg.position_jitter, cfg.position_jitter);
    let cy = 0.5 + rng.uniform_in(-cfg.position_jitter, cfg.position_jitter);
    let radius = rng.uniform_in(category.size.0, category.size.1);
    let theta = rng.uniform_in(0.0, 2.0 * PI);
    let (hue_c, hue_w) = category.color.hue_interval();
    let fg = hsv_to_rgb(hue_c + cfg.hue_shift_deg + rng.uniform_in(-hue_w, hue_w), rng.uniform_in(0.6, 1.0), rng.uniform_in(0.72, 1.0));
    let shade = fg.map(|c| c * 0.35);
    let bg_level = (category.background.level() + cfg.background_shift + rng.uniform_in(-0.07, 0.07)).clamp(0.0, 1.0);
    let bg = hsv_to_rgb(rng.uniform_in(0.0, 360.0), rng.uniform_in(0.0, 0.18), bg_level);
    let grad_angle = rng.uniform_in(0.0, 2.0 * PI);
    let grad_amp = rng.uniform_in(0.0, 0.1);
    let stripe_period = rng.uniform_in(3.5, 5.0) / sf;
    let stripe_angle = rng.uniform_in(0.0, PI);

    let (sin_t, cos_t) = theta.sin_cos();
    let (sin_s, cos_s) = stripe_angle.sin_cos();
    let (sin_g, cos_g) = grad_angle.sin_cos();
    let mut data = vec![0.0; 3 * size * size];
    for py in 0..size {
        for px in 0..size {
            let u = (px as f64 + 0.5) / sf;
            let v = (py as f64 + 0.5) / sf;
            let (dx, dy) = (u - cx, v - cy);
            let (rx, ry) = (cos_t * dx + sin_t * dy, -sin_t * dx + cos_t * dy);
            let d_px = shape_sdf(category.kind, rx, ry, radius) * sf;
            let coverage = match category.fill {
                Fill::Solid | Fill::Striped => (0.5 - d_px).clamp(0.0, 1.0),
                Fill::Outline => (0.5 - (d_px.abs() - 1.0)).clamp(0.0, 1.0),
            };
            let color = if category.fill == Fill::Striped && ((cos_s * dx + sin_s * dy) / stripe_period).rem_euclid(1.0) >= 0.5 {
                shade
            } else {
                fg
            };
            let ramp = grad_amp * (cos_g * (u - 0.5) + sin_g * (v - 0.5));
            for c in 0..3 {
                let b = (bg[c] + ramp).clamp(0.0, 1.0);
                data[(c * size + py) * size + px] = (b * (1.0 - coverage) + color[c] * coverage).clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageSample {
        pixels: Tensor::new(&[3, size, size], data)?,
        category: Some(category.leaf),
        sample_id: 0,
        split: Split::Train,
    })
}

/// Image whose pixels are i.i.d. standard normal.
pub fn gen_blob(rng: &mut Rng, size: usize) -> Result<ImageSample> {
    if size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {size}")));
    }
    let data = (0..3 * size * size).map(|_| rng.normal()).collect();
    Ok(ImageSample { pixels: Tensor::new(&[3, size, size], data)?, category: None, sample_id: 0, split: Split::Blob })
}
