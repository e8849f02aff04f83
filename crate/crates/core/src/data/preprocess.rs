use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{sample_bilinear, ImageBuffer};
use super::DataError;
use crate::tensor::Tensor;

/// ImageNet channel means used to center inputs.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// ImageNet channel standard deviations.
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub flip_prob: f64,
    /// Rotation angle is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub zoom_range: [f64; 2],
    /// Brightness factor is drawn from `[1 - delta, 1 + delta]`.
    pub brightness_delta: f64,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            flip_prob: 0.5,
            rotation_deg: 15.0,
            zoom_range: [0.9, 1.1],
            brightness_delta: 0.1,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    /// Configuration whose augmentation is the identity.
    pub fn no_augmentation(target_size: usize) -> Self {
        Self {
            target_size,
            flip_prob: 0.0,
            rotation_deg: 0.0,
            zoom_range: [1.0, 1.0],
            brightness_delta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.target_size == 0 {
            return bad("target_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return bad("rotation_deg must be a finite nonnegative angle");
        }
        let [lo, hi] = self.zoom_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("zoom_range must satisfy 0 < low <= high");
        }
        if !(0.0..1.0).contains(&self.brightness_delta) {
            return bad("brightness_delta must lie in [0, 1)");
        }
        if self.std.iter().any(|&s| s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return bad("every std entry must be positive");
        }
        Ok(())
    }
}

/// Scales 0–255 pixels to [0, 1] and standardizes each channel, returning a
/// channel-first `3 x H x W` tensor.
pub fn normalize(img: &ImageBuffer, cfg: &PreprocessConfig) -> Result<Tensor<f32>, DataError> {
    if img.channels() != 3 {
        return Err(DataError::InvalidImage(format!("normalize needs 3 channels, got {}", img.channels())));
    }
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0f32; 3 * w * h];
    for c in 0..3 {
        let (m, s) = (cfg.mean[c], cfg.std[c]);
        let plane = &mut out[c * w * h..(c + 1) * w * h];
        for (i, px) in img.data().chunks(3).enumerate() {
            plane[i] = (px[c] / 255.0 - m) / s;
        }
    }
    Ok(Tensor::new(vec![3, h, w], out).expect("finite by construction"))
}

/// Mirrors the image left to right.
pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let mut out = img.clone();
    let (w, c) = (img.width(), img.channels());
    for y in 0..img.height() {
        for x in 0..w {
            for ch in 0..c {
                out.set(x, y, ch, img.get(w - 1 - x, y, ch));
            }
        }
    }
    out
}

/// Random parameters drawn for one augmentation call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_deg: f64,
    pub zoom: f64,
    pub brightness: f64,
}

impl AugmentDraw {
    /// Draws in a fixed order (flip, angle, zoom, brightness) whatever the
    /// configured ranges, so one image always consumes the same randomness.
    pub fn sample<R: Rng + ?Sized>(cfg: &PreprocessConfig, rng: &mut R) -> Self {
        let u_flip: f64 = rng.gen();
        let u_rot: f64 = rng.gen();
        let u_zoom: f64 = rng.gen();
        let u_bright: f64 = rng.gen();
        let [zlo, zhi] = cfg.zoom_range;
        Self {
            flip: u_flip < cfg.flip_prob,
            angle_deg: (2.0 * u_rot - 1.0) * cfg.rotation_deg,
            zoom: zlo + (zhi - zlo) * u_zoom,
            brightness: 1.0 + (2.0 * u_bright - 1.0) * cfg.brightness_delta,
        }
    }
}

/// Flip, then rotate about the center, then zoom about the center, then
/// scale brightness. Rotation and zoom are resampled in one bilinear pass
/// with edge-clamped fill; output pixels stay within [0, 255].
pub fn augment<R: Rng + ?Sized>(img: &ImageBuffer, cfg: &PreprocessConfig, rng: &mut R) -> ImageBuffer {
    apply_augment(img, AugmentDraw::sample(cfg, rng))
}

pub fn apply_augment(img: &ImageBuffer, draw: AugmentDraw) -> ImageBuffer {
    let mut out = if draw.flip { hflip(img) } else { img.clone() };
    if draw.angle_deg != 0.0 || draw.zoom != 1.0 {
        out = rotate_zoom(&out, draw.angle_deg, draw.zoom);
    }
    if draw.brightness != 1.0 {
        let f = draw.brightness as f32;
        out.data_mut().iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 255.0));
    }
    out
}

fn rotate_zoom(img: &ImageBuffer, angle_deg: f64, zoom: f64) -> ImageBuffer {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            // undo the zoom, then the rotation
            let dx = (x as f64 - cx) / zoom;
            let dy = (y as f64 - cy) / zoom;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            for ch in 0..c {
                out.set(x, y, ch, sample_bilinear(img, sx, sy, ch).clamp(0.0, 255.0));
            }
        }
    }
    out
}
