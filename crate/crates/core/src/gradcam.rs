//! Gradient-weighted class activation maps.
//!
//! The explained score is always the positive-class logit, whatever the
//! network predicts for the image.

use crate::data::{resize_plane, DataError, ImageBuffer};
use crate::model::{ForwardOptions, ModelError, Network};
use crate::tensor::{BnMode, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum GradcamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("unknown layer '{layer}'; valid layers: {}", valid.join(", "))]
    UnknownLayer { layer: String, valid: Vec<String> },
    #[error("non-finite gradient at layer '{0}'")]
    NonFiniteGradient(String),
    #[error("expected an image of shape {expected:?}, found {found:?}")]
    InputShape { found: Vec<usize>, expected: Vec<usize> },
    #[error("heatmap is {heatmap_h}x{heatmap_w} but the image is {image_h}x{image_w}")]
    SizeMismatch { heatmap_h: usize, heatmap_w: usize, image_h: usize, image_w: usize },
    #[error("alpha {0} is outside [0, 1]")]
    InvalidAlpha(f32),
}

/// A Grad-CAM map at feature and at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Rectified channel-weighted sum of the target features, `h x w`.
    pub raw: Tensor<f32>,
    /// `raw` resampled to the input extents and divided by its maximum.
    pub normalized: Tensor<f32>,
    pub target_layer: String,
    /// Always `"positive"`: the map explains the positive-class score.
    pub explained_class: String,
    pub logit: f32,
    /// Sigmoid of `logit`.
    pub class_score: f32,
    /// Channel weights: spatial mean of the score gradient.
    pub alphas: Vec<f32>,
}

impl Heatmap {
    /// Position (row, column) of the largest normalized value; the first in
    /// raster order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.normalized.shape()[1];
        let mut best = 0;
        for (i, &v) in self.normalized.data().iter().enumerate() {
            if v > self.normalized.data()[best] {
                best = i;
            }
        }
        (best / w, best % w)
    }

    /// The normalized map as an 8-bit grayscale image.
    pub fn to_image(&self) -> ImageBuffer {
        let (h, w) = (self.normalized.shape()[0], self.normalized.shape()[1]);
        let data = self.normalized.data().iter().map(|v| (v * 255.0).clamp(0.0, 255.0)).collect();
        ImageBuffer::new(w, h, 1, data).expect("values clamped to range")
    }

    /// Resamples the normalized map to `height x width`, for overlaying on
    /// an original of a different size.
    pub fn resized(&self, height: usize, width: usize) -> Heatmap {
        let (h, w) = (self.normalized.shape()[0], self.normalized.shape()[1]);
        let plane = normalize_by_max(resize_plane(self.normalized.data(), h, w, height, width));
        Heatmap { normalized: Tensor::new(vec![height, width], plane).expect("sized"), ..self.clone() }
    }

    /// Comma-separated rows of the normalized map.
    pub fn to_csv(&self) -> String {
        let w = self.normalized.shape()[1];
        let mut out = String::new();
        for row in self.normalized.data().chunks(w) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn normalize_by_max(mut plane: Vec<f32>) -> Vec<f32> {
    let max = plane.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        plane.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        plane.iter_mut().for_each(|v| *v = 0.0);
    }
    plane
}

/// Computes the Grad-CAM map of one preprocessed image (`3 x H x W` or
/// `1 x 3 x H x W`) at `target_layer`, or at the network's configured layer
/// when `None`. The network is only read.
pub fn gradcam(net: &Network, image: &Tensor<f32>, target_layer: Option<&str>) -> Result<Heatmap, GradcamError> {
    let spec = net.spec();
    let layer = target_layer.map_or_else(|| spec.gradcam_layer(), str::to_string);
    let mut valid = spec.block_names();
    if !valid.contains(&layer) {
        valid.sort();
        return Err(GradcamError::UnknownLayer { layer, valid });
    }
    let [c, h, w] = spec.input_shape;
    let ok = match image.shape() {
        [ic, ih, iw] => [*ic, *ih, *iw] == [c, h, w],
        [1, ic, ih, iw] => [*ic, *ih, *iw] == [c, h, w],
        _ => false,
    };
    if !ok {
        return Err(GradcamError::InputShape { found: image.shape().to_vec(), expected: vec![1, c, h, w] });
    }
    let batch = image.clone().reshape(vec![1, c, h, w])?;

    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    // the input is the only trainable leaf, so every activation downstream
    // of it records a gradient
    let input = g.leaf(batch, true);
    let mut stats = net.running_stats().clone();
    let trace = net.forward(&mut g, input, &params, &mut stats, BnMode::Eval, ForwardOptions::default())?;
    let score = g.sum(trace.logits)?;
    g.backward(score)?;

    let act = trace.activations[&layer];
    let a = g.value(act);
    let (k, fh, fw) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let grad = g.grad(act).ok_or_else(|| GradcamError::NonFiniteGradient(layer.clone()))?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(GradcamError::NonFiniteGradient(layer));
    }
    let hw = fh * fw;
    let alphas: Vec<f32> =
        grad.chunks(hw).map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32).collect();
    let mut raw = vec![0.0f64; hw];
    for (ch, &alpha) in a.data().chunks(hw).zip(&alphas).take(k) {
        for (r, &v) in raw.iter_mut().zip(ch) {
            *r += alpha as f64 * v as f64;
        }
    }
    let raw: Vec<f32> = raw.into_iter().map(|v| v.max(0.0) as f32).collect();
    let normalized = normalize_by_max(resize_plane(&raw, fh, fw, h, w));
    let logit = g.value(trace.logits).data()[0];
    Ok(Heatmap {
        raw: Tensor::new(vec![fh, fw], raw)?,
        normalized: Tensor::new(vec![h, w], normalized)?,
        target_layer: layer,
        explained_class: "positive".into(),
        logit,
        class_score: g.value(trace.probs).data()[0],
        alphas,
    })
}

const fn build_colormap() -> [[u8; 3]; 256] {
    // blue -> cyan -> yellow -> red, piecewise linear in integer steps
    let stops: [[i32; 3]; 4] = [[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]];
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let pos = i as i32 * 3;
        let seg = if pos / 255 > 2 { 2 } else { pos / 255 };
        let t = pos - seg * 255;
        let (a, b) = (stops[seg as usize], stops[seg as usize + 1]);
        let mut c = 0;
        while c < 3 {
            lut[i][c] = ((a[c] * (255 - t) + b[c] * t + 127) / 255) as u8;
            c += 1;
        }
        i += 1;
    }
    lut
}

/// Heatmap colors from 0 (blue) to 1 (red).
pub static COLORMAP: [[u8; 3]; 256] = build_colormap();

/// Colormap entry for a value in [0, 1].
pub fn colormap(v: f32) -> [u8; 3] {
    COLORMAP[(v.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// Blends the colormapped heatmap onto `original`:
/// `(1 - alpha) * original + alpha * color`. The original must already have
/// the heatmap's extents (see [`Heatmap::resized`]); gray originals are
/// replicated to RGB.
pub fn overlay(heatmap: &Heatmap, original: &ImageBuffer, alpha: f32) -> Result<ImageBuffer, GradcamError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GradcamError::InvalidAlpha(alpha));
    }
    let (h, w) = (heatmap.normalized.shape()[0], heatmap.normalized.shape()[1]);
    if (original.height(), original.width()) != (h, w) {
        return Err(GradcamError::SizeMismatch {
            heatmap_h: h,
            heatmap_w: w,
            image_h: original.height(),
            image_w: original.width(),
        });
    }
    let rgb = original.to_rgb();
    let mut data = Vec::with_capacity(h * w * 3);
    for (px, &v) in rgb.data().chunks(3).zip(heatmap.normalized.data()) {
        let color = colormap(v);
        for c in 0..3 {
            data.push((1.0 - alpha) * px[c] + alpha * color[c] as f32);
        }
    }
    Ok(ImageBuffer::new(w, h, 3, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_and_monotone_red() {
        assert_eq!(COLORMAP[0], [0, 0, 255]);
        assert_eq!(COLORMAP[255], [255, 0, 0]);
        assert_eq!(colormap(1.0), [255, 0, 0]);
        assert!(COLORMAP.windows(2).all(|p| p[1][0] >= p[0][0]));
    }

    #[test]
    fn zero_map_normalizes_to_zeros() {
        assert_eq!(normalize_by_max(vec![0.0; 4]), vec![0.0; 4]);
        assert_eq!(normalize_by_max(vec![0.0, 2.0, 1.0]), vec![0.0, 1.0, 0.5]);
    }
}
