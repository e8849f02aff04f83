//! Local surrogate explanations over superpixels.
//!
//! An image is split into segments, random subsets of segments are hidden,
//! the black box scores every perturbed copy, and a kernel-weighted linear
//! model of score against "segment kept" indicators is fitted. Its
//! coefficients are the attributions.

mod slic;
mod surrogate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::slic::{slic_segments, Superpixels};
pub use self::surrogate::{cosine_distance_to_ones, fit_surrogate, kernel_weights, sample_perturbations, Surrogate};
use crate::data::{derive_seed, DataError, ImageBuffer};

#[derive(Debug, thiserror::Error)]
pub enum LimeError {
    #[error("invalid LIME config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("{samples} perturbation samples cannot fit {segments} segment weights plus an intercept")]
    TooFewSamples { samples: usize, segments: usize },
    #[error("surrogate normal equations are singular with ridge_lambda = {lambda}; use ridge_lambda > 0")]
    Singular { lambda: f64 },
    #[error("prediction for perturbation sample {index} failed: {detail}")]
    Predict { index: usize, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// What hidden segments are painted with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    /// Each segment's own mean color.
    #[default]
    Mean,
    /// Mid gray (128).
    Gray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimeConfig {
    pub n_segments: usize,
    pub compactness: f64,
    pub max_iters: usize,
    pub n_samples: usize,
    /// Kernel bandwidth; `None` means `0.25 * sqrt(d)` for `d` segments.
    pub kernel_width: Option<f64>,
    pub ridge_lambda: f64,
    pub fill: Fill,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_segments: 50,
            compactness: 10.0,
            max_iters: 10,
            n_samples: 1000,
            kernel_width: None,
            ridge_lambda: 1e-3,
            fill: Fill::Mean,
            top_k: 5,
            seed: 0,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self) -> Result<(), LimeError> {
        let bad = |m: String| Err(LimeError::InvalidConfig(m));
        if self.n_segments < 1 {
            return bad("n_segments must be at least 1".into());
        }
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1".into());
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return bad(format!("compactness must be positive, got {}", self.compactness));
        }
        if let Some(k) = self.kernel_width {
            if !(k > 0.0 && k.is_finite()) {
                return bad(format!("kernel_width must be positive, got {k}"));
            }
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return bad(format!("ridge_lambda must be finite and >= 0, got {}", self.ridge_lambda));
        }
        Ok(())
    }

    pub fn kernel_width_for(&self, d: usize) -> f64 {
        self.kernel_width.unwrap_or(0.25 * (d as f64).sqrt())
    }
}

/// Per-segment, per-channel mean color.
fn segment_means(image: &ImageBuffer, sp: &Superpixels) -> Vec<Vec<f64>> {
    let c = image.channels();
    let mut sums = vec![vec![0.0f64; c]; sp.count];
    let mut counts = vec![0usize; sp.count];
    for (px, &l) in image.data().chunks(c).zip(&sp.labels) {
        counts[l] += 1;
        for k in 0..c {
            sums[l][k] += px[k] as f64;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    sums
}

/// Copy of `image` with every segment whose switch is 0 painted over.
pub fn apply_mask(image: &ImageBuffer, sp: &Superpixels, z: &[u8], fill: Fill) -> Result<ImageBuffer, LimeError> {
    if z.len() != sp.count {
        return Err(LimeError::LengthMismatch { what: "mask", expected: sp.count, found: z.len() });
    }
    if (image.width(), image.height()) != (sp.width, sp.height) {
        return Err(LimeError::LengthMismatch {
            what: "image pixels",
            expected: sp.width * sp.height,
            found: image.width() * image.height(),
        });
    }
    let c = image.channels();
    let means = match fill {
        Fill::Mean => Some(segment_means(image, sp)),
        Fill::Gray => None,
    };
    let mut data = image.data().to_vec();
    for (px, &l) in data.chunks_mut(c).zip(&sp.labels) {
        if z[l] != 0 {
            continue;
        }
        for k in 0..c {
            px[k] = means.as_ref().map_or(128.0, |m| m[l][k] as f32);
        }
    }
    Ok(ImageBuffer::new(image.width(), image.height(), c, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimeExplanation {
    /// Surrogate coefficient per segment id.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub local_r2: f64,
    /// (segment id, weight), largest magnitude first; lower id on ties.
    pub top_k: Vec<(usize, f64)>,
    /// Black-box score of the unperturbed image.
    pub prediction: f64,
    pub n_segments: usize,
    pub kernel_width: f64,
    pub seed: u64,
    pub config: LimeConfig,
}

/// Segment ids ordered by descending |weight|, ties by id.
pub fn rank_segments(weights: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    ranked
}

/// Explains `predict`'s score for `image`. Returns the segmentation along
/// with the explanation. Perturbed copies are scored in parallel and
/// gathered by index, so the result does not depend on scheduling; on
/// failure the lowest failing sample index is reported.
pub fn explain<F, E>(
    predict: F,
    image: &ImageBuffer,
    cfg: &LimeConfig,
) -> Result<(Superpixels, LimeExplanation), LimeError>
where
    F: Fn(&ImageBuffer) -> Result<f64, E> + Sync,
    E: std::fmt::Display,
{
    cfg.validate()?;
    let sp = slic_segments(image, cfg.n_segments, cfg.compactness, cfg.max_iters)?;
    let d = sp.count;
    if cfg.n_samples < d + 1 {
        return Err(LimeError::TooFewSamples { samples: cfg.n_samples, segments: d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x11E]));
    let z = sample_perturbations(d, cfg.n_samples, &mut rng);
    let scores: Vec<Result<f64, LimeError>> = z
        .par_iter()
        .enumerate()
        .map(|(index, row)| {
            let masked = apply_mask(image, &sp, row, cfg.fill)?;
            let s = predict(&masked).map_err(|e| LimeError::Predict { index, detail: e.to_string() })?;
            if s.is_finite() {
                Ok(s)
            } else {
                Err(LimeError::Predict { index, detail: format!("non-finite score {s}") })
            }
        })
        .collect();
    let preds = scores.into_iter().collect::<Result<Vec<f64>, _>>()?;
    let kw = cfg.kernel_width_for(d);
    let sw = kernel_weights(&z, kw);
    let fit = fit_surrogate(&z, &preds, &sw, cfg.ridge_lambda)?;
    let mut top_k = rank_segments(&fit.weights);
    top_k.truncate(cfg.top_k.min(d));
    let explanation = LimeExplanation {
        top_k,
        intercept: fit.intercept,
        local_r2: fit.local_r2,
        weights: fit.weights,
        prediction: preds[0],
        n_segments: d,
        kernel_width: kw,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    Ok((sp, explanation))
}

const OUTLINE: [f32; 3] = [255.0, 255.0, 0.0];
const POSITIVE: [f32; 3] = [255.0, 0.0, 0.0];
const NEGATIVE: [f32; 3] = [0.0, 0.0, 255.0];

/// RGB rendering of `image` with segment borders outlined in yellow and the
/// `k` highest-|weight| segments tinted at half strength: red where the
/// weight is positive, blue where it is negative. Zero weights get no tint.
pub fn lime_overlay(image: &ImageBuffer, sp: &Superpixels, explanation: &LimeExplanation, k: usize) -> ImageBuffer {
    let mut tint: Vec<Option<[f32; 3]>> = vec![None; sp.count];
    for &(id, w) in rank_segments(&explanation.weights).iter().take(k.min(sp.count)) {
        if w > 0.0 {
            tint[id] = Some(POSITIVE);
        } else if w < 0.0 {
            tint[id] = Some(NEGATIVE);
        }
    }
    let rgb = image.to_rgb();
    let edges = sp.boundaries();
    let mut data = Vec::with_capacity(rgb.data().len());
    for ((px, &l), &edge) in rgb.data().chunks(3).zip(&sp.labels).zip(&edges) {
        let base = if edge { OUTLINE } else { [px[0], px[1], px[2]] };
        for c in 0..3 {
            data.push(match tint[l] {
                Some(t) => 0.5 * base[c] + 0.5 * t[c],
                None => base[c],
            });
        }
    }
    ImageBuffer::new(rgb.width(), rgb.height(), 3, data).expect("blend stays in range")
}
