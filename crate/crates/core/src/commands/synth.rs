use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, write_json, CommandError};
use crate::data::{derive_seed, resize_plane, ImageBuffer, Label, SPLITS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    #[default]
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    /// Half-open pixel ranges (x, y) of the quadrant in a `size x size` image.
    pub fn bounds(self, size: usize) -> ((usize, usize), (usize, usize)) {
        let h = size / 2;
        match self {
            Quadrant::TopLeft => ((0, h), (0, h)),
            Quadrant::TopRight => ((h, size), (0, h)),
            Quadrant::BottomLeft => ((0, h), (h, size)),
            Quadrant::BottomRight => ((h, size), (h, size)),
        }
    }

    pub fn contains(self, x: f64, y: f64, size: usize) -> bool {
        let ((x0, x1), (y0, y1)) = self.bounds(size);
        x >= x0 as f64 && x < x1 as f64 && y >= y0 as f64 && y < y1 as f64
    }
}

/// Images per split; each split is half NORMAL, half PNEUMONIA (the odd one
/// out, if any, is NORMAL).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: &str) -> usize {
        match split {
            "train" => self.train,
            "val" => self.val,
            _ => self.test,
        }
    }
}

/// Planted-signal dataset: noisy gray images where every positive carries a
/// bright Gaussian blob centered inside one fixed quadrant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub quadrant: Quadrant,
    /// Peak blob brightness above the background, drawn uniformly.
    pub amplitude: [f64; 2],
    /// Blob standard deviation in pixels, drawn uniformly.
    pub sigma: [f64; 2],
    pub background: f64,
    /// Per-image brightness offset, uniform in ±this.
    pub shading: f64,
    /// Smooth background texture: values uniform in ±this on a coarse grid
    /// of `texture_cells` per side, bilinearly interpolated.
    pub texture: f64,
    pub texture_cells: usize,
    /// Per-pixel noise, uniform in ±this.
    pub noise: f64,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            quadrant: Quadrant::TopLeft,
            amplitude: [90.0, 140.0],
            sigma: [3.0, 5.0],
            background: 70.0,
            shading: 15.0,
            texture: 20.0,
            texture_cells: 6,
            noise: 5.0,
            counts: SplitCounts { train: 640, val: 128, test: 128 },
            seed: 0,
        }
    }
}

/// Where the blob of one positive image was planted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub center_x: f64,
    pub center_y: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_size: usize,
    pub quadrant: Quadrant,
    /// Keyed by path relative to the dataset root, with `/` separators.
    pub blobs: BTreeMap<String, BlobRecord>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))
    }
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CommandError> {
        let bad = |m: String| Err(CommandError::Config(m));
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        for (name, [lo, hi]) in [("amplitude", self.amplitude), ("sigma", self.sigma)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] must be positive and ordered"));
            }
        }
        let margin = self.margin();
        if 2.0 * margin >= (self.image_size / 2) as f64 {
            return bad(format!("sigma up to {} leaves no room for a blob in a quadrant", self.sigma[1]));
        }
        if self.texture_cells < 2 {
            return bad("texture_cells must be at least 2".into());
        }
        if [self.background, self.shading, self.texture, self.noise].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("background, shading, texture and noise must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Distance kept between a blob center and its quadrant's edges.
    fn margin(&self) -> f64 {
        (1.5 * self.sigma[1]).ceil()
    }

    /// Renders image `index` of `split` for `label`, returning the blob
    /// placement for positives.
    pub fn render(&self, split: &str, label: Label, index: usize) -> (ImageBuffer, Option<BlobRecord>) {
        let split_tag = SPLITS.iter().position(|s| *s == split).unwrap_or(SPLITS.len()) as u64;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x5E7, split_tag, label as u64, index as u64]));
        let n = self.image_size;
        let offset = self.background + rng.gen_range(-1.0..=1.0) * self.shading;
        let blob = (label == Label::Pneumonia).then(|| {
            let ((x0, x1), (y0, y1)) = self.quadrant.bounds(n);
            let m = self.margin();
            BlobRecord {
                center_x: rng.gen_range(x0 as f64 + m..x1 as f64 - m),
                center_y: rng.gen_range(y0 as f64 + m..y1 as f64 - m),
                sigma: rng.gen_range(self.sigma[0]..=self.sigma[1]),
                amplitude: rng.gen_range(self.amplitude[0]..=self.amplitude[1]),
            }
        });
        let cells = self.texture_cells;
        let grid: Vec<f32> = (0..cells * cells).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let texture = resize_plane(&grid, cells, cells, n, n);
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let mut v = offset + texture[y * n + x] as f64 * self.texture + rng.gen_range(-1.0..=1.0) * self.noise;
                if let Some(b) = blob {
                    let r2 = (x as f64 - b.center_x).powi(2) + (y as f64 - b.center_y).powi(2);
                    v += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                data.push(v.round().clamp(0.0, 255.0) as f32);
            }
        }
        (ImageBuffer::new(n, n, 1, data).expect("clamped gray image"), blob)
    }
}

/// Writes `{split}/{NORMAL,PNEUMONIA}/*.png` under `out` plus the blob
/// ground truth. Returns the ground truth.
pub fn cmd_synthesize(spec: &SyntheticSpec, out: &Path) -> Result<GroundTruth, CommandError> {
    spec.validate()?;
    let mut blobs = BTreeMap::new();
    for split in SPLITS {
        let total = spec.counts.get(split);
        let per_class = [(Label::Normal, total - total / 2), (Label::Pneumonia, total / 2)];
        for (label, count) in per_class {
            let dir = out.join(split).join(label.dir_name());
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            for i in 0..count {
                let (img, blob) = spec.render(split, label, i);
                let name = format!("{split}_{}_{i:05}.png", label.dir_name().to_lowercase());
                let path = dir.join(&name);
                let png = img.encode_png()?;
                fs::write(&path, png).map_err(|e| io_err(&path, e))?;
                if let Some(b) = blob {
                    blobs.insert(format!("{split}/{}/{name}", label.dir_name()), b);
                }
            }
        }
    }
    let truth = GroundTruth { image_size: spec.image_size, quadrant: spec.quadrant, blobs };
    write_json(&out.join(GROUND_TRUTH_FILE), &truth)?;
    Ok(truth)
}
