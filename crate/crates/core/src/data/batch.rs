use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::image::{decode_image, resize_bilinear};
use super::preprocess::{augment, normalize, PreprocessConfig};
use super::{DataError, Sample};
use crate::tensor::Tensor;

/// One mini-batch: images `N x 3 x H x W` and labels `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub paths: Vec<PathBuf>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of stream identifiers into a new seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Per-sample augmentation generator, independent of processing order.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xA06, epoch, index]))
}

/// How a split is turned into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub shuffle: bool,
    pub augment: bool,
}

impl BatchOptions {
    pub fn training(batch_size: usize) -> Self {
        Self { batch_size, shuffle: true, augment: true }
    }

    pub fn evaluation(batch_size: usize) -> Self {
        Self { batch_size, shuffle: false, augment: false }
    }
}

/// Order in which `n` samples are visited in `epoch`.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5F1, epoch]));
        order.shuffle(&mut rng);
    }
    order
}

/// Decode, resize to `target_size`, and (for training) augment one sample;
/// returns the normalized `3 x S x S` tensor.
pub fn load_sample(
    sample: &Sample,
    cfg: &PreprocessConfig,
    augment_with: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<f32>, DataError> {
    let bytes =
        fs::read(&sample.path).map_err(|e| DataError::Io { path: sample.path.clone(), detail: e.to_string() })?;
    let img = decode_image(&bytes).map_err(|e| DataError::File { path: sample.path.clone(), source: Box::new(e) })?;
    let mut img = resize_bilinear(&img, cfg.target_size, cfg.target_size)?;
    if let Some(rng) = augment_with {
        img = augment(&img, cfg, rng);
    }
    normalize(&img, cfg)
}

/// Runs the full decode → resize → (augment) → normalize pipeline over a
/// split. The final short batch is kept. Shuffling and augmentation draw
/// from generators derived from `(cfg.seed, epoch, sample index)`.
pub fn make_batches(
    samples: &[Sample],
    cfg: &PreprocessConfig,
    opts: BatchOptions,
    epoch: u64,
) -> Result<Vec<Batch>, DataError> {
    if opts.batch_size == 0 {
        return Err(DataError::InvalidConfig("batch_size must be at least 1".into()));
    }
    cfg.validate()?;
    let order = epoch_order(samples.len(), opts.shuffle, cfg.seed, epoch);
    let tensors: Vec<Tensor<f32>> = order
        .par_iter()
        .map(|&i| {
            let mut rng = opts.augment.then(|| sample_rng(cfg.seed, epoch, i as u64));
            load_sample(&samples[i], cfg, rng.as_mut())
        })
        .collect::<Result<_, _>>()?;
    let s = cfg.target_size;
    let mut batches = Vec::new();
    for (chunk_idx, chunk) in order.chunks(opts.batch_size).enumerate() {
        let start = chunk_idx * opts.batch_size;
        let mut images = Vec::with_capacity(chunk.len() * 3 * s * s);
        for t in &tensors[start..start + chunk.len()] {
            images.extend_from_slice(t.data());
        }
        let labels = chunk.iter().map(|&i| samples[i].label.as_f32()).collect();
        batches.push(Batch {
            images: Tensor::new(vec![chunk.len(), 3, s, s], images).expect("pipeline output is finite"),
            labels: Tensor::new(vec![chunk.len()], labels).expect("labels"),
            paths: chunk.iter().map(|&i| samples[i].path.clone()).collect(),
        });
    }
    Ok(batches)
}

/// A split bound to its preprocessing, producing fresh batches per epoch.
#[derive(Clone, Debug)]
pub struct SplitLoader {
    pub samples: Vec<Sample>,
    pub cfg: PreprocessConfig,
    pub opts: BatchOptions,
}

impl SplitLoader {
    pub fn batches(&self, epoch: u64) -> Result<Vec<Batch>, DataError> {
        make_batches(&self.samples, &self.cfg, self.opts, epoch)
    }
}
