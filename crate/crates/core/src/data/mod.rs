//! Dataset discovery, image decoding, preprocessing and batching.

mod batch;
mod image;
mod manifest;
mod preprocess;

use std::path::PathBuf;

pub use self::batch::{
    derive_seed, epoch_order, load_sample, make_batches, sample_rng, Batch, BatchOptions, SplitLoader,
};
pub use self::image::{decode_image, resize_bilinear, resize_plane, ImageBuffer};
pub use self::manifest::{scan_dataset, DatasetManifest, Label, ManifestSummary, Sample, SPLITS};
pub use self::preprocess::{
    apply_augment, augment, hflip, normalize, AugmentDraw, PreprocessConfig, IMAGENET_MEAN, IMAGENET_STD,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("no splits found under {0}")]
    NoSplits(PathBuf),
    #[error("split '{split}' is missing under {root}")]
    MissingSplit { root: PathBuf, split: String },
    #[error("unknown class directory '{name}' in split '{split}'")]
    UnknownClass { split: String, name: String },
    #[error("file listed twice: {0}")]
    DuplicatePath(PathBuf),
    #[error("no images found under {0}")]
    NoImages(PathBuf),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt {format} stream (within first {offset} bytes): {detail}")]
    Decode { format: String, offset: usize, detail: String },
    #[error("could not encode image: {0}")]
    Encode(String),
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
}
