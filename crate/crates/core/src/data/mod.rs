//! Parcel records, the `PSET` on-disk dataset, the synthetic phenology
//! generator, normalization, augmentation, fold splits and batch assembly.

mod augment;
mod batch;
mod format;
mod normalize;
mod split;
mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

use crate::pse::GeometricFeatures;

pub use augment::{augment, AUGMENT_CLIP, AUGMENT_STD};
pub use batch::{BatchBuilder, Sampling, EVAL_SAMPLE_SEED};
pub use format::{
    format_check, read_dataset, write_dataset, FormatReport, Manifest, ManifestEntry, BLOB_FILE,
    BLOB_MAGIC, BLOB_VERSION, MANIFEST_FILE,
};
pub use normalize::{NormalizationStats, NORM_EPS};
pub use split::{assign_blocks, kfold_split, FoldSplit};
pub use synthetic::{generate_synthetic, notched_rectangle, ClassProfile, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("parcel {id}: {msg}")]
    Record { id: u64, msg: String },
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
    #[error("{parcels} parcels cannot be split into {folds} folds")]
    TooFewParcels { parcels: usize, folds: usize },
    #[error("normalization covers {expected} dates x {expected_channels} channels, parcel {id} has {found} x {found_channels}")]
    DateMismatch {
        id: u64,
        expected: usize,
        expected_channels: usize,
        found: usize,
        found_channels: usize,
    },
    #[error("empty training fold")]
    EmptyFold,
    #[error("unknown parcel id {0}")]
    UnknownParcel(u64),
    #[error(transparent)]
    Model(#[from] crate::error::ModelError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        DataError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// One parcel as a pixel set: values are stored `[T, C, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcelRecord {
    pub id: u64,
    pub label: usize,
    pub dates: usize,
    pub channels: usize,
    pub pixel_count: usize,
    /// Days since the first acquisition, one per date.
    pub days: Vec<u32>,
    pub geo: GeometricFeatures,
    pub pixels: Vec<f32>,
}

impl ParcelRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |msg: String| DataError::Record { id: self.id, msg };
        if self.pixel_count == 0 {
            return Err(err("no pixels".into()));
        }
        if self.pixels.len() != self.dates * self.channels * self.pixel_count {
            return Err(err(format!(
                "{} values for {}x{}x{}",
                self.pixels.len(),
                self.dates,
                self.channels,
                self.pixel_count
            )));
        }
        if self.days.len() != self.dates {
            return Err(err(format!(
                "{} day stamps for {} dates",
                self.days.len(),
                self.dates
            )));
        }
        if self.days.first().is_some_and(|&d| d != 0) || self.days.windows(2).any(|w| w[1] < w[0]) {
            return Err(err("day stamps must start at 0 and be nondecreasing".into()));
        }
        if let Some(i) = self.pixels.iter().position(|v| !v.is_finite()) {
            return Err(err(format!("non-finite pixel value at flat index {i}")));
        }
        if self
            .geo
            .to_array()
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(err(
                "geometric features must be finite and nonnegative".into()
            ));
        }
        Ok(())
    }

    /// Value of pixel `n`, channel `c`, date `t`.
    pub fn value(&self, t: usize, c: usize, n: usize) -> f32 {
        self.pixels[(t * self.channels + c) * self.pixel_count + n]
    }
}

/// Records plus the metadata the manifest carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub dates: usize,
    pub channels: usize,
    pub folds: usize,
    pub fold_seed: u64,
    /// Cross-validation block of every record, parallel to `records`.
    pub blocks: Vec<usize>,
    pub records: Vec<ParcelRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn get(&self, id: u64) -> Result<&ParcelRecord, DataError> {
        self.index_of(id)
            .map(|i| &self.records[i])
            .ok_or(DataError::UnknownParcel(id))
    }

    /// Train/validation/test record indices of fold `fold`.
    pub fn split(&self, fold: usize) -> Result<FoldSplit, DataError> {
        split::split_from_blocks(&self.blocks, self.folds, fold)
    }
}
