//! Training, evaluation, cross-validation, ablations and the checkpoint
//! bundle tying a model to its normalization statistics.

mod ablation;
mod cv;
mod metrics;
mod train;

use std::path::Path;

use crate::ad::{AdamState, Checkpoint};
use crate::classifier::Classifier;
use crate::config::{model_from_text, model_to_text};
use crate::data::NormalizationStats;
use crate::Error;

pub use ablation::{
    changed_fields, config_hash, run_ablations, AblationRow, AblationTable, Variant, VARIANTS,
};
pub use cv::{cross_validate, CrossValidation, FoldResult};
pub use metrics::Metrics;
pub use train::{
    epoch_log_csv, evaluate, inspect_attention, train, EpochRecord, Evaluation, ParcelAttention,
    Prediction, TrainConfig, TrainOutcome,
};

/// A trained model with everything needed to evaluate it on new parcels.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: Classifier<f32>,
    pub stats: NormalizationStats,
    pub adam: Option<AdamState<f32>>,
    /// Header entries outside the model configuration (fold, epoch, seed).
    pub meta: Vec<(String, String)>,
}

impl ModelBundle {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = model_to_text(&self.model.cfg);
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut ck = Checkpoint::new(header);
        ck.push_params(&self.model.store);
        if let Some(adam) = &self.adam {
            ck.push_adam(adam, &self.model.store);
        }
        self.stats.push_to(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Error> {
        let (cfg, meta) = model_from_text(&ck.header)
            .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let mut model = Classifier::<f32>::new(&cfg, 0)?;
        ck.load_params(&mut model.store)?;
        let adam = if ck.entry("adam.state").is_some() {
            Some(ck.load_adam(&model.store)?)
        } else {
            None
        };
        let stats = NormalizationStats::from_checkpoint(ck)?;
        if stats.channels != cfg.channels() {
            return Err(Error::Config(format!(
                "checkpoint normalization has {} channels, model expects {}",
                stats.channels,
                cfg.channels()
            )));
        }
        Ok(Self {
            model,
            stats,
            adam,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
