use std::fmt::Write as _;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ad::{AdError, AdamConfig, AdamState, Mode, Scalar, Tape};
use crate::classifier::{predict, probabilities, Batch, Classifier, EncoderVariant, ModelConfig};
use crate::data::{BatchBuilder, DataError, Dataset, NormalizationStats, ParcelRecord, Sampling};
use crate::tae::AttentionTrace;
use crate::{Error, ModelError};

use super::{Metrics, ModelBundle};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fold: usize,
    pub adam: AdamConfig,
    pub augment: bool,
    /// 1 runs strictly single-threaded; more overlaps batch assembly with
    /// optimization and splits evaluation across threads.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            seed: 0,
            fold: 0,
            adam: AdamConfig::default(),
            augment: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        // Train-mode batchnorm needs two rows.
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        let a = self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: f64,
    pub val_miou: f64,
    pub seconds: f64,
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_OA,val_mIoU,seconds\n");
    for r in log {
        writeln!(
            s,
            "{},{},{},{},{:.3}",
            r.epoch, r.train_loss, r.val_oa, r.val_miou, r.seconds
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The selected epoch's model, Adam state and the fold's statistics.
    pub bundle: ModelBundle,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub validation: Metrics,
    pub test: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub parcel_id: u64,
    pub label: usize,
    pub predicted: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

fn builder<'a>(
    cfg: &ModelConfig,
    stats: &'a NormalizationStats,
    augment: bool,
) -> BatchBuilder<'a> {
    BatchBuilder {
        stats,
        sample_size: cfg.pse.sample_size,
        augment,
        spectral: cfg.encoder == EncoderVariant::Ms,
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Model(ModelError::Ad(
            ad @ (AdError::NonFinite { .. } | AdError::NonFiniteGradient(_)),
        )) => Error::Diverged {
            epoch,
            reason: ad.to_string(),
        },
        e => e,
    }
}

/// One optimizer step; returns the batch loss.
fn step(
    model: &mut Classifier<f32>,
    adam: &mut AdamState<f32>,
    batch: &Batch<f32>,
) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let mut updates = Vec::new();
    let out = model.forward(&mut tape, batch, Mode::Train, &mut updates)?;
    let loss = model.loss(&mut tape, &out, batch)?;
    let value = tape.value(loss).data()[0].f64();
    let grads = tape.backward(loss)?;
    model.store.zero_grads();
    model.store.accumulate(&grads);
    adam.step(&mut model.store)?;
    for u in &updates {
        u.apply(&mut model.store);
    }
    Ok(value)
}

/// Shuffled training batches of one epoch; a trailing singleton joins the
/// previous batch.
fn epoch_batches<'a>(
    order: &[usize],
    records: &[&'a ParcelRecord],
    size: usize,
) -> Vec<Vec<&'a ParcelRecord>> {
    let mut out: Vec<Vec<&ParcelRecord>> = order
        .chunks(size)
        .map(|c| c.iter().map(|&i| records[i]).collect())
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn run_epoch(
    model: &mut Classifier<f32>,
    adam: &mut AdamState<f32>,
    builder: &BatchBuilder<'_>,
    batches: &[Vec<&ParcelRecord>],
    rng: &mut ChaCha8Rng,
    threads: usize,
) -> Result<f64, Error> {
    let mut total = 0.0;
    let mut count = 0usize;
    if threads <= 1 {
        for b in batches {
            let batch = builder.build::<f32>(b, Sampling::Train(rng))?;
            total += step(model, adam, &batch)? * batch.len() as f64;
            count += batch.len();
        }
    } else {
        std::thread::scope(|s| -> Result<(), Error> {
            let (tx, rx) = sync_channel::<Result<Batch<f32>, DataError>>(2);
            s.spawn(move || {
                for b in batches {
                    let built = builder.build::<f32>(b, Sampling::Train(rng));
                    let failed = built.is_err();
                    if tx.send(built).is_err() || failed {
                        break;
                    }
                }
            });
            for batch in rx {
                let batch = batch?;
                total += step(model, adam, &batch)? * batch.len() as f64;
                count += batch.len();
            }
            Ok(())
        })?;
    }
    Ok(total / count.max(1) as f64)
}

/// Trains on one fold of `data`, selecting the epoch with the best
/// validation mIoU (earliest on ties), then evaluates it on the test block.
///
/// With `out`, the selected model is written to `out/best.psta` whenever it
/// improves, so a diverged run still leaves the last good checkpoint.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome, Error> {
    train_impl(model_cfg, cfg, data, out, None)
}

fn train_impl(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
    poison_epoch: Option<usize>,
) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.classes != data.classes {
        return Err(Error::ClassMismatch {
            model: model_cfg.classes,
            data: data.classes,
        });
    }
    if model_cfg.channels() != data.channels {
        return Err(Error::Config(format!(
            "model expects {} channels, dataset has {}",
            model_cfg.channels(),
            data.channels
        )));
    }
    let split = data.split(cfg.fold)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| &data.records[i]).collect::<Vec<_>>();
    let (train_set, val_set, test_set) = (
        pick(&split.train),
        pick(&split.validation),
        pick(&split.test),
    );
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(DataError::EmptyFold.into());
    }
    let stats = NormalizationStats::compute(train_set.iter().copied())?;
    let train_builder = builder(model_cfg, &stats, cfg.augment);

    let mut model = Classifier::<f32>::new(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let meta = |epoch: usize| {
        vec![
            ("checkpoint.fold".to_string(), cfg.fold.to_string()),
            ("checkpoint.epoch".to_string(), epoch.to_string()),
            ("checkpoint.seed".to_string(), cfg.seed.to_string()),
        ]
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, Classifier<f32>, AdamState<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        if poison_epoch == Some(epoch) {
            let id = model.store.ids().next().expect("parameters");
            model.store.get_mut(id).data_mut()[0] = f32::NAN;
        }
        order.shuffle(&mut rng);
        let batches = epoch_batches(&order, &train_set, cfg.batch_size);
        let loss = run_epoch(
            &mut model,
            &mut adam,
            &train_builder,
            &batches,
            &mut rng,
            cfg.threads,
        )
        .map_err(|e| diverged(epoch, e))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("training loss {loss}"),
            });
        }
        let val = evaluate(&model, &stats, &val_set, cfg.batch_size, cfg.threads)?.metrics;
        let rec = EpochRecord {
            epoch,
            train_loss: loss,
            val_oa: val.overall_accuracy,
            val_miou: val.miou,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "fold {} epoch {epoch}: loss {:.5} val OA {:.4} mIoU {:.4} ({:.1}s)",
            cfg.fold, rec.train_loss, rec.val_oa, rec.val_miou, rec.seconds
        );
        log.push(rec);
        if best.as_ref().is_none_or(|(_, m, _, _)| val.miou > m.miou) {
            if let Some(dir) = out {
                let bundle = ModelBundle {
                    model: model.clone(),
                    stats: stats.clone(),
                    adam: Some(adam.clone()),
                    meta: meta(epoch),
                };
                bundle.save(&dir.join("best.psta"))?;
            }
            best = Some((epoch, val, model.clone(), adam.clone()));
        }
    }
    let (best_epoch, validation, model, adam) = best.expect("at least one epoch");
    if best_epoch < cfg.epochs / 2 {
        warn!("best validation epoch {best_epoch} of {}", cfg.epochs);
    }
    let test = if test_set.is_empty() {
        Evaluation {
            metrics: Metrics::from_predictions(model_cfg.classes, &[], &[]),
            predictions: Vec::new(),
        }
    } else {
        evaluate(&model, &stats, &test_set, cfg.batch_size, cfg.threads)?
    };
    Ok(TrainOutcome {
        bundle: ModelBundle {
            model,
            stats,
            adam: Some(adam),
            meta: meta(best_epoch),
        },
        log,
        best_epoch,
        validation,
        test,
    })
}

fn predict_chunk(
    model: &Classifier<f32>,
    builder: &BatchBuilder<'_>,
    records: &[&ParcelRecord],
    batch_size: usize,
) -> Result<Vec<Prediction>, Error> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch = builder.build::<f32>(chunk, Sampling::Eval)?;
        let (logits, _) = model.infer(&batch)?;
        let k = model.cfg.classes;
        for (i, r) in chunk.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let p = probabilities(row);
            let c = predict(row);
            out.push(Prediction {
                parcel_id: r.id,
                label: r.label,
                predicted: c,
                probability: p[c],
            });
        }
    }
    Ok(out)
}

/// Eval-mode predictions and metrics for `records`, in input order.
pub fn evaluate(
    model: &Classifier<f32>,
    stats: &NormalizationStats,
    records: &[&ParcelRecord],
    batch_size: usize,
    threads: usize,
) -> Result<Evaluation, Error> {
    let k = model.cfg.classes;
    if let Some(r) = records.iter().find(|r| r.label >= k) {
        return Err(Error::ClassMismatch {
            model: k,
            data: r.label + 1,
        });
    }
    let b = builder(&model.cfg, stats, false);
    let predictions = if threads <= 1 || records.len() <= batch_size {
        predict_chunk(model, &b, records, batch_size)?
    } else {
        let per = records.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(per)
                .map(|part| s.spawn(|| predict_chunk(model, &b, part, batch_size)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
        .concat()
    };
    let truth: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let pred: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    Ok(Evaluation {
        metrics: Metrics::from_predictions(k, &truth, &pred),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcelAttention {
    pub parcel_id: u64,
    pub days: Vec<u32>,
    pub trace: AttentionTrace,
}

/// Eval-mode attention weights of each parcel.
pub fn inspect_attention(
    model: &Classifier<f32>,
    stats: &NormalizationStats,
    records: &[&ParcelRecord],
    batch_size: usize,
) -> Result<Vec<ParcelAttention>, Error> {
    let b = builder(&model.cfg, stats, false);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch = b.build::<f32>(chunk, Sampling::Eval)?;
        let (_, traces) = model.infer(&batch)?;
        for (r, trace) in chunk.iter().zip(traces) {
            out.push(ParcelAttention {
                parcel_id: r.id,
                days: r.days.clone(),
                trace,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::pse::PseConfig;
    use crate::tae::TaeConfig;

    pub(crate) fn tiny_model(classes: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            pse: PseConfig {
                sample_size: 8,
                mlp1: vec![channels, 8, 8],
                mlp2: vec![16],
                ..PseConfig::default()
            },
            tae: TaeConfig {
                d_model: 16,
                d_k: 4,
                heads: 2,
                mlp3: vec![16, 16],
                ..TaeConfig::default()
            },
            decoder: vec![8],
            classes,
            ms_hidden: vec![8],
            ..ModelConfig::default()
        }
    }

    fn tiny_data(parcels: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            classes: 3,
            parcels,
            dates: 6,
            channels: 3,
            max_pixels: 30,
            spacing: 60,
            jitter: 5,
            seed: 4,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let recs = tiny_data(30).records;
        let refs: Vec<&ParcelRecord> = recs.iter().collect();
        let order: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&order, &refs, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn selection_is_argmax_of_logged_curve() {
        let data = tiny_data(60);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&tiny_model(3, 3), &cfg, &data, None).unwrap();
        let best = out
            .log
            .iter()
            .fold(None::<&EpochRecord>, |b, r| match b {
                Some(b) if b.val_miou >= r.val_miou => Some(b),
                _ => Some(r),
            })
            .unwrap();
        assert_eq!(out.best_epoch, best.epoch);
        assert_eq!(out.validation.miou, best.val_miou);
        assert_eq!(out.log.len(), 6);
    }

    #[test]
    fn threaded_training_matches_single_threaded() {
        let data = tiny_data(60);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train(&tiny_model(3, 3), &cfg, &data, None).unwrap();
        let b = train(
            &tiny_model(3, 3),
            &TrainConfig { threads: 3, ..cfg },
            &data,
            None,
        )
        .unwrap();
        let losses = |o: &TrainOutcome| o.log.iter().map(|r| r.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.test.predictions, b.test.predictions);
    }

    #[test]
    fn class_and_config_errors() {
        let data = tiny_data(30);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&tiny_model(4, 3), &cfg, &data, None),
            Err(Error::ClassMismatch { model: 4, data: 3 })
        ));
        let bad = TrainConfig {
            batch_size: 1,
            ..cfg.clone()
        };
        assert!(matches!(
            train(&tiny_model(3, 3), &bad, &data, None),
            Err(Error::Config(_))
        ));
        let bad = TrainConfig { epochs: 0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let data = tiny_data(60);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let err =
            train_impl(&tiny_model(3, 3), &cfg, &data, Some(dir.path()), Some(3)).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 3, .. }), "{err}");
        let kept = ModelBundle::load(&dir.path().join("best.psta")).unwrap();
        let epoch: usize = kept.meta("checkpoint.epoch").unwrap().parse().unwrap();
        assert!((1..=2).contains(&epoch));
        assert!(kept.model.store.entries().iter().all(|e| e
            .value
            .data()
            .iter()
            .all(|v| v.is_finite())));

        let blown = TrainConfig {
            adam: AdamConfig {
                lr: 1e30,
                ..AdamConfig::default()
            },
            ..cfg
        };
        let err = train(&tiny_model(3, 3), &blown, &data, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    }
}
