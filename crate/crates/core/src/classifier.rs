//! The end-to-end parcel classifier: a per-date encoder shared across
//! dates, the temporal attention encoder and a decoder MLP.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ad::{BnUpdate, Mlp, Mode, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::ModelError;
use crate::pse::{PixelSetEncoder, PixelSetInput, PseConfig, GEOMETRIC_FEATURES};
use crate::tae::{AttentionTrace, SequenceInput, TaeConfig, TemporalAttentionEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    /// Pixel-set encoder over sampled pixels.
    Pse,
    /// Precomputed per-channel mean and std of all pixels, then a small MLP.
    Ms,
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::Pse => "pse",
            EncoderVariant::Ms => "ms",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pse" => Ok(EncoderVariant::Pse),
            "ms" => Ok(EncoderVariant::Ms),
            other => Err(format!("unknown encoder '{other}' (expected pse or ms)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub pse: PseConfig,
    pub tae: TaeConfig,
    /// Hidden widths of the decoder; input is the TAE output, output is `classes`.
    pub decoder: Vec<usize>,
    pub classes: usize,
    pub encoder: EncoderVariant,
    /// Hidden widths of the MS encoder between `2C` and `d_model`.
    pub ms_hidden: Vec<usize>,
    pub focal_gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pse: PseConfig::default(),
            tae: TaeConfig::default(),
            decoder: vec![64, 32],
            classes: 6,
            encoder: EncoderVariant::Pse,
            ms_hidden: vec![64],
            focal_gamma: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.pse.channels()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.pse.validate()?;
        self.tae.validate()?;
        if self.classes < 2 {
            return Err(ModelError::Config(format!(
                "model.classes must be at least 2, got {}",
                self.classes
            )));
        }
        if self.encoder == EncoderVariant::Pse && self.pse.out_dim() != self.tae.d_model {
            return Err(ModelError::Config(format!(
                "PSE output width {} differs from tae.d_model {}",
                self.pse.out_dim(),
                self.tae.d_model
            )));
        }
        if self.decoder.contains(&0) || self.ms_hidden.contains(&0) {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(ModelError::Config(format!(
                "model.focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        Ok(())
    }
}

/// One model-ready batch. All parcels share the same number of dates `T`;
/// shorter sequences are front-padded and flagged in `time_mask`.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub parcel_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub dates: usize,
    pub sample_size: usize,
    pub channels: usize,
    /// `[B, T, S, C]`
    pub pixels: Vec<T>,
    /// `[B, S]`
    pub pool_mask: Vec<bool>,
    /// `[B, 4]`
    pub geo: Vec<T>,
    /// `[B, T, 2C]`: per-date channel means then stds over every pixel.
    pub spectral: Vec<T>,
    /// `[B, T]`
    pub days: Vec<u32>,
    /// `[B, T]`, `None` when every date is real.
    pub time_mask: Option<Vec<bool>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.parcel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parcel_ids.is_empty()
    }

    pub fn pixel_input(&self) -> PixelSetInput<T> {
        PixelSetInput {
            batch: self.len(),
            dates: self.dates,
            sample_size: self.sample_size,
            channels: self.channels,
            pixels: self.pixels.clone(),
            pool_mask: self.pool_mask.clone(),
            geo: self.geo.clone(),
        }
    }

    /// Parcel `i` as a batch of one.
    pub fn select(&self, i: usize) -> Batch<T> {
        let (t, s, c) = (self.dates, self.sample_size, self.channels);
        Batch {
            parcel_ids: vec![self.parcel_ids[i]],
            labels: self.labels.get(i).copied().into_iter().collect(),
            dates: t,
            sample_size: s,
            channels: c,
            pixels: self.pixels[i * t * s * c..(i + 1) * t * s * c].to_vec(),
            pool_mask: self.pool_mask[i * s..(i + 1) * s].to_vec(),
            geo: self.geo[i * GEOMETRIC_FEATURES..(i + 1) * GEOMETRIC_FEATURES].to_vec(),
            spectral: if self.spectral.is_empty() {
                Vec::new()
            } else {
                self.spectral[i * t * 2 * c..(i + 1) * t * 2 * c].to_vec()
            },
            days: self.days[i * t..(i + 1) * t].to_vec(),
            time_mask: self
                .time_mask
                .as_ref()
                .map(|m| m[i * t..(i + 1) * t].to_vec()),
        }
    }
}

/// Channel-wise mean and population std over all `n` pixels of every date,
/// from pixels stored `[T, C, N]`. Returns `[T, 2C]`.
pub fn spectral_moments(
    pixels: &[f32],
    dates: usize,
    channels: usize,
    n: usize,
) -> Result<Vec<f64>, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyParcel);
    }
    let mut out = vec![0.0; dates * 2 * channels];
    for t in 0..dates {
        for c in 0..channels {
            let px = &pixels[(t * channels + c) * n..(t * channels + c + 1) * n];
            let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            out[t * 2 * channels + c] = mean;
            out[t * 2 * channels + channels + c] = var.sqrt();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum DateEncoder {
    Pse(PixelSetEncoder),
    Ms(Mlp),
}

/// Result of a forward pass: logits `[B, K]` and attention `[B, H, T]`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    pub attention: Var,
}

#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: DateEncoder,
    pub tae: TemporalAttentionEncoder,
    pub decoder: Mlp,
}

impl<T: Scalar> Classifier<T> {
    /// Builds the model with parameters drawn from a `seed`-keyed stream.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = match cfg.encoder {
            EncoderVariant::Pse => {
                DateEncoder::Pse(PixelSetEncoder::new(&mut store, &cfg.pse, &mut rng)?)
            }
            EncoderVariant::Ms => {
                let mut dims = vec![2 * cfg.channels()];
                dims.extend_from_slice(&cfg.ms_hidden);
                dims.push(cfg.tae.d_model);
                DateEncoder::Ms(Mlp::new(&mut store, "ms", &dims, false, &mut rng))
            }
        };
        let tae = TemporalAttentionEncoder::new(&mut store, &cfg.tae, &mut rng)?;
        let mut dims = vec![cfg.tae.out_dim()];
        dims.extend_from_slice(&cfg.decoder);
        dims.push(cfg.classes);
        let decoder = Mlp::new(&mut store, "decoder", &dims, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            tae,
            decoder,
        })
    }

    /// Trainable parameters as counted from the layer shapes.
    pub fn parameter_count(&self) -> usize {
        let enc = match &self.encoder {
            DateEncoder::Pse(p) => p.parameter_count(),
            DateEncoder::Ms(m) => m.parameter_count(),
        };
        enc + self.tae.parameter_count() + self.decoder.parameter_count()
    }

    fn encode(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &Batch<T>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, ModelError> {
        let (b, t, c) = (batch.len(), batch.dates, batch.channels);
        if c != self.cfg.channels() {
            return Err(ModelError::Dimension(format!(
                "batch has {c} channels, model expects {}",
                self.cfg.channels()
            )));
        }
        match &self.encoder {
            DateEncoder::Pse(pse) => pse.forward(tape, store, &batch.pixel_input(), mode, updates),
            DateEncoder::Ms(mlp) => {
                if batch.spectral.len() != b * t * 2 * c {
                    return Err(ModelError::Dimension(format!(
                        "expected {} spectral moments, got {}",
                        b * t * 2 * c,
                        batch.spectral.len()
                    )));
                }
                let x = tape.constant(
                    Tensor::new(vec![b * t, 2 * c], batch.spectral.clone())
                        .map_err(ModelError::Ad)?,
                );
                let e = mlp.forward(tape, store, x, mode, updates)?;
                Ok(tape.reshape(e, &[b, t, self.cfg.tae.d_model])?)
            }
        }
    }

    /// Forward pass against an explicit parameter store (same layout as `self.store`).
    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<ForwardOutput, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if batch.days.len() != batch.len() * batch.dates {
            return Err(ModelError::Dimension(format!(
                "batch of {} parcels x {} dates has {} day stamps",
                batch.len(),
                batch.dates,
                batch.days.len()
            )));
        }
        let e = self.encode(tape, store, batch, mode, updates)?;
        let seq = SequenceInput {
            embeddings: e,
            days: &batch.days,
            time_mask: batch.time_mask.as_deref(),
        };
        let (o, attention) = self.tae.forward(tape, store, &seq, mode, updates)?;
        let logits = self.decoder.forward(tape, store, o, mode, updates)?;
        Ok(ForwardOutput { logits, attention })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<ForwardOutput, ModelError> {
        self.forward_with(&self.store, tape, batch, mode, updates)
    }

    /// Focal loss of a forward pass on `batch.labels`.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        out: &ForwardOutput,
        batch: &Batch<T>,
    ) -> Result<Var, ModelError> {
        Ok(tape.focal_loss(out.logits, &batch.labels, self.cfg.focal_gamma)?)
    }

    /// Eval-mode logits `[B, K]` and one attention trace per parcel.
    pub fn infer(&self, batch: &Batch<T>) -> Result<(Tensor<T>, Vec<AttentionTrace>), ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::Eval, &mut Vec::new())?;
        Ok((
            tape.value(out.logits).clone(),
            AttentionTrace::from_tensor(tape.value(out.attention)),
        ))
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities of one logit row, computed in f64.
pub fn probabilities<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let e: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[0.0f32; 5]), 0);
        assert_eq!(predict(&[0.0, 3.0, 1.0, 3.0]), 1);
        assert_eq!(predict(&[-1.0, -2.0, 5.0]), 2);
    }

    #[test]
    fn spectral_moments_of_simple_parcels() {
        let single = spectral_moments(&[0.3, 0.7], 1, 2, 1).unwrap();
        assert_eq!(single[2..], [0.0, 0.0]);
        let constant = spectral_moments(&[0.5; 8], 2, 1, 4).unwrap();
        assert_eq!(constant, vec![0.5, 0.0, 0.5, 0.0]);
        assert!(matches!(
            spectral_moments(&[], 1, 1, 0),
            Err(ModelError::EmptyParcel)
        ));
    }

    #[test]
    fn default_config_validates_and_mismatch_is_rejected() {
        ModelConfig::default().validate().unwrap();
        let mut cfg = ModelConfig::default();
        cfg.pse.mlp2 = vec![64];
        assert!(cfg.validate().is_err());
        cfg.encoder = EncoderVariant::Ms;
        cfg.validate().unwrap();
        let cfg = ModelConfig {
            classes: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = probabilities(&[1.0f32, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }
}
