//! Temporal Attention Encoder: sinusoidal day-offset encoding, per-head
//! key/query projections, a single master query per head and an MLP over
//! the concatenated head outputs.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::ad::{BnUpdate, Mlp, Mode, ParamId, ParamStore, ReduceKind, Scalar, Tape, Tensor, Var};
use crate::error::ModelError;

/// `p[t][i-1] = sin(day_t / τ^(2i/d) + (π/2)·(i mod 2))` for `i = 1..=d`.
pub fn positional_encoding(days: &[u32], d: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(days.len() * d);
    for &day in days {
        for i in 1..=d {
            let phase = if i % 2 == 1 { FRAC_PI_2 } else { 0.0 };
            out.push((day as f64 / tau.powf(2.0 * i as f64 / d as f64) + phase).sin());
        }
    }
    out
}

/// Days elapsed since the first acquisition of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DayStamps(Vec<u32>);

impl DayStamps {
    pub fn new(days: Vec<u32>) -> Result<Self, ModelError> {
        if days.first().is_some_and(|&d| d != 0) {
            return Err(ModelError::Config(format!(
                "day stamps must start at 0, got {}",
                days[0]
            )));
        }
        if days.windows(2).any(|w| w[1] < w[0]) {
            return Err(ModelError::Config(
                "day stamps must be nondecreasing".into(),
            ));
        }
        Ok(Self(days))
    }

    /// Shifts absolute dates so the first one becomes day 0.
    pub fn from_dates(dates: &[u32]) -> Result<Self, ModelError> {
        let d0 = dates.first().copied().unwrap_or(0);
        if dates.iter().any(|&d| d < d0) {
            return Err(ModelError::Config(
                "day stamps must be nondecreasing".into(),
            ));
        }
        Self::new(dates.iter().map(|d| d - d0).collect())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MasterQuery {
    Mean,
    Max,
    Last,
}

impl fmt::Display for MasterQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MasterQuery::Mean => "mean",
            MasterQuery::Max => "max",
            MasterQuery::Last => "last",
        })
    }
}

impl FromStr for MasterQuery {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(MasterQuery::Mean),
            "max" => Ok(MasterQuery::Max),
            "last" => Ok(MasterQuery::Last),
            other => Err(format!(
                "unknown master query mode '{other}' (expected mean, max or last)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaeConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
    pub tau: f64,
    pub master_query: MasterQuery,
    pub positional_encoding: bool,
    /// Output widths of MLP3; its input is `heads * d_model`.
    pub mlp3: Vec<usize>,
}

impl Default for TaeConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_k: 32,
            heads: 4,
            tau: 1000.0,
            master_query: MasterQuery::Mean,
            positional_encoding: true,
            mlp3: vec![128, 128],
        }
    }
}

impl TaeConfig {
    pub fn out_dim(&self) -> usize {
        self.mlp3
            .last()
            .copied()
            .unwrap_or(self.heads * self.d_model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_k == 0 || self.heads == 0 {
            return Err(ModelError::Config(
                "tae.d_model, tae.d_k and tae.heads must be positive".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ModelError::Config(format!(
                "tae.tau must be positive, got {}",
                self.tau
            )));
        }
        if self.mlp3.is_empty() || self.mlp3.contains(&0) {
            return Err(ModelError::Config(
                "tae.mlp3 needs at least one layer".into(),
            ));
        }
        Ok(())
    }
}

/// Attention weights of one parcel, `weights[h * steps + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub steps: usize,
    pub weights: Vec<f64>,
}

impl AttentionTrace {
    /// Splits a `[B, H, T]` attention tensor into one trace per parcel.
    pub fn from_tensor<T: Scalar>(a: &Tensor<T>) -> Vec<Self> {
        let (b, h, t) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        (0..b)
            .map(|i| AttentionTrace {
                heads: h,
                steps: t,
                weights: a.data()[i * h * t..(i + 1) * h * t]
                    .iter()
                    .map(|v| v.f64())
                    .collect(),
            })
            .collect()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.steps..(h + 1) * self.steps]
    }
}

/// Sequence input: `e [B, T, d_model]` on the tape plus per-parcel day stamps.
///
/// Shorter sequences are front-padded; `time_mask [B, T]` marks the real dates.
pub struct SequenceInput<'a> {
    pub embeddings: Var,
    pub days: &'a [u32],
    pub time_mask: Option<&'a [bool]>,
}

#[derive(Debug, Clone)]
pub struct TemporalAttentionEncoder {
    pub cfg: TaeConfig,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub mlp3: Mlp,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(n: usize, limit: f64, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect()
}

impl TemporalAttentionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &TaeConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (h, dk, de) = (cfg.heads, cfg.d_k, cfg.d_model);
        // Per head: rows [k (d_k), q (d_k)], all heads stacked.
        let w1 = uniform(h * 2 * dk * de, (6.0 / (de + 2 * dk) as f64).sqrt(), rng);
        let fc1_weight = store.add(
            "tae.fc1.weight",
            Tensor::new(vec![h * 2 * dk, de], w1).expect("shape"),
            true,
        );
        let fc1_bias = store.add("tae.fc1.bias", Tensor::zeros(&[h * 2 * dk]), true);
        let w2 = uniform(h * dk * dk, (6.0 / (2 * dk) as f64).sqrt(), rng);
        let fc2_weight = store.add(
            "tae.fc2.weight",
            Tensor::new(vec![h, dk, dk], w2).expect("shape"),
            true,
        );
        let fc2_bias = store.add("tae.fc2.bias", Tensor::zeros(&[h, dk]), true);
        let mut dims = vec![h * de];
        dims.extend_from_slice(&cfg.mlp3);
        let mlp3 = Mlp::new(store, "tae.mlp3", &dims, false, rng);
        Ok(Self {
            cfg: cfg.clone(),
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
            mlp3,
        })
    }

    pub fn parameter_count(&self) -> usize {
        let (h, dk, de) = (self.cfg.heads, self.cfg.d_k, self.cfg.d_model);
        h * 2 * dk * (de + 1) + h * dk * (dk + 1) + self.mlp3.parameter_count()
    }

    /// Adds the positional encoding when enabled: `[B, T, d_model]`.
    pub fn values<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        e: Var,
        days: &[u32],
    ) -> Result<Var, ModelError> {
        let s = tape.shape(e).to_vec();
        if s.len() != 3 || s[2] != self.cfg.d_model || days.len() != s[0] * s[1] {
            return Err(ModelError::Dimension(format!(
                "sequence {s:?} with {} day stamps does not fit d_model {}",
                days.len(),
                self.cfg.d_model
            )));
        }
        if !self.cfg.positional_encoding {
            return Ok(e);
        }
        let p: Vec<T> = positional_encoding(days, self.cfg.d_model, self.cfg.tau)
            .into_iter()
            .map(T::of)
            .collect();
        let p = tape.constant(Tensor::new(s, p).map_err(ModelError::Ad)?);
        Ok(tape.add(e, p)?)
    }

    /// Keys and queries `[B, T, H, d_k]` from the values.
    pub fn keys_queries<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        v: Var,
    ) -> Result<(Var, Var), ModelError> {
        let s = tape.shape(v).to_vec();
        let (b, t, h, dk) = (s[0], s[1], self.cfg.heads, self.cfg.d_k);
        let flat = tape.reshape(v, &[b * t, self.cfg.d_model])?;
        let w = tape.param(self.fc1_weight, store.get(self.fc1_weight));
        let bias = tape.param(self.fc1_bias, store.get(self.fc1_bias));
        let kq = tape.linear(flat, w, bias)?;
        let kq = tape.reshape(kq, &[b, t, h, 2 * dk])?;
        let k = tape.narrow(kq, 3, 0, dk)?;
        let q = tape.narrow(kq, 3, dk, dk)?;
        Ok((k, q))
    }

    /// One query per head `[B, H, d_k]` aggregated over time, then FC2.
    pub fn master_query<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        time_mask: Option<&[bool]>,
    ) -> Result<Var, ModelError> {
        let s = tape.shape(q).to_vec();
        let (b, t) = (s[0], s[1]);
        let agg = match self.cfg.master_query {
            MasterQuery::Mean => tape.reduce(q, 1, ReduceKind::Mean, time_mask)?,
            MasterQuery::Max => tape.reduce(q, 1, ReduceKind::Max, time_mask)?,
            MasterQuery::Last => {
                let last = tape.narrow(q, 1, t - 1, 1)?;
                tape.reshape(last, &[b, s[2], s[3]])?
            }
        };
        let w = tape.param(self.fc2_weight, store.get(self.fc2_weight));
        let bias = tape.param(self.fc2_bias, store.get(self.fc2_bias));
        Ok(tape.grouped_linear(agg, w, bias)?)
    }

    /// Softmax attention of each master query over time and the weighted
    /// sum of values: returns `(o [B, H, d_model], a [B, H, T])`.
    pub fn attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        q_hat: Var,
        k: Var,
        v: Var,
        time_mask: Option<&[bool]>,
    ) -> Result<(Var, Var), ModelError> {
        let scale = T::of(1.0 / (self.cfg.d_k as f64).sqrt());
        let logits = tape.attention_logits(q_hat, k, scale)?;
        let mask = time_mask.map(|m| {
            let t = tape.shape(logits)[2];
            let h = self.cfg.heads;
            m.chunks(t)
                .flat_map(|row| std::iter::repeat_n(row, h).flatten().copied())
                .collect::<Vec<bool>>()
        });
        let a = tape.softmax(logits, 2, mask.as_deref())?;
        let o = tape.weighted_sum(a, v)?;
        Ok((o, a))
    }

    /// Returns `(ô [B, out], a [B, H, T])`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &SequenceInput<'_>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, Var), ModelError> {
        let s = tape.shape(input.embeddings).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(ModelError::Dimension(format!(
                "sequence input has shape {s:?}"
            )));
        }
        if let Some(m) = input.time_mask {
            if m.len() != s[0] * s[1] {
                return Err(ModelError::Dimension(format!(
                    "time mask has {} flags for {s:?}",
                    m.len()
                )));
            }
        }
        let v = self.values(tape, input.embeddings, input.days)?;
        let (k, q) = self.keys_queries(tape, store, v)?;
        let q_hat = self.master_query(tape, store, q, input.time_mask)?;
        let (o, a) = self.attention(tape, q_hat, k, v, input.time_mask)?;
        let o = tape.reshape(o, &[s[0], self.cfg.heads * self.cfg.d_model])?;
        let out = self.mlp3.forward(tape, store, o, mode, updates)?;
        Ok((out, a))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn encoding_at_day_zero_alternates() {
        let p = positional_encoding(&[0], 128, 1000.0);
        for (j, v) in p.iter().enumerate() {
            let i = j + 1;
            assert_eq!(*v, if i % 2 == 1 { 1.0 } else { 0.0 }, "component {i}");
        }
    }

    #[test]
    fn encoding_spot_value() {
        let p = positional_encoding(&[100], 128, 1000.0);
        assert!((p[127] - (1e-4f64).sin()).abs() < 1e-15);
        let q = positional_encoding(&[37, 37], 16, 1000.0);
        assert_eq!(q[..16], q[16..]);
    }

    #[test]
    fn day_stamps_validate() {
        assert!(DayStamps::new(vec![0, 5, 5, 9]).is_ok());
        assert!(DayStamps::new(vec![1, 5]).is_err());
        assert!(DayStamps::new(vec![0, 5, 4]).is_err());
        assert_eq!(
            DayStamps::from_dates(&[10, 25, 40]).unwrap().as_slice(),
            &[0, 15, 30]
        );
    }

    #[test]
    fn parameter_count_of_default_config() {
        let mut store = ParamStore::<f32>::new();
        let tae = TemporalAttentionEncoder::new(
            &mut store,
            &TaeConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(tae.parameter_count(), 119_936);
        let stored: usize = store.trainable_ids().map(|id| store.get(id).numel()).sum();
        assert_eq!(stored, 119_936);
    }

    #[test]
    fn master_query_modes_parse() {
        for m in ["mean", "max", "last"] {
            assert_eq!(m.parse::<MasterQuery>().unwrap().to_string(), m);
        }
        assert!("first".parse::<MasterQuery>().is_err());
    }
}
