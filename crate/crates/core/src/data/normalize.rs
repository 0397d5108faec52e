use crate::ad::{Checkpoint, CheckpointError, Tensor};
use crate::pse::GEOMETRIC_FEATURES;

use super::{DataError, ParcelRecord};

pub const NORM_EPS: f64 = 1e-8;

/// Per-(date index, channel) pixel statistics and geometric-feature
/// statistics of a training fold. Stds are population stds.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub dates: usize,
    pub channels: usize,
    /// `[T, C]`
    pub mean: Vec<f64>,
    /// `[T, C]`
    pub std: Vec<f64>,
    pub geo_mean: [f64; GEOMETRIC_FEATURES],
    pub geo_std: [f64; GEOMETRIC_FEATURES],
}

impl NormalizationStats {
    pub fn compute<'a>(
        records: impl IntoIterator<Item = &'a ParcelRecord>,
    ) -> Result<Self, DataError> {
        let records: Vec<&ParcelRecord> = records.into_iter().collect();
        let first = records.first().ok_or(DataError::EmptyFold)?;
        let (t, c) = (first.dates, first.channels);
        let mut sum = vec![0.0f64; t * c];
        let mut count = 0usize;
        for r in &records {
            check_shape(r, t, c)?;
            for (k, s) in sum.iter_mut().enumerate() {
                let n = r.pixel_count;
                *s += r.pixels[k * n..(k + 1) * n]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            count += r.pixel_count;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; t * c];
        for r in &records {
            let n = r.pixel_count;
            for (k, s) in sq.iter_mut().enumerate() {
                *s += r.pixels[k * n..(k + 1) * n]
                    .iter()
                    .map(|&v| (v as f64 - mean[k]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();

        let m = records.len() as f64;
        let mut geo_mean = [0.0; GEOMETRIC_FEATURES];
        for r in &records {
            for (g, v) in geo_mean.iter_mut().zip(r.geo.to_array()) {
                *g += v / m;
            }
        }
        let mut geo_std = [0.0; GEOMETRIC_FEATURES];
        for r in &records {
            for ((g, v), mu) in geo_std.iter_mut().zip(r.geo.to_array()).zip(geo_mean) {
                *g += (v - mu).powi(2) / m;
            }
        }
        geo_std.iter_mut().for_each(|g| *g = g.sqrt());
        Ok(Self {
            dates: t,
            channels: c,
            mean,
            std,
            geo_mean,
            geo_std,
        })
    }

    pub fn check(&self, record: &ParcelRecord) -> Result<(), DataError> {
        check_shape(record, self.dates, self.channels)
    }

    #[inline]
    pub fn scale(&self, t: usize, c: usize) -> (f64, f64) {
        let k = t * self.channels + c;
        (self.mean[k], 1.0 / (self.std[k] + NORM_EPS))
    }

    /// `(x − μ) / (σ + ε)` for every pixel, same `[T, C, N]` layout.
    pub fn apply_f64(&self, record: &ParcelRecord) -> Result<Vec<f64>, DataError> {
        self.check(record)?;
        let n = record.pixel_count;
        let mut out = Vec::with_capacity(record.pixels.len());
        for t in 0..self.dates {
            for c in 0..self.channels {
                let (mu, inv) = self.scale(t, c);
                let k = t * self.channels + c;
                out.extend(
                    record.pixels[k * n..(k + 1) * n]
                        .iter()
                        .map(|&v| (v as f64 - mu) * inv),
                );
            }
        }
        Ok(out)
    }

    pub fn apply(&self, record: &ParcelRecord) -> Result<ParcelRecord, DataError> {
        let pixels = self
            .apply_f64(record)?
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Ok(ParcelRecord {
            pixels,
            ..record.clone()
        })
    }

    /// Inverse of [`apply_f64`](Self::apply_f64).
    pub fn invert(&self, normalized: &[f64], n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(normalized.len());
        for t in 0..self.dates {
            for c in 0..self.channels {
                let k = t * self.channels + c;
                let (mu, sd) = (self.mean[k], self.std[k] + NORM_EPS);
                out.extend(normalized[k * n..(k + 1) * n].iter().map(|v| v * sd + mu));
            }
        }
        out
    }

    /// Standardized geometric features.
    pub fn geo(&self, record: &ParcelRecord) -> [f64; GEOMETRIC_FEATURES] {
        let mut g = record.geo.to_array();
        for (i, v) in g.iter_mut().enumerate() {
            *v = (*v - self.geo_mean[i]) / (self.geo_std[i] + NORM_EPS);
        }
        g
    }

    pub fn push_to(&self, ckpt: &mut Checkpoint) {
        let (t, c) = (self.dates, self.channels);
        ckpt.push(
            "norm.mean",
            &Tensor::new(vec![t, c], self.mean.clone()).expect("shape"),
        );
        ckpt.push(
            "norm.std",
            &Tensor::new(vec![t, c], self.std.clone()).expect("shape"),
        );
        ckpt.push(
            "norm.geo_mean",
            &Tensor::new(vec![GEOMETRIC_FEATURES], self.geo_mean.to_vec()).expect("shape"),
        );
        ckpt.push(
            "norm.geo_std",
            &Tensor::new(vec![GEOMETRIC_FEATURES], self.geo_std.to_vec()).expect("shape"),
        );
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        let mean = ckpt.tensor::<f64>("norm.mean")?;
        let std = ckpt.tensor::<f64>("norm.std")?;
        let gm = ckpt.tensor::<f64>("norm.geo_mean")?;
        let gs = ckpt.tensor::<f64>("norm.geo_std")?;
        let shape_err =
            |name: &str, found: &[usize], expected: Vec<usize>| CheckpointError::ShapeMismatch {
                name: name.into(),
                found: found.to_vec(),
                expected,
            };
        if mean.shape().len() != 2 {
            return Err(shape_err("norm.mean", mean.shape(), vec![0, 0]));
        }
        if std.shape() != mean.shape() {
            return Err(shape_err("norm.std", std.shape(), mean.shape().to_vec()));
        }
        for (name, g) in [("norm.geo_mean", &gm), ("norm.geo_std", &gs)] {
            if g.shape() != [GEOMETRIC_FEATURES] {
                return Err(shape_err(name, g.shape(), vec![GEOMETRIC_FEATURES]));
            }
        }
        Ok(Self {
            dates: mean.shape()[0],
            channels: mean.shape()[1],
            geo_mean: gm.data().try_into().expect("checked"),
            geo_std: gs.data().try_into().expect("checked"),
            mean: mean.into_data(),
            std: std.into_data(),
        })
    }
}

fn check_shape(r: &ParcelRecord, dates: usize, channels: usize) -> Result<(), DataError> {
    if r.dates != dates || r.channels != channels {
        return Err(DataError::DateMismatch {
            id: r.id,
            expected: dates,
            expected_channels: channels,
            found: r.dates,
            found_channels: r.channels,
        });
    }
    Ok(())
}
