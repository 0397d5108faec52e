//! Synthetic phenology parcels.
//!
//! Each class has a double-logistic seasonal curve projected onto the
//! channels by a class mixing vector. Class 1 replays class 0 backwards in
//! time, so the two have the same per-date value distribution and differ
//! only in temporal order.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::pse::{compute_geometric_features, ParcelMask};

use super::{DataError, Dataset, ParcelRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub amplitude: f64,
    pub onset: f64,
    pub offset: f64,
    pub rise: f64,
    pub fall: f64,
    pub mixing: Vec<f64>,
    /// Read the curve at `day[T - 1 - t]` instead of `day[t]`.
    pub reversed: bool,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ClassProfile {
    pub fn signal(&self, day: f64) -> f64 {
        self.amplitude
            * (logistic(self.rise * (day - self.onset)) - logistic(self.fall * (day - self.offset)))
    }

    /// Noise-free curve on a day grid, one value per date.
    pub fn curve(&self, days: &[u32]) -> Vec<f64> {
        let t = days.len();
        (0..t)
            .map(|i| {
                let d = if self.reversed {
                    days[t - 1 - i]
                } else {
                    days[i]
                };
                self.signal(d as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub parcels: usize,
    pub dates: usize,
    pub channels: usize,
    pub min_pixels: usize,
    pub max_pixels: usize,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    /// Std of the per-parcel, per-channel offset.
    pub offset_noise: f64,
    /// Nominal days between acquisitions.
    pub spacing: u32,
    /// Uniform jitter (± days) applied to each acquisition of a day group.
    pub jitter: u32,
    /// Number of distinct acquisition calendars.
    pub day_groups: usize,
    /// Ratio between consecutive class sizes; 1 is balanced.
    pub imbalance: f64,
    pub folds: usize,
    pub seed: u64,
    /// Overrides the built-in class table when set.
    pub profiles: Option<Vec<ClassProfile>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            parcels: 3000,
            dates: 24,
            channels: 10,
            min_pixels: 4,
            max_pixels: 1000,
            noise: 0.03,
            offset_noise: 0.02,
            spacing: 15,
            jitter: 3,
            day_groups: 4,
            imbalance: 1.0,
            folds: 5,
            seed: 0,
            profiles: None,
        }
    }
}

fn mixing(channels: usize, phase: f64) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            0.25 + 0.75 * (0.5 + 0.5 * (TAU * c as f64 / channels.max(1) as f64 + phase).sin())
        })
        .collect()
}

impl SyntheticConfig {
    pub fn window(&self) -> f64 {
        self.spacing as f64 * (self.dates.saturating_sub(1)) as f64
    }

    /// Class 0 and 1 are the temporally swapped pair.
    pub fn class_profiles(&self) -> Vec<ClassProfile> {
        if let Some(p) = &self.profiles {
            return p.clone();
        }
        let w = self.window() / 345.0;
        let table = [
            (0.60, 60.0, 200.0, 0.08, 0.05, 0.0),
            (0.50, 120.0, 280.0, 0.06, 0.06, 1.3),
            (0.70, 40.0, 140.0, 0.10, 0.04, 2.6),
            (0.45, 180.0, 320.0, 0.07, 0.09, 3.9),
            (0.35, 90.0, 300.0, 0.05, 0.03, 5.2),
        ];
        let mut out = Vec::with_capacity(self.classes);
        for k in 0..self.classes {
            let (a, d1, d2, k1, k2, phase) = match k {
                0 | 1 => table[0],
                k if k - 1 < table.len() => table[k - 1],
                k => {
                    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c1a5 ^ k as u64);
                    let d1: f64 = rng.random_range(20.0..200.0);
                    (
                        rng.random_range(0.3..0.7),
                        d1,
                        (d1 + rng.random_range(60.0..150.0f64)).min(340.0),
                        rng.random_range(0.03..0.1),
                        rng.random_range(0.03..0.1),
                        rng.random_range(0.0..TAU),
                    )
                }
            };
            out.push(ClassProfile {
                amplitude: a,
                onset: d1 * w,
                offset: d2 * w,
                rise: k1 / w,
                fall: k2 / w,
                mixing: mixing(self.channels, phase),
                reversed: k == 1,
            });
        }
        out
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dates == 0 || self.channels == 0 {
            return bad("dates and channels must be positive".into());
        }
        if self.min_pixels == 0
            || self.min_pixels > self.max_pixels
            || self.max_pixels > u32::MAX as usize
        {
            return bad(format!(
                "pixel range [{}, {}] is invalid",
                self.min_pixels, self.max_pixels
            ));
        }
        if !(self.noise >= 0.0 && self.offset_noise >= 0.0) {
            return bad("noise stds must be nonnegative".into());
        }
        if self.spacing == 0 || 2 * self.jitter >= self.spacing {
            return bad(format!(
                "jitter ±{} must be below half the spacing {} to keep dates ordered",
                self.jitter, self.spacing
            ));
        }
        if self.day_groups == 0 {
            return bad("day_groups must be positive".into());
        }
        if !(self.imbalance > 0.0 && self.imbalance <= 1.0) {
            return bad(format!(
                "imbalance must be in (0, 1], got {}",
                self.imbalance
            ));
        }
        if self.parcels < self.folds.max(self.classes) {
            return bad(format!(
                "{} parcels cannot cover {} classes and {} folds",
                self.parcels, self.classes, self.folds
            ));
        }
        let profiles = self.class_profiles();
        if profiles.len() != self.classes {
            return bad(format!(
                "{} class profiles for {} classes",
                profiles.len(),
                self.classes
            ));
        }
        for (k, p) in profiles.iter().enumerate() {
            if p.offset <= p.onset {
                return bad(format!(
                    "class {k}: offset day {} must follow onset day {}",
                    p.offset, p.onset
                ));
            }
            if p.onset < 0.0 || p.offset > self.window() {
                return bad(format!(
                    "class {k}: season [{}, {}] leaves the observation window",
                    p.onset, p.offset
                ));
            }
            if p.mixing.len() != self.channels {
                return bad(format!(
                    "class {k}: mixing vector has {} channels",
                    p.mixing.len()
                ));
            }
        }
        Ok(())
    }

    /// Parcels per class: geometric decay by `imbalance`, at least one each.
    pub fn class_sizes(&self) -> Vec<usize> {
        let w: Vec<f64> = (0..self.classes)
            .map(|k| self.imbalance.powi(k as i32))
            .collect();
        let total: f64 = w.iter().sum();
        let spare = self.parcels - self.classes;
        let mut sizes: Vec<usize> = w
            .iter()
            .map(|x| 1 + (spare as f64 * x / total).floor() as usize)
            .collect();
        let mut k = 0;
        while sizes.iter().sum::<usize>() < self.parcels {
            sizes[k % self.classes] += 1;
            k += 1;
        }
        sizes
    }

    /// Acquisition calendar of one day group, starting at day 0.
    pub fn day_grid(&self, group: usize) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX - group as u64);
        let j = self.jitter as i64;
        (0..self.dates)
            .map(|t| {
                if t == 0 {
                    0
                } else {
                    (t as i64 * self.spacing as i64 + rng.random_range(-j..=j)) as u32
                }
            })
            .collect()
    }
}

/// A rectangle of at least `n` cells with notches cut from the first row's
/// start and the last row's end so exactly `n` pixels remain. The bounding
/// box stays tight.
pub fn notched_rectangle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ParcelMask {
    let aspect = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
    let w = ((n as f64 * aspect).sqrt().ceil() as usize).clamp(1, n);
    let h = n.div_ceil(w);
    let remove = h * w - n;
    let front = if h > 1 {
        rng.random_range(0..=remove)
    } else {
        0
    };
    let mut cells = vec![true; h * w];
    cells[..front].iter_mut().for_each(|c| *c = false);
    cells[h * w - (remove - front)..]
        .iter_mut()
        .for_each(|c| *c = false);
    ParcelMask::new(h, w, cells).expect("consistent size")
}

fn log_uniform<R: Rng + ?Sized>(lo: usize, hi: usize, rng: &mut R) -> usize {
    if lo == hi {
        return lo;
    }
    let x = rng
        .random_range((lo as f64).ln()..((hi + 1) as f64).ln())
        .exp();
    (x.floor() as usize).clamp(lo, hi)
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    block: usize,
    calendar: usize,
    /// Class-0 parcel of the same rank, for class-1 parcels.
    twin: Option<usize>,
}

/// Deals each class, in shuffled order, over (fold block, calendar) cells.
/// Classes 0 and 1 start from the same cell so the swapped pair fills every
/// cell alike; the other classes continue where the previous one stopped.
fn deal_cells(labels: &[usize], folds: usize, groups: usize, seed: u64) -> Vec<Cell> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut cells = vec![
        Cell {
            block: 0,
            calendar: 0,
            twin: None,
        };
        labels.len()
    ];
    let mut first = Vec::new();
    let mut next = 0;
    for k in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        members.shuffle(&mut rng);
        let start = if k == 1 { 0 } else { next };
        for (j, &i) in members.iter().enumerate() {
            let c = start + j;
            cells[i] = Cell {
                block: c % folds,
                calendar: (c / folds) % groups,
                twin: if k == 1 { first.get(j).copied() } else { None },
            };
        }
        if k == 0 {
            first = members.clone();
        }
        next = next.max(start + members.len());
    }
    cells
}

fn parcel_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let profiles = cfg.class_profiles();
    let grids: Vec<Vec<u32>> = (0..cfg.day_groups).map(|g| cfg.day_grid(g)).collect();
    let mut labels: Vec<usize> = cfg
        .class_sizes()
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let cells = deal_cells(&labels, cfg.folds, cfg.day_groups, cfg.seed ^ 0xf01d);

    let pixel_noise = Normal::new(0.0, cfg.noise).map_err(|e| DataError::Config(e.to_string()))?;
    let (t, c) = (cfg.dates, cfg.channels);
    let base: Vec<f64> = (0..c).map(|ch| 0.05 + 0.02 * ch as f64).collect();
    let mut records = Vec::with_capacity(cfg.parcels);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = parcel_rng(cfg.seed, i);
        let mut n = log_uniform(cfg.min_pixels, cfg.max_pixels, &mut rng);
        // Swapped-pair parcels share their size with a twin so both classes
        // weigh the same in pixel statistics.
        if let Some(j) = cells[i].twin {
            n = log_uniform(cfg.min_pixels, cfg.max_pixels, &mut parcel_rng(cfg.seed, j));
        }
        let mask = notched_rectangle(n, &mut rng);
        let geo = compute_geometric_features(&mask)?;
        let days = grids[cells[i].calendar].clone();
        let p = &profiles[label];
        let curve = p.curve(&days);
        let offsets: Vec<f64> = (0..c)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cfg.offset_noise * z
            })
            .collect();
        let mut pixels = Vec::with_capacity(t * c * n);
        for s in &curve {
            for ch in 0..c {
                let clean = base[ch] + p.mixing[ch] * s + offsets[ch];
                for _ in 0..n {
                    let noise = if cfg.noise > 0.0 {
                        pixel_noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    pixels.push((clean + noise) as f32);
                }
            }
        }
        records.push(ParcelRecord {
            id: i as u64,
            label,
            dates: t,
            channels: c,
            pixel_count: n,
            days,
            geo,
            pixels,
        });
    }
    Ok(Dataset {
        classes: cfg.classes,
        dates: t,
        channels: c,
        folds: cfg.folds,
        fold_seed: cfg.seed,
        blocks: cells.iter().map(|c| c.block).collect(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            parcels: 60,
            max_pixels: 40,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn counts_and_shapes() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.len(), 60);
        for r in &ds.records {
            r.validate().unwrap();
            assert_eq!((r.dates, r.channels), (24, 10));
            assert!((4..=40).contains(&r.pixel_count));
            assert_eq!(r.geo.pixel_count as usize, r.pixel_count);
        }
        let per_class: Vec<usize> = (0..6)
            .map(|k| ds.records.iter().filter(|r| r.label == k).count())
            .collect();
        assert_eq!(per_class, vec![10; 6]);
    }

    #[test]
    fn swapped_pair_fills_every_cell_alike() {
        for (classes, parcels) in [(2, 600), (6, 3000), (5, 211)] {
            let cfg = SyntheticConfig {
                classes,
                parcels,
                max_pixels: 8,
                ..SyntheticConfig::default()
            };
            let ds = generate_synthetic(&cfg).unwrap();
            let cell = |k: usize| {
                let mut n = vec![0usize; cfg.folds * cfg.day_groups];
                for (r, &b) in ds.records.iter().zip(&ds.blocks) {
                    if r.label == k {
                        let g = (0..cfg.day_groups)
                            .find(|&g| cfg.day_grid(g) == r.days)
                            .unwrap();
                        n[b * cfg.day_groups + g] += 1;
                    }
                }
                n
            };
            let (a, b) = (cell(0), cell(1));
            if cfg.class_sizes()[0] == cfg.class_sizes()[1] {
                assert_eq!(a, b);
            }
            let mut sizes = vec![0usize; cfg.folds];
            ds.blocks.iter().for_each(|&b| sizes[b] += 1);
            assert!(
                sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= classes,
                "{sizes:?}"
            );
        }
    }

    #[test]
    fn masks_have_exact_size_and_tight_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..300 {
            let m = notched_rectangle(n, &mut rng);
            assert_eq!(m.pixel_count(), n);
            assert_eq!(m.bounding_box(), Some((0, 0, m.height, m.width)));
        }
    }

    #[test]
    fn day_grids_are_ordered_and_jittered() {
        let cfg = small();
        for g in 0..cfg.day_groups {
            let d = cfg.day_grid(g);
            assert_eq!(d[0], 0);
            assert!(d.windows(2).all(|w| w[1] > w[0]));
            for (t, v) in d.iter().enumerate().skip(1) {
                assert!((*v as i64 - 15 * t as i64).abs() <= 3);
            }
        }
    }

    #[test]
    fn imbalance_decays_class_sizes() {
        let cfg = SyntheticConfig {
            parcels: 1000,
            imbalance: 0.5,
            ..SyntheticConfig::default()
        };
        let s = cfg.class_sizes();
        assert_eq!(s.iter().sum::<usize>(), 1000);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert!(s[0] > 10 * s[5]);
    }

    #[test]
    fn impossible_profiles_are_rejected() {
        let mut cfg = small();
        let mut p = cfg.class_profiles();
        p[2].offset = p[2].onset - 1.0;
        cfg.profiles = Some(p);
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(DataError::Config(_))
        ));
        let cfg = SyntheticConfig {
            jitter: 8,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }
}
