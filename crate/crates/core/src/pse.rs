//! Pixel-Set Encoder: a shared per-pixel MLP, mean/std pooling over the
//! unordered pixel axis, optional geometric features, and a second MLP
//! producing one embedding per acquisition date.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::ad::{BnUpdate, Mlp, Mode, ParamStore, ReduceKind, Scalar, Tape, Tensor, Var};
use crate::error::ModelError;

pub const GEOMETRIC_FEATURES: usize = 4;

/// Pixel indices (0-based) drawn from a parcel, shared by all of its dates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSample {
    pub indices: Vec<usize>,
    /// Number of distinct source pixels, `min(N, S)`.
    pub valid_count: usize,
}

impl PixelSample {
    /// True at the first occurrence of each distinct index. Pooling only
    /// looks at these positions, so repeats never bias the statistics.
    pub fn pool_mask(&self) -> Vec<bool> {
        let mut seen = std::collections::HashSet::with_capacity(self.indices.len());
        self.indices.iter().map(|i| seen.insert(*i)).collect()
    }
}

/// Draws `s` pixel indices out of `n`.
///
/// Without replacement when `n ≥ s`. Otherwise every pixel appears: the
/// indices cycle through a random permutation of `0..n`.
pub fn sample_pixels<R: Rng + ?Sized>(
    n: usize,
    s: usize,
    rng: &mut R,
) -> Result<PixelSample, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyParcel);
    }
    if s == 0 {
        return Err(ModelError::Config("sample size must be at least 1".into()));
    }
    if n >= s {
        return Ok(PixelSample {
            indices: index::sample(rng, n, s).into_vec(),
            valid_count: s,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(PixelSample {
        indices: (0..s).map(|j| perm[j % n]).collect(),
        valid_count: n,
    })
}

/// Binary raster of a parcel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParcelMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl ParcelMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self, ModelError> {
        if cells.len() != height * width {
            return Err(ModelError::Dimension(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn from_coords(
        height: usize,
        width: usize,
        coords: &[(usize, usize)],
    ) -> Result<Self, ModelError> {
        let mut cells = vec![false; height * width];
        for &(r, c) in coords {
            if r >= height || c >= width {
                return Err(ModelError::Dimension(format!(
                    "pixel ({r},{c}) outside {height}x{width}"
                )));
            }
            cells[r * width + c] = true;
        }
        Self::new(height, width, cells)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c]
    }

    pub fn pixel_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// `(row0, col0, rows, cols)` of the tightest box holding every pixel.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        (r0 != usize::MAX).then(|| (r0, c0, r1 - r0 + 1, c1 - c0 + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricFeatures {
    pub perimeter: f64,
    pub pixel_count: f64,
    pub cover_ratio: f64,
    pub perimeter_surface_ratio: f64,
}

impl GeometricFeatures {
    pub fn to_array(self) -> [f64; GEOMETRIC_FEATURES] {
        [
            self.perimeter,
            self.pixel_count,
            self.cover_ratio,
            self.perimeter_surface_ratio,
        ]
    }

    pub fn from_array(v: [f64; GEOMETRIC_FEATURES]) -> Self {
        Self {
            perimeter: v[0],
            pixel_count: v[1],
            cover_ratio: v[2],
            perimeter_surface_ratio: v[3],
        }
    }
}

/// Perimeter is the number of 4-connected pixel edges separating the parcel
/// from anything else, the raster border included.
pub fn compute_geometric_features(mask: &ParcelMask) -> Result<GeometricFeatures, ModelError> {
    let (r0, c0, h, w) = mask.bounding_box().ok_or(ModelError::EmptyMask)?;
    if (h, w) != (mask.height, mask.width) {
        log::warn!(
            "parcel mask {}x{} is not tight; using its {h}x{w} bounding box",
            mask.height,
            mask.width
        );
    }
    let inside = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < mask.height
            && (c as usize) < mask.width
            && mask.get(r as usize, c as usize)
    };
    let mut perimeter = 0usize;
    let mut n = 0usize;
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            if !mask.get(r, c) {
                continue;
            }
            n += 1;
            let (ri, ci) = (r as isize, c as isize);
            perimeter += [(ri - 1, ci), (ri + 1, ci), (ri, ci - 1), (ri, ci + 1)]
                .iter()
                .filter(|&&(a, b)| !inside(a, b))
                .count();
        }
    }
    Ok(GeometricFeatures {
        perimeter: perimeter as f64,
        pixel_count: n as f64,
        cover_ratio: n as f64 / (h * w) as f64,
        perimeter_surface_ratio: perimeter as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    MeanStd,
}

impl Pooling {
    pub fn width_factor(self) -> usize {
        match self {
            Pooling::Mean => 1,
            Pooling::MeanStd => 2,
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::MeanStd => "mean_std",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "mean_std" => Ok(Pooling::MeanStd),
            other => Err(format!(
                "unknown pooling '{other}' (expected mean or mean_std)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseConfig {
    pub sample_size: usize,
    /// `[C, hidden..., out]` of the shared per-pixel MLP.
    pub mlp1: Vec<usize>,
    pub pooling: Pooling,
    /// Output widths of MLP2; its input width follows from pooling and geometry.
    pub mlp2: Vec<usize>,
    pub include_geometric: bool,
}

impl Default for PseConfig {
    fn default() -> Self {
        Self {
            sample_size: 64,
            mlp1: vec![10, 32, 64],
            pooling: Pooling::MeanStd,
            mlp2: vec![128],
            include_geometric: true,
        }
    }
}

impl PseConfig {
    pub fn channels(&self) -> usize {
        self.mlp1[0]
    }

    pub fn pooled_dim(&self) -> usize {
        self.mlp1.last().copied().unwrap_or(0) * self.pooling.width_factor()
    }

    pub fn mlp2_input_dim(&self) -> usize {
        self.pooled_dim()
            + if self.include_geometric {
                GEOMETRIC_FEATURES
            } else {
                0
            }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp2.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sample_size == 0 {
            return Err(ModelError::Config(
                "pse.sample_size must be at least 1".into(),
            ));
        }
        if self.mlp1.len() < 2 || self.mlp1.contains(&0) {
            return Err(ModelError::Config(
                "pse.mlp1 needs an input and at least one layer".into(),
            ));
        }
        if self.mlp2.is_empty() || self.mlp2.contains(&0) {
            return Err(ModelError::Config(
                "pse.mlp2 needs at least one layer".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled, normalized pixel values for a batch of parcels.
#[derive(Debug, Clone)]
pub struct PixelSetInput<T> {
    pub batch: usize,
    pub dates: usize,
    pub sample_size: usize,
    pub channels: usize,
    /// `[B, T, S, C]`
    pub pixels: Vec<T>,
    /// `[B, S]`, see [`PixelSample::pool_mask`].
    pub pool_mask: Vec<bool>,
    /// `[B, 4]`, already standardized.
    pub geo: Vec<T>,
}

/// Copies the sampled pixels of one parcel (stored `[T, C, N]`) into `[T, S, C]` order.
pub fn gather_sample<T: Scalar>(
    pixels: &[f32],
    dates: usize,
    channels: usize,
    n: usize,
    sample: &PixelSample,
    out: &mut Vec<T>,
) {
    for t in 0..dates {
        for &s in &sample.indices {
            for c in 0..channels {
                out.push(T::of(pixels[(t * channels + c) * n + s] as f64));
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PixelSetEncoder {
    pub cfg: PseConfig,
    pub mlp1: Mlp,
    pub mlp2: Mlp,
}

impl PixelSetEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &PseConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mlp1 = Mlp::new(store, "pse.mlp1", &cfg.mlp1, false, rng);
        let mut dims2 = vec![cfg.mlp2_input_dim()];
        dims2.extend_from_slice(&cfg.mlp2);
        let mlp2 = Mlp::new(store, "pse.mlp2", &dims2, false, rng);
        Ok(Self {
            cfg: cfg.clone(),
            mlp1,
            mlp2,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.mlp1.parameter_count() + self.mlp2.parameter_count()
    }

    /// Pooled per-date statistics `[B·T, pooled]` before geometry and MLP2.
    pub fn pool<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &PixelSetInput<T>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, ModelError> {
        let (b, t, s, c) = (input.batch, input.dates, input.sample_size, input.channels);
        if c != self.cfg.channels()
            || input.pixels.len() != b * t * s * c
            || input.pool_mask.len() != b * s
        {
            return Err(ModelError::Dimension(format!(
                "pixel input [{b},{t},{s},{c}] does not fit an encoder over {} channels",
                self.cfg.channels()
            )));
        }
        let x = tape.constant(
            Tensor::new(vec![b * t * s, c], input.pixels.clone()).map_err(ModelError::Ad)?,
        );
        let h = self.mlp1.forward(tape, store, x, mode, updates)?;
        let d = self.mlp1.out_dim().unwrap_or(c);
        let h = tape.reshape(h, &[b * t, s, d])?;
        let mut mask = Vec::with_capacity(b * t * s);
        for pb in 0..b {
            for _ in 0..t {
                mask.extend_from_slice(&input.pool_mask[pb * s..(pb + 1) * s]);
            }
        }
        let mean = tape.reduce(h, 1, ReduceKind::Mean, Some(&mask))?;
        Ok(match self.cfg.pooling {
            Pooling::Mean => mean,
            Pooling::MeanStd => {
                let std = tape.reduce(h, 1, ReduceKind::Std, Some(&mask))?;
                tape.concat(&[mean, std], 1)?
            }
        })
    }

    /// Embeds every date of every parcel: returns `[B, T, d_e]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &PixelSetInput<T>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var, ModelError> {
        let (b, t) = (input.batch, input.dates);
        let mut pooled = self.pool(tape, store, input, mode, updates)?;
        if self.cfg.include_geometric {
            if input.geo.len() != b * GEOMETRIC_FEATURES {
                return Err(ModelError::Dimension(format!(
                    "expected {} geometric values, got {}",
                    b * GEOMETRIC_FEATURES,
                    input.geo.len()
                )));
            }
            let mut geo = Vec::with_capacity(b * t * GEOMETRIC_FEATURES);
            for pb in 0..b {
                for _ in 0..t {
                    geo.extend_from_slice(
                        &input.geo[pb * GEOMETRIC_FEATURES..(pb + 1) * GEOMETRIC_FEATURES],
                    );
                }
            }
            let g = tape.constant(Tensor::new(vec![b * t, GEOMETRIC_FEATURES], geo)?);
            pooled = tape.concat(&[pooled, g], 1)?;
        }
        let e = self.mlp2.forward(tape, store, pooled, mode, updates)?;
        Ok(tape.reshape(e, &[b, t, self.cfg.out_dim()])?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sample_covers_small_parcels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_pixels(3, 5, &mut rng).unwrap();
        assert_eq!(s.indices.len(), 5);
        assert_eq!(s.valid_count, 3);
        let distinct: std::collections::BTreeSet<_> = s.indices.iter().copied().collect();
        assert_eq!(distinct, [0, 1, 2].into_iter().collect());
        assert_eq!(s.pool_mask().iter().filter(|m| **m).count(), 3);
    }

    #[test]
    fn sample_without_replacement_for_large_parcels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_pixels(100, 64, &mut rng).unwrap();
        let distinct: std::collections::BTreeSet<_> = s.indices.iter().copied().collect();
        assert_eq!(distinct.len(), 64);
        assert_eq!(s.valid_count, 64);
        assert!(s.indices.iter().all(|&i| i < 100));
        assert!(s.pool_mask().iter().all(|m| *m));
    }

    #[test]
    fn single_pixel_parcel_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_pixels(1, 4, &mut rng).unwrap();
        assert_eq!(s.indices, vec![0, 0, 0, 0]);
        assert_eq!(s.valid_count, 1);
        assert_eq!(s.pool_mask(), vec![true, false, false, false]);
    }

    #[test]
    fn sampling_is_seeded_and_rejects_empty() {
        let a = sample_pixels(50, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_pixels(50, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample_pixels(0, 4, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(ModelError::EmptyParcel)
        ));
    }

    /// Counts every unit edge of a padded grid whose two sides disagree.
    fn brute_force_perimeter(mask: &ParcelMask) -> usize {
        let at = |r: isize, c: isize| {
            r >= 0
                && c >= 0
                && (r as usize) < mask.height
                && (c as usize) < mask.width
                && mask.get(r as usize, c as usize)
        };
        let mut count = 0;
        for r in -1..=mask.height as isize {
            for c in -1..=mask.width as isize {
                if at(r, c) != at(r, c + 1) {
                    count += 1;
                }
                if at(r, c) != at(r + 1, c) {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn geometric_features_of_reference_shapes() {
        let one = ParcelMask::new(1, 1, vec![true]).unwrap();
        let f = compute_geometric_features(&one).unwrap();
        assert_eq!(f.to_array(), [4.0, 1.0, 1.0, 4.0]);

        let full = ParcelMask::new(4, 4, vec![true; 16]).unwrap();
        let f = compute_geometric_features(&full).unwrap();
        assert_eq!(f.to_array(), [16.0, 16.0, 1.0, 1.0]);

        let l = ParcelMask::from_coords(2, 2, &[(0, 0), (0, 1), (1, 0)]).unwrap();
        assert_eq!(brute_force_perimeter(&l), 8);
        let f = compute_geometric_features(&l).unwrap();
        assert_eq!(f.to_array(), [8.0, 3.0, 0.75, 8.0 / 3.0]);
    }

    #[test]
    fn perimeter_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
            let cells: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.6)).collect();
            let mask = ParcelMask::new(h, w, cells).unwrap();
            match compute_geometric_features(&mask) {
                Ok(f) => {
                    assert_eq!(f.perimeter as usize, brute_force_perimeter(&mask));
                    assert!(f.cover_ratio > 0.0 && f.cover_ratio <= 1.0);
                }
                Err(ModelError::EmptyMask) => assert_eq!(mask.pixel_count(), 0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn loose_box_is_tolerated_and_empty_mask_is_an_error() {
        let padded = ParcelMask::from_coords(4, 4, &[(1, 1), (1, 2), (2, 1)]).unwrap();
        let f = compute_geometric_features(&padded).unwrap();
        assert_eq!(f.to_array(), [8.0, 3.0, 0.75, 8.0 / 3.0]);
        let empty = ParcelMask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(
            compute_geometric_features(&empty),
            Err(ModelError::EmptyMask)
        ));
    }

    #[test]
    fn mlp2_input_follows_pooling_and_geometry() {
        let mut cfg = PseConfig::default();
        assert_eq!(cfg.mlp2_input_dim(), 132);
        cfg.pooling = Pooling::Mean;
        assert_eq!(cfg.mlp2_input_dim(), 68);
        cfg.include_geometric = false;
        assert_eq!(cfg.mlp2_input_dim(), 64);
    }
}
