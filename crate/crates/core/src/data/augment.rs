use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ad::Scalar;

pub const AUGMENT_STD: f64 = 1e-2;
pub const AUGMENT_CLIP: f64 = 5e-2;

/// Adds i.i.d. Gaussian noise to every value, each draw clamped to
/// `[-AUGMENT_CLIP, AUGMENT_CLIP]`.
pub fn augment<T: Scalar, R: Rng + ?Sized>(values: &mut [T], rng: &mut R) {
    let normal = Normal::new(0.0, AUGMENT_STD).expect("valid std");
    for v in values {
        *v += T::of(normal.sample(rng).clamp(-AUGMENT_CLIP, AUGMENT_CLIP));
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn noise_is_bounded_and_seeded() {
        let base: Vec<f64> = (0..10_000).map(|i| i as f64 * 1e-3).collect();
        let mut a = base.clone();
        augment(&mut a, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(a
            .iter()
            .zip(&base)
            .all(|(x, y)| (x - y).abs() <= AUGMENT_CLIP));
        let mut b = base.clone();
        augment(&mut b, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }
}
