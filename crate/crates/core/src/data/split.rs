use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Record indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` once and deals it into `folds` contiguous blocks; the
/// first `n % folds` blocks get one extra item. Returns the block of every item.
pub fn assign_blocks(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if folds < 3 || n < folds {
        return Err(DataError::TooFewParcels { parcels: n, folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut blocks = vec![0; n];
    let mut pos = 0;
    for b in 0..folds {
        let size = base + usize::from(b < extra);
        for &i in &order[pos..pos + size] {
            blocks[i] = b;
        }
        pos += size;
    }
    Ok(blocks)
}

/// Fold `fold` tests on block `fold`, validates on block `fold + 1` (mod
/// `folds`) and trains on the rest.
pub(crate) fn split_from_blocks(
    blocks: &[usize],
    folds: usize,
    fold: usize,
) -> Result<FoldSplit, DataError> {
    if folds < 3 || fold >= folds {
        return Err(DataError::Config(format!(
            "fold {fold} out of range for {folds} folds"
        )));
    }
    let val_block = (fold + 1) % folds;
    let mut split = FoldSplit {
        fold,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, &b) in blocks.iter().enumerate() {
        if b == fold {
            split.test.push(i);
        } else if b == val_block {
            split.validation.push(i);
        } else {
            split.train.push(i);
        }
    }
    Ok(split)
}

pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>, DataError> {
    let blocks = assign_blocks(n, folds, seed)?;
    (0..folds)
        .map(|f| split_from_blocks(&blocks, folds, f))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn hundred_parcels_split_three_one_one() {
        for s in kfold_split(100, 5, 3).unwrap() {
            assert_eq!(
                (s.train.len(), s.validation.len(), s.test.len()),
                (60, 20, 20)
            );
        }
    }

    #[test]
    fn test_sets_partition_all_parcels() {
        let splits = kfold_split(103, 5, 11).unwrap();
        let mut seen = BTreeSet::new();
        for s in &splits {
            for &i in &s.test {
                assert!(seen.insert(i), "parcel {i} tested twice");
            }
            let all: BTreeSet<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
            assert_eq!(all.len(), 103);
        }
        assert_eq!(seen.len(), 103);
    }

    #[test]
    fn splits_are_seeded() {
        assert_eq!(
            kfold_split(50, 5, 1).unwrap(),
            kfold_split(50, 5, 1).unwrap()
        );
        assert_ne!(
            kfold_split(50, 5, 1).unwrap(),
            kfold_split(50, 5, 2).unwrap()
        );
    }

    #[test]
    fn too_few_parcels() {
        assert!(matches!(
            kfold_split(4, 5, 0),
            Err(DataError::TooFewParcels { .. })
        ));
    }
}
