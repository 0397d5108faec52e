use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::ModelConfig;
use crate::data::Dataset;
use crate::Error;

use super::{train, Metrics, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub oa_mean: f64,
    pub oa_std: f64,
    pub miou_mean: f64,
    pub miou_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CrossValidation {
    pub fn from_folds(folds: Vec<FoldResult>) -> Self {
        let oa: Vec<f64> = folds.iter().map(|f| f.test.overall_accuracy).collect();
        let miou: Vec<f64> = folds.iter().map(|f| f.test.miou).collect();
        let (oa_mean, oa_std) = mean_std(&oa);
        let (miou_mean, miou_std) = mean_std(&miou);
        Self {
            folds,
            oa_mean,
            oa_std,
            miou_mean,
            miou_std,
        }
    }

    /// One row per fold and a final `mean` row carrying the std columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fold,best_epoch,test_OA,test_mIoU,test_OA_std,test_mIoU_std\n");
        for f in &self.folds {
            writeln!(
                s,
                "{},{},{},{},,",
                f.fold, f.best_epoch, f.test.overall_accuracy, f.test.miou
            )
            .unwrap();
        }
        writeln!(
            s,
            "mean,,{},{},{},{}",
            self.oa_mean, self.miou_mean, self.oa_std, self.miou_std
        )
        .unwrap();
        s
    }
}

/// Trains and tests every fold of `data`. With `out`, fold `f` keeps its
/// checkpoint under `out/fold_f/`.
pub fn cross_validate(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<CrossValidation, Error> {
    let mut folds = Vec::with_capacity(data.folds);
    for fold in 0..data.folds {
        let dir = out.map(|o| o.join(format!("fold_{fold}")));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let run = train(
            model_cfg,
            &TrainConfig {
                fold,
                ..cfg.clone()
            },
            data,
            dir.as_deref(),
        )?;
        log::info!(
            "fold {fold}: test OA {:.4} mIoU {:.4}",
            run.test.metrics.overall_accuracy,
            run.test.metrics.miou
        );
        folds.push(FoldResult {
            fold,
            best_epoch: run.best_epoch,
            test: run.test.metrics,
        });
    }
    Ok(CrossValidation::from_folds(folds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(fold: usize, oa_hits: u64, total: u64) -> FoldResult {
        FoldResult {
            fold,
            best_epoch: 1,
            test: Metrics::from_confusion(2, vec![oa_hits, total - oa_hits, 0, 0]),
        }
    }

    #[test]
    fn aggregate_is_arithmetic_mean_and_sample_std() {
        let cv = CrossValidation::from_folds(vec![fold(0, 8, 10), fold(1, 6, 10), fold(2, 7, 10)]);
        assert!((cv.oa_mean - 0.7).abs() < 1e-12);
        assert!((cv.oa_std - 0.1).abs() < 1e-12);
        let csv = cv.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
        assert!(csv.lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn single_value_std_is_zero() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
