use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::{EncoderVariant, ModelConfig};
use crate::config::{model_entries, model_to_text};
use crate::data::Dataset;
use crate::tae::MasterQuery;
use crate::Error;

use super::cv::mean_std;
use super::{train, TrainConfig};

/// One architecture variant compared against the baseline.
pub struct Variant {
    pub name: &'static str,
    /// The single configuration key the variant changes.
    pub changed_field: Option<&'static str>,
    /// Published (OA, mIoU) in percent, shown next to the synthetic results.
    pub reference: Option<(f64, f64)>,
    pub apply: fn(&mut ModelConfig),
}

pub const VARIANTS: &[Variant] = &[
    Variant {
        name: "baseline",
        changed_field: None,
        reference: Some((94.2, 50.9)),
        apply: |_| {},
    },
    Variant {
        name: "last",
        changed_field: Some("tae.master_query"),
        reference: Some((94.2, 50.7)),
        apply: |m| m.tae.master_query = MasterQuery::Last,
    },
    Variant {
        name: "S16",
        changed_field: Some("pse.sample_size"),
        reference: Some((94.3, 50.5)),
        apply: |m| m.pse.sample_size = 16,
    },
    Variant {
        name: "max",
        changed_field: Some("tae.master_query"),
        reference: Some((94.2, 50.3)),
        apply: |m| m.tae.master_query = MasterQuery::Max,
    },
    Variant {
        name: "S32",
        changed_field: Some("pse.sample_size"),
        reference: Some((94.2, 50.1)),
        apply: |m| m.pse.sample_size = 32,
    },
    Variant {
        name: "no_geo",
        changed_field: Some("pse.geometric"),
        reference: Some((93.9, 50.0)),
        apply: |m| m.pse.include_geometric = false,
    },
    Variant {
        name: "ms",
        changed_field: Some("model.encoder"),
        reference: Some((93.7, 48.9)),
        apply: |m| m.encoder = EncoderVariant::Ms,
    },
];

impl Variant {
    pub fn config(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        (self.apply)(&mut m);
        m
    }
}

/// FNV-1a of the model's `key=value` text.
pub fn config_hash(m: &ModelConfig) -> u64 {
    model_to_text(m)
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
}

/// Keys whose values differ between two configurations.
pub fn changed_fields(a: &ModelConfig, b: &ModelConfig) -> Vec<&'static str> {
    model_entries(a)
        .into_iter()
        .zip(model_entries(b))
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    /// `None` on aggregate rows.
    pub fold: Option<usize>,
    pub oa: f64,
    pub miou: f64,
    pub oa_std: Option<f64>,
    pub miou_std: Option<f64>,
    pub config_hash: u64,
    pub changed_field: Option<&'static str>,
    pub reference: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,fold,test_OA,test_mIoU,test_OA_std,test_mIoU_std,config_hash,changed_field,reference_OA,reference_mIoU\n",
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{:016x},{},{},{}",
                r.variant,
                r.fold.map_or_else(|| "mean".to_string(), |f| f.to_string()),
                r.oa,
                r.miou,
                opt(r.oa_std),
                opt(r.miou_std),
                r.config_hash,
                r.changed_field.unwrap_or("-"),
                opt(r.reference.map(|p| p.0)),
                opt(r.reference.map(|p| p.1)),
            )
            .unwrap();
        }
        s
    }
}

/// Trains every variant on the given folds with identical seeds and
/// budget. Checkpoints go to `out/<variant>/fold_<f>/` when `out` is set.
pub fn run_ablations(
    base: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    folds: &[usize],
    out: Option<&Path>,
) -> Result<AblationTable, Error> {
    let mut rows = Vec::new();
    for v in VARIANTS {
        let m = v.config(base);
        let hash = config_hash(&m);
        let mut per_fold = Vec::new();
        for &fold in folds {
            let dir = out.map(|o| o.join(v.name).join(format!("fold_{fold}")));
            if let Some(d) = &dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let run = train(
                &m,
                &TrainConfig {
                    fold,
                    ..cfg.clone()
                },
                data,
                dir.as_deref(),
            )?;
            let t = &run.test.metrics;
            log::info!(
                "{} fold {fold}: OA {:.4} mIoU {:.4}",
                v.name,
                t.overall_accuracy,
                t.miou
            );
            per_fold.push((t.overall_accuracy, t.miou));
            rows.push(AblationRow {
                variant: v.name,
                fold: Some(fold),
                oa: t.overall_accuracy,
                miou: t.miou,
                oa_std: None,
                miou_std: None,
                config_hash: hash,
                changed_field: v.changed_field,
                reference: v.reference,
            });
        }
        if per_fold.is_empty() {
            continue;
        }
        let (oa, oa_std) = mean_std(&per_fold.iter().map(|p| p.0).collect::<Vec<_>>());
        let (miou, miou_std) = mean_std(&per_fold.iter().map(|p| p.1).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: v.name,
            fold: None,
            oa,
            miou,
            oa_std: Some(oa_std),
            miou_std: Some(miou_std),
            config_hash: hash,
            changed_field: v.changed_field,
            reference: v.reference,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_variant_changes_exactly_its_field() {
        let base = ModelConfig::default();
        let h0 = config_hash(&base);
        for v in &VARIANTS[1..] {
            let m = v.config(&base);
            assert_ne!(config_hash(&m), h0, "{}", v.name);
            assert_eq!(
                changed_fields(&base, &m),
                vec![v.changed_field.unwrap()],
                "{}",
                v.name
            );
            m.validate().unwrap();
        }
        assert!(changed_fields(&base, &VARIANTS[0].config(&base)).is_empty());
    }

    #[test]
    fn reference_annotations() {
        let get = |n: &str| {
            VARIANTS
                .iter()
                .find(|v| v.name == n)
                .unwrap()
                .reference
                .unwrap()
        };
        assert_eq!(get("baseline"), (94.2, 50.9));
        assert_eq!(get("ms"), (93.7, 48.9));
        assert_eq!(get("no_geo"), (93.9, 50.0));
        assert_eq!(VARIANTS.len(), 7);
    }
}
