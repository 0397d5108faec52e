use std::fmt::Write as _;

/// Confusion matrix (rows truth, columns prediction) and derived scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub classes: usize,
    /// `confusion[truth * classes + predicted]`
    pub confusion: Vec<u64>,
    pub overall_accuracy: f64,
    /// `None` where the class never occurs and is never predicted.
    pub iou: Vec<Option<f64>>,
    /// Mean over the defined per-class IoUs.
    pub miou: f64,
}

impl Metrics {
    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut confusion = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t * classes + p] += 1;
        }
        Self::from_confusion(classes, confusion)
    }

    pub fn from_confusion(classes: usize, confusion: Vec<u64>) -> Self {
        assert_eq!(
            confusion.len(),
            classes * classes,
            "confusion matrix must be K x K"
        );
        let total: u64 = confusion.iter().sum();
        let diag: u64 = (0..classes).map(|k| confusion[k * classes + k]).sum();
        let iou: Vec<Option<f64>> = (0..classes)
            .map(|k| {
                let tp = confusion[k * classes + k];
                let row: u64 = confusion[k * classes..(k + 1) * classes].iter().sum();
                let col: u64 = (0..classes).map(|r| confusion[r * classes + k]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        Self {
            classes,
            overall_accuracy: if total == 0 {
                0.0
            } else {
                diag as f64 / total as f64
            },
            miou: if defined.is_empty() {
                0.0
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            },
            confusion,
            iou,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("truth");
        for k in 0..self.classes {
            write!(s, ",pred_{k}").unwrap();
        }
        s.push('\n');
        for t in 0..self.classes {
            write!(s, "{t}").unwrap();
            for p in 0..self.classes {
                write!(s, ",{}", self.confusion[t * self.classes + p]).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Flat `"key": value` summary; absent-class IoUs are written as `null`.
    pub fn summary(&self) -> String {
        let iou: Vec<String> = self
            .iou
            .iter()
            .map(|v| v.map_or_else(|| "null".to_string(), |x| format!("{x}")))
            .collect();
        format!(
            "{{\n  \"parcels\": {},\n  \"classes\": {},\n  \"overall_accuracy\": {},\n  \"miou\": {},\n  \"iou\": [{}]\n}}\n",
            self.total(),
            self.classes,
            self.overall_accuracy,
            self.miou,
            iou.join(", ")
        )
    }
}
