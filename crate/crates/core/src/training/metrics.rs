use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::shape("confusion_matrix", &[preds.len()], &[labels.len()]));
        }
        let mut m = ConfusionMatrix::new(num_classes);
        for (&p, &l) in preds.iter().zip(labels) {
            let bad = [p, l].into_iter().find(|&c| c >= num_classes);
            if let Some(index) = bad {
                return Err(Error::Index {
                    op: "confusion_matrix",
                    index,
                    extent: num_classes,
                });
            }
            m.counts[l][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }

    /// `T_c / T`; `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    /// `T_ic / (T_ic + T_if)` per class, `None` for classes never predicted.
    pub fn precision(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|i| {
                let predicted: u64 = self.counts.iter().map(|row| row[i]).sum();
                (predicted > 0).then(|| self.counts[i][i] as f64 / predicted as f64)
            })
            .collect()
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "accuracy needs equal nonempty inputs, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

pub fn per_class_precision(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    Ok(ConfusionMatrix::from_predictions(preds, labels, num_classes)?.precision())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn precision_examples() {
        let p = per_class_precision(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(p, vec![Some(0.5), Some(1.0), None]);
        assert!(matches!(
            per_class_precision(&[3], &[0], 3),
            Err(Error::Index { index: 3, .. })
        ));
    }

    #[test]
    fn rows_count_true_labels() {
        let m = ConfusionMatrix::from_predictions(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        let rows: Vec<u64> = m.counts.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![2, 1, 1]);
        assert_eq!(m.trace(), 3);
        assert_eq!(m.accuracy(), Some(0.75));
    }
}
