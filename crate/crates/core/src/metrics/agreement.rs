use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersection over union of two vertex sets; 1 when both are empty.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Symmetric matrix of IoUs between every pair of sets.
pub fn pairwise_iou(sets: &[Vec<usize>]) -> Vec<Vec<f64>> {
    sets.iter().map(|a| sets.iter().map(|b| iou(a, b)).collect()).collect()
}

/// Passes iff the mean IoU is at least `threshold`.
pub fn qualification_gate(ious: &[f64], threshold: f64) -> Result<bool> {
    if ious.is_empty() {
        return Err(Error::InvalidArgument("no qualification scores".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64 >= threshold)
}

/// Items x categories rating counts with the same number of raters per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    counts: Vec<Vec<usize>>,
    raters: usize,
}

impl RatingMatrix {
    pub fn new(counts: Vec<Vec<usize>>) -> Result<Self> {
        let Some(first) = counts.first() else {
            return Err(Error::InvalidArgument("rating matrix has no items".into()));
        };
        let k = first.len();
        let raters: usize = first.iter().sum();
        if k == 0 {
            return Err(Error::InvalidArgument("rating matrix has no categories".into()));
        }
        if raters < 2 {
            return Err(Error::InvalidArgument(format!(
                "{raters} raters per item, need at least 2"
            )));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k || row.iter().sum::<usize>() != raters {
                return Err(Error::Validation(format!(
                    "item {i} has {} ratings over {} categories, expected {raters} over {k}",
                    row.iter().sum::<usize>(),
                    row.len()
                )));
            }
        }
        Ok(Self { counts, raters })
    }

    /// Two categories (no contact, contact) per vertex from each rater's
    /// binary labels.
    pub fn from_binary_labels(labels: &[Vec<bool>]) -> Result<Self> {
        let n = labels.first().map_or(0, Vec::len);
        if labels.iter().any(|l| l.len() != n) {
            return Err(Error::Shape("raters labeled different vertex counts".into()));
        }
        Self::new(
            (0..n)
                .map(|v| {
                    let yes = labels.iter().filter(|l| l[v]).count();
                    vec![labels.len() - yes, yes]
                })
                .collect(),
        )
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn raters(&self) -> usize {
        self.raters
    }
}

/// Fleiss' kappa. When chance agreement is exactly 1 (every rating in one
/// category) the statistic is 0/0 and 1 is returned.
pub fn fleiss_kappa(ratings: &RatingMatrix) -> f64 {
    let n = ratings.raters as f64;
    let items = ratings.counts.len() as f64;
    let k = ratings.counts[0].len();
    let p_bar = ratings
        .counts
        .iter()
        .map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let p = ratings.counts.iter().map(|row| row[j]).sum::<usize>() as f64 / (items * n);
            p * p
        })
        .sum();
    if p_e >= 1.0 {
        return 1.0;
    }
    (p_bar - p_e) / (1.0 - p_e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&[1, 2], &[2, 3]), 1.0 / 3.0);
        assert_eq!(iou(&[4, 5], &[5, 4]), 1.0);
        assert_eq!(iou(&[1], &[2]), 0.0);
        assert_eq!(iou(&[], &[]), 1.0);
        assert_eq!(
            pairwise_iou(&[vec![1], vec![1, 2]]),
            vec![vec![1.0, 0.5], vec![0.5, 1.0]]
        );
    }

    #[test]
    fn gate_boundaries() {
        assert!(qualification_gate(&[1.0, 1.0], 0.5).unwrap());
        assert!(!qualification_gate(&[0.4, 0.5], 0.5).unwrap());
        assert!(qualification_gate(&[0.25, 0.75], 0.5).unwrap());
        assert!(qualification_gate(&[], 0.5).is_err());
    }

    #[test]
    fn kappa_hand_cases() {
        let agree = RatingMatrix::new(vec![vec![2, 0], vec![0, 2]]).unwrap();
        assert_eq!(fleiss_kappa(&agree), 1.0);
        let split = RatingMatrix::new(vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(fleiss_kappa(&split), -1.0);
        let single = RatingMatrix::new(vec![vec![3, 0], vec![3, 0], vec![3, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&single), 1.0);
    }

    #[test]
    fn kappa_textbook_value() {
        // 10 items, 14 raters, 5 categories; kappa 0.210
        let rows = vec![
            vec![0, 0, 0, 0, 14],
            vec![0, 2, 6, 4, 2],
            vec![0, 0, 3, 5, 6],
            vec![0, 3, 9, 2, 0],
            vec![2, 2, 8, 1, 1],
            vec![7, 7, 0, 0, 0],
            vec![3, 2, 6, 3, 0],
            vec![2, 5, 3, 2, 2],
            vec![6, 5, 2, 1, 0],
            vec![0, 2, 2, 3, 7],
        ];
        let k = fleiss_kappa(&RatingMatrix::new(rows).unwrap());
        assert!((k - 0.209_930_704_6).abs() < 1e-9, "{k}");
    }

    #[test]
    fn invalid_matrices() {
        assert!(RatingMatrix::new(vec![]).is_err());
        assert!(RatingMatrix::new(vec![vec![1, 0]]).is_err());
        assert!(RatingMatrix::new(vec![vec![2, 0], vec![1, 0]]).is_err());
        assert!(RatingMatrix::from_binary_labels(&[vec![true]]).is_err());
    }

    #[test]
    fn binary_labels_matrix() {
        let m = RatingMatrix::from_binary_labels(&[vec![true, false], vec![true, true]]).unwrap();
        assert_eq!(m.counts(), &[vec![0, 2], vec![1, 1]]);
    }
}
