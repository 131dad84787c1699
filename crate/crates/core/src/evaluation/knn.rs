//! Cosine-similarity k-nearest-neighbor classification over feature rows.

use crate::error::{Error, Result};
use crate::nn::ops::normalize_rows;
use ndarray::ArrayView2;

/// Classify every test row by a majority vote over its `k_nn` nearest
/// training rows under cosine distance; returns the accuracy against
/// `test_labels`. Distance ties prefer the lower train index; vote ties
/// prefer the lower label. With `exclude_self`, train row `i` is skipped
/// for test row `i` (meaningful when the two sets alias).
pub fn knn_classify(
    train_features: &ArrayView2<f64>,
    train_labels: &[usize],
    test_features: &ArrayView2<f64>,
    test_labels: &[usize],
    k_nn: usize,
    exclude_self: bool,
) -> Result<f64> {
    if train_features.nrows() == 0 || test_features.nrows() == 0 {
        return Err(Error::EmptyInput("knn feature sets".into()));
    }
    if train_features.nrows() != train_labels.len()
        || test_features.nrows() != test_labels.len()
        || train_features.ncols() != test_features.ncols()
    {
        return Err(Error::ShapeMismatch(format!(
            "knn: train {}x{} / {} labels, test {}x{} / {} labels",
            train_features.nrows(),
            train_features.ncols(),
            train_labels.len(),
            test_features.nrows(),
            test_features.ncols(),
            test_labels.len()
        )));
    }
    if k_nn == 0 {
        return Err(Error::InvalidArgument("k_nn must be at least 1".into()));
    }

    let (train_unit, _) = normalize_rows(train_features);
    let (test_unit, _) = normalize_rows(test_features);
    let sims = test_unit.dot(&train_unit.t()); // (n_test, n_train)

    let num_classes = train_labels.iter().max().unwrap() + 1;
    let mut correct = 0usize;
    for (ti, row) in sims.rows().into_iter().enumerate() {
        // Stable selection: higher similarity first, lower index on ties.
        let mut order: Vec<usize> = (0..row.len())
            .filter(|&j| !(exclude_self && j == ti))
            .collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes = vec![0usize; num_classes];
        for &j in order.iter().take(k_nn) {
            votes[train_labels[j]] += 1;
        }
        let mut winner = 0;
        for (label, &v) in votes.iter().enumerate() {
            if v > votes[winner] {
                winner = label;
            }
        }
        if winner == test_labels[ti] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn onehot_features_are_perfect() {
        let train = array![
            [1.0f64, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0]
        ];
        let labels = vec![0, 1, 2];
        let acc = knn_classify(&train.view(), &labels, &train.view(), &labels, 1, false).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn equidistant_tie_prefers_lower_train_index() {
        // Both train points at 45 degrees from the query, different labels.
        let train = array![[1.0f64, 0.0], [0.0, 1.0]];
        let labels = vec![1, 0];
        let test = array![[1.0f64, 1.0]];
        // Tie on similarity: index 0 (label 1) must win.
        let acc = knn_classify(&train.view(), &labels, &test.view(), &[1], 1, false).unwrap();
        assert_eq!(acc, 1.0);
        let acc = knn_classify(&train.view(), &labels, &test.view(), &[0], 1, false).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn four_point_hand_case() {
        // Train: two tight clusters on the axes.
        let train = array![
            [1.0f64, 0.05],
            [1.0, -0.05],
            [0.05, 1.0],
            [-0.05, 1.0]
        ];
        let labels = vec![0, 0, 1, 1];
        let test = array![[0.9f64, 0.2], [0.1, 0.8]];
        let acc = knn_classify(&train.view(), &labels, &test.view(), &[0, 1], 1, false).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn self_match_controls() {
        let feats = array![[1.0f64, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
        let labels = vec![0, 0, 1, 1];
        // Allowing self-matches makes train==test trivially perfect.
        let acc =
            knn_classify(&feats.view(), &labels, &feats.view(), &labels, 1, false).unwrap();
        assert_eq!(acc, 1.0);
        // Excluding self still works (nearest other point shares the label).
        let acc = knn_classify(&feats.view(), &labels, &feats.view(), &labels, 1, true).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let feats = array![[1.0f64, 0.0]];
        let empty: ndarray::Array2<f64> = ndarray::Array2::zeros((0, 2));
        assert!(knn_classify(&empty.view(), &[], &feats.view(), &[0], 1, false).is_err());
        assert!(knn_classify(&feats.view(), &[0], &feats.view(), &[0], 0, false).is_err());
    }
}
