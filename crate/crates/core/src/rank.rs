//! Ordering helpers shared by classification and selection.

use std::cmp::Ordering;

/// Column indices sorted by score descending; equal scores keep column order.
pub fn rank_descending(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// `(top, second)` column indices of a row with at least two entries.
pub fn top_two(row: &[f64]) -> (usize, usize) {
    debug_assert!(row.len() >= 2);
    let (mut top, mut second) = if row[1] > row[0] { (1, 0) } else { (0, 1) };
    for (j, &v) in row.iter().enumerate().skip(2) {
        if v > row[top] {
            second = top;
            top = j;
        } else if v > row[second] {
            second = j;
        }
    }
    (top, second)
}

/// Lowest-ranked column: minimum score, ties resolved to the latest column,
/// i.e. the last entry of [`rank_descending`].
pub fn bottom(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v.total_cmp(&row[best]) != Ordering::Greater {
            best = j;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], with the input clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}
