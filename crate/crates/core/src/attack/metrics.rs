use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use crate::error::{invalid, Result};

fn check_lengths(y_true: &[u32], y_pred: &[u32]) -> Result<()> {
    if y_true.is_empty() {
        return Err(invalid("metrics need at least one prediction"));
    }
    if y_true.len() != y_pred.len() {
        return Err(invalid(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    Ok(())
}

/// Micro-averaged F1 over all classes.
///
/// Pools true positives, false positives and false negatives across classes. With
/// exactly one predicted label per sample every error is one FP and one FN, so the
/// result equals plain accuracy.
pub fn f1_micro(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let classes: BTreeSet<u32> = y_true.iter().chain(y_pred).copied().collect();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &c in &classes {
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mean per-class recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    check_lengths(y_true, y_pred)?;
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let e = per_class.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    let unseen: BTreeSet<u32> = y_pred
        .iter()
        .filter(|p| !per_class.contains_key(p))
        .copied()
        .collect();
    if !unseen.is_empty() {
        warn!("classes {unseen:?} have no true instances and are excluded from balanced accuracy");
    }
    let sum: f64 = per_class
        .values()
        .map(|&(hit, n)| hit as f64 / n as f64)
        .sum();
    Ok(sum / per_class.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_hopeless() {
        let y = [1, 2, 2, 3];
        assert_eq!(f1_micro(&y, &y).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&y, &y).unwrap(), 1.0);
        assert_eq!(f1_micro(&[1, 1, 2], &[2, 2, 1]).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_examples() {
        assert!((f1_micro(&[1, 1, 2, 2], &[1, 2, 2, 2]).unwrap() - 0.75).abs() < 1e-15);
        let b = balanced_accuracy(&[1, 1, 1, 2], &[1, 1, 2, 2]).unwrap();
        assert!((b - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_is_chance() {
        assert_eq!(balanced_accuracy(&[1, 1, 1, 2, 2], &[1; 5]).unwrap(), 0.5);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(f1_micro(&[1], &[1, 2]).is_err());
        assert!(balanced_accuracy(&[], &[]).is_err());
    }
}
