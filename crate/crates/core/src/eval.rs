//! Leave-one-out ranking metrics over the full item catalogue.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::EmbeddingModel;

pub const DEFAULT_CUTOFFS: [usize; 4] = [5, 10, 15, 20];

/// 1-based rank of `test_item` among all items not in `excluded`.
///
/// Items scoring strictly higher rank ahead; on equal scores the lower item index wins.
pub fn rank_test_item(
    model: &EmbeddingModel,
    user: usize,
    test_item: usize,
    excluded: &HashSet<usize>,
) -> Result<usize> {
    model.check_pair(user, test_item)?;
    if excluded.contains(&test_item) {
        return Err(invalid(format!("test item {test_item} is excluded for user {user}")));
    }
    let p = model.users.row(user);
    let target = p.dot(&model.items.row(test_item));
    let mut ahead = 0;
    for (v, q) in model.items.rows().into_iter().enumerate() {
        if v == test_item || excluded.contains(&v) {
            continue;
        }
        let s = p.dot(&q);
        if s > target || (s == target && v < test_item) {
            ahead += 1;
        }
    }
    Ok(ahead + 1)
}

fn check_ranks(ranks: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid("cutoff must be at least 1"));
    }
    if ranks.is_empty() {
        return Err(invalid("no ranks to aggregate"));
    }
    if ranks.contains(&0) {
        return Err(invalid("ranks are 1-based"));
    }
    Ok(())
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(gain / ranks.len() as f64)
}

/// Per-user held-out item and the items that user trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub test_item: usize,
    pub train_items: HashSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users: usize,
    pub skipped_users: usize,
}

impl RecReport {
    /// Monotone cutoffs and `ndcg <= hr` at every cutoff.
    pub fn invariants_hold(&self) -> bool {
        let mono = |m: &BTreeMap<usize, f64>| m.values().zip(m.values().skip(1)).all(|(a, b)| a <= b);
        mono(&self.hr)
            && mono(&self.ndcg)
            && self
                .ndcg
                .iter()
                .all(|(k, n)| self.hr.get(k).is_some_and(|h| n <= h))
    }
}

/// Ranks each case's test item and aggregates HR and NDCG at every cutoff.
///
/// `None` cases are users without a held-out item; they are skipped and counted.
pub fn evaluate_model(
    model: &EmbeddingModel,
    cases: &[Option<EvalCase>],
    cutoffs: &[usize],
) -> Result<RecReport> {
    if cutoffs.is_empty() {
        return Err(invalid("at least one cutoff is required"));
    }
    let present: Vec<&EvalCase> = cases.iter().flatten().collect();
    let rank = |c: &&EvalCase| rank_test_item(model, c.user, c.test_item, &c.train_items);
    #[cfg(feature = "parallel")]
    let ranks: Vec<usize> = {
        use rayon::prelude::*;
        present.par_iter().map(rank).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let ranks: Vec<usize> = present.iter().map(rank).collect::<Result<_>>()?;

    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in cutoffs {
        hr.insert(k, hr_at_k(&ranks, k)?);
        ndcg.insert(k, ndcg_at_k(&ranks, k)?);
    }
    Ok(RecReport {
        hr,
        ndcg,
        num_users: ranks.len(),
        skipped_users: cases.len() - ranks.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn closed_forms() {
        assert_eq!(hr_at_k(&[1, 1], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[1, 1], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[3], 10).unwrap(), 0.5);
        assert_eq!(hr_at_k(&[3], 10).unwrap(), 1.0);
        assert_eq!(hr_at_k(&[11], 10).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[11], 10).unwrap(), 0.0);
        assert!(hr_at_k(&[], 10).is_err());
        assert!(hr_at_k(&[1], 0).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let m = EmbeddingModel::new(Array2::ones((1, 2)), Array2::ones((6, 2))).unwrap();
        let none = HashSet::new();
        for v in 0..6 {
            assert_eq!(rank_test_item(&m, 0, v, &none).unwrap(), v + 1);
        }
        let ex: HashSet<usize> = [0, 2].into();
        assert_eq!(rank_test_item(&m, 0, 3, &ex).unwrap(), 2);
        assert!(rank_test_item(&m, 0, 2, &ex).is_err());
    }

    #[test]
    fn unique_max_ranks_first() {
        let m = EmbeddingModel::new(array![[1.0]], array![[0.1], [3.0], [0.5]]).unwrap();
        assert_eq!(rank_test_item(&m, 0, 1, &HashSet::new()).unwrap(), 1);
    }

    #[test]
    fn missing_cases_are_counted() {
        let m = EmbeddingModel::new(array![[1.0], [1.0]], array![[2.0], [1.0]]).unwrap();
        let cases = vec![
            Some(EvalCase {
                user: 0,
                test_item: 0,
                train_items: HashSet::new(),
            }),
            None,
        ];
        let r = evaluate_model(&m, &cases, &DEFAULT_CUTOFFS).unwrap();
        assert_eq!((r.num_users, r.skipped_users), (1, 1));
        assert!(r.hr.values().all(|&h| h == 1.0));
        assert!(r.invariants_hold());
    }
}
