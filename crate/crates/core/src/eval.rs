//! Top-K ranking evaluation of the target task: score every candidate item
//! per user, rank, and aggregate NDCG/Recall/Precision against held-out
//! target interactions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultiTaskModel;
use crate::scalar::Scalar;

/// Which items a user is ranked against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidatePolicy {
    /// Every item in the catalog, including the user's training positives.
    AllItems,
    /// Every item except the user's target-task training positives.
    MaskTrainPositives,
}

/// One user's full ranking, scores non-increasing.
#[derive(Clone, Debug)]
pub struct RankingResult {
    pub user: usize,
    /// `(item, target-task probability)` sorted by score descending, ties
    /// broken by item id ascending.
    pub ranked: Vec<(usize, f64)>,
}

impl RankingResult {
    pub fn items(&self) -> Vec<usize> {
        self.ranked.iter().map(|&(i, _)| i).collect()
    }
}

/// Scores and ranks all candidate items for one user.
pub fn rank_items<F: Scalar>(
    model: &MultiTaskModel<F>,
    user: usize,
    policy: CandidatePolicy,
    train_positives: Option<&HashMap<usize, HashSet<usize>>>,
) -> Result<RankingResult> {
    let num_items = model.config().num_items;
    let candidates: Vec<usize> = match policy {
        CandidatePolicy::AllItems => (0..num_items).collect(),
        CandidatePolicy::MaskTrainPositives => {
            let positives = train_positives.ok_or_else(|| {
                Error::Contract(
                    "mask-train-positives policy needs the train positive sets".into(),
                )
            })?;
            let skip = positives.get(&user);
            (0..num_items)
                .filter(|i| !skip.is_some_and(|s| s.contains(i)))
                .collect()
        }
    };
    let scores = model.score_target_items(user, &candidates)?;
    let mut ranked: Vec<(usize, f64)> = candidates
        .into_iter()
        .zip(scores.into_iter().map(|s| s.as_f64()))
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(RankingResult { user, ranked })
}

/// NDCG@K with unit gains: discount `1/log2(rank+1)`, normalized by the
/// ideal DCG over `min(|truth|, K)` hits. `None` when the ground truth is
/// empty (the user is skipped, not scored 0).
pub fn ndcg_at_k(ranked_items: &[usize], truth: &HashSet<usize>, k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if truth.is_empty() {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked_items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| truth.contains(item))
        .map(|(idx, _)| discount(idx + 1))
        .sum();
    let ideal: f64 = (1..=truth.len().min(k)).map(discount).sum();
    Some(dcg / ideal)
}

/// `(recall, precision)` at K; `None` when the ground truth is empty.
pub fn recall_precision_at_k(
    ranked_items: &[usize],
    truth: &HashSet<usize>,
    k: usize,
) -> Option<(f64, f64)> {
    assert!(k >= 1, "K must be at least 1");
    if truth.is_empty() {
        return None;
    }
    let hits = ranked_items
        .iter()
        .take(k)
        .filter(|item| truth.contains(item))
        .count();
    Some((hits as f64 / truth.len() as f64, hits as f64 / k as f64))
}

/// Aggregated metric values keyed by `metric@K`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    values: BTreeMap<String, f64>,
    pub users_evaluated: usize,
}

impl MetricsTable {
    pub fn get(&self, metric: &str, k: usize) -> Option<f64> {
        self.values.get(&format!("{metric}@{k}")).copied()
    }

    pub fn insert(&mut self, metric: &str, k: usize, value: f64) {
        self.values.insert(format!("{metric}@{k}"), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.values.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.values.clone()
    }

    /// `run_id,epoch,metric,k,value` rows.
    pub fn write_csv<W: Write>(
        &self,
        run_id: &str,
        epoch: usize,
        out: &mut W,
        header: bool,
    ) -> std::io::Result<()> {
        if header {
            writeln!(out, "run_id,epoch,metric,k,value")?;
        }
        for (key, value) in &self.values {
            let (metric, k) = key.split_once('@').unwrap_or((key.as_str(), "0"));
            writeln!(out, "{run_id},{epoch},{metric},{k},{value}")?;
        }
        Ok(())
    }
}

/// Ranks every user with non-empty ground truth (in parallel over a
/// read-only model) and averages NDCG/Recall/Precision at each requested K.
pub fn evaluate<F: Scalar>(
    model: &MultiTaskModel<F>,
    truth: &HashMap<usize, HashSet<usize>>,
    ks: &[usize],
    policy: CandidatePolicy,
    train_positives: Option<&HashMap<usize, HashSet<usize>>>,
) -> Result<MetricsTable> {
    let mut users: Vec<usize> = truth
        .iter()
        .filter(|(_, items)| !items.is_empty())
        .map(|(&u, _)| u)
        .collect();
    users.sort_unstable();

    let per_user: Vec<Vec<f64>> = users
        .par_iter()
        .map(|&user| -> Result<Vec<f64>> {
            let ranking = rank_items(model, user, policy, train_positives)?;
            let items = ranking.items();
            let user_truth = &truth[&user];
            let mut row = Vec::with_capacity(ks.len() * 3);
            for &k in ks {
                let ndcg = ndcg_at_k(&items, user_truth, k).expect("non-empty truth");
                let (recall, precision) =
                    recall_precision_at_k(&items, user_truth, k).expect("non-empty truth");
                row.push(ndcg);
                row.push(recall);
                row.push(precision);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut table = MetricsTable {
        values: BTreeMap::new(),
        users_evaluated: users.len(),
    };
    for (ki, &k) in ks.iter().enumerate() {
        for (mi, metric) in ["ndcg", "recall", "precision"].iter().enumerate() {
            let col = ki * 3 + mi;
            let mean = if per_user.is_empty() {
                0.0
            } else {
                per_user.iter().map(|row| row[col]).sum::<f64>() / per_user.len() as f64
            };
            table.insert(metric, k, mean);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth_of(items: &[usize]) -> HashSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn ndcg_examples_hold() {
        // Single relevant item at rank 1.
        assert_eq!(ndcg_at_k(&[7, 1, 2], &truth_of(&[7]), 10), Some(1.0));
        // Single relevant item at rank 2: 1/log2(3).
        let v = ndcg_at_k(&[1, 7, 2], &truth_of(&[7]), 10).unwrap();
        assert!((v - 1.0 / 3.0_f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309297535714574).abs() < 1e-12);
        // No relevant item in the top K.
        assert_eq!(ndcg_at_k(&[1, 2, 3], &truth_of(&[9]), 3), Some(0.0));
        // Empty ground truth skips the user.
        assert_eq!(ndcg_at_k(&[1, 2, 3], &truth_of(&[]), 3), None);
    }

    #[test]
    fn recall_precision_examples_hold() {
        let ranked = [5, 1, 2, 3, 4, 6, 7, 8, 9, 10];
        let (r, p) = recall_precision_at_k(&ranked, &truth_of(&[5]), 10).unwrap();
        assert_eq!((r, p), (1.0, 0.1));

        let (r, p) = recall_precision_at_k(&ranked, &truth_of(&[5, 1, 99, 98]), 10).unwrap();
        assert_eq!((r, p), (0.5, 0.2));

        // K beyond the catalog: hits capped by the list length.
        let (r, p) = recall_precision_at_k(&[5, 1], &truth_of(&[5, 1]), 10).unwrap();
        assert_eq!(r, 1.0);
        assert!((p - 0.2).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_order_below_k() {
        let truth = truth_of(&[2, 4]);
        let a = ndcg_at_k(&[2, 4, 9, 8, 7], &truth, 2).unwrap();
        let b = ndcg_at_k(&[2, 4, 7, 8, 9], &truth, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn moving_a_hit_up_never_lowers_ndcg() {
        let truth = truth_of(&[6]);
        let mut ranked: Vec<usize> = vec![0, 1, 2, 3, 6, 4, 5];
        let mut prev = ndcg_at_k(&ranked, &truth, 7).unwrap();
        for pos in (1..5).rev() {
            ranked.swap(pos, pos - 1);
            let next = ndcg_at_k(&ranked, &truth, 7).unwrap();
            assert!(next >= prev);
            prev = next;
        }
    }
}
