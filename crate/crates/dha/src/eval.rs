//! Top-M ranking over held-out interactions and the recall@M / MAP@M
//! metrics computed from it.
//!
//! A held-out interaction counts as relevant regardless of rating value.
//! Average precision is normalized by min(|relevant|, M) — the standard
//! choice — so absolute numbers from other implementations may differ if
//! they normalize differently.

use std::collections::BTreeSet;

use crate::cf::{FactorMatrix, InteractionMatrix};
use crate::error::{DhaError, Result};
use crate::math::dot_slices;

/// One user's candidate ranking: items they have not interacted with in
/// training, ordered by descending score with ties broken by ascending
/// item index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: u32,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Aggregated metrics over every user with at least one test interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub m_values: Vec<usize>,
    pub recall: Vec<f64>,
    pub map: Vec<f64>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
}

impl MetricsReport {
    /// Machine-readable lines: `metric<TAB>M<TAB>value`.
    pub fn lines(&self) -> String {
        let mut out = String::new();
        for (k, &m) in self.m_values.iter().enumerate() {
            out.push_str(&format!("recall\t{m}\t{:.6}\n", self.recall[k]));
        }
        for (k, &m) in self.m_values.iter().enumerate() {
            out.push_str(&format!("map\t{m}\t{:.6}\n", self.map[k]));
        }
        out
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::from("      M    recall       MAP\n");
        for (k, &m) in self.m_values.iter().enumerate() {
            out.push_str(&format!(
                "{m:>7}  {:>8.4}  {:>8.4}\n",
                self.recall[k], self.map[k]
            ));
        }
        out.push_str(&format!(
            "users evaluated: {}, skipped (no test items): {}\n",
            self.users_evaluated, self.users_skipped
        ));
        out
    }
}

/// Score every item the user has not interacted with in training and sort
/// (descending score, ties by ascending item index).
pub fn rank_candidates(
    u: &FactorMatrix,
    v: &FactorMatrix,
    train: &InteractionMatrix,
    user: usize,
) -> Result<RankedList> {
    if user >= u.rows() || user >= train.num_users() {
        return Err(DhaError::UnknownUser(user as u32));
    }
    let seen: BTreeSet<u32> = train.user_row(user).iter().map(|&(j, _)| j).collect();
    let factor = u.row(user);
    let mut scored: Vec<(u32, f64)> = (0..v.rows() as u32)
        .filter(|j| !seen.contains(j))
        .map(|j| (j, dot_slices(factor, v.row(j as usize))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let (items, scores) = scored.into_iter().unzip();
    Ok(RankedList {
        user: user as u32,
        items,
        scores,
    })
}

/// |top-M ∩ relevant| / |relevant|.
pub fn recall_at_m(ranked: &RankedList, relevant: &BTreeSet<u32>, m: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(DhaError::EmptyRelevant);
    }
    let hits = ranked
        .items
        .iter()
        .take(m)
        .filter(|j| relevant.contains(j))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// AP@M = (Σ_{k≤M} precision@k · rel(k)) / min(|relevant|, M).
pub fn average_precision_at_m(
    ranked: &RankedList,
    relevant: &BTreeSet<u32>,
    m: usize,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(DhaError::EmptyRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, j) in ranked.items.iter().take(m).enumerate() {
        if relevant.contains(j) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(m) as f64)
}

/// Mean AP over the given users (all of which must have relevant items).
pub fn map_at_m(ranked: &[RankedList], relevants: &[BTreeSet<u32>], m: usize) -> Result<f64> {
    if ranked.len() != relevants.len() {
        return Err(DhaError::DimensionMismatch(format!(
            "{} ranked lists for {} relevant sets",
            ranked.len(),
            relevants.len()
        )));
    }
    if ranked.is_empty() {
        return Err(DhaError::EmptyData("no users to evaluate".into()));
    }
    let mut sum = 0.0;
    for (list, rel) in ranked.iter().zip(relevants) {
        sum += average_precision_at_m(list, rel, m)?;
    }
    Ok(sum / ranked.len() as f64)
}

/// Full protocol: rank candidates for every user with at least one test
/// interaction and average the metrics; users without test items are
/// skipped and counted.
pub fn evaluate(
    u: &FactorMatrix,
    v: &FactorMatrix,
    train: &InteractionMatrix,
    test: &InteractionMatrix,
    m_values: &[usize],
) -> Result<MetricsReport> {
    if m_values.is_empty() || m_values.contains(&0) {
        return Err(DhaError::ConfigInvalid(
            "evaluation M values must be >= 1".into(),
        ));
    }
    let mut recall_sums = vec![0.0; m_values.len()];
    let mut ap_sums = vec![0.0; m_values.len()];
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for user in 0..train.num_users() {
        let relevant: BTreeSet<u32> = test.user_row(user).iter().map(|&(j, _)| j).collect();
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let ranked = rank_candidates(u, v, train, user)?;
        for (k, &m) in m_values.iter().enumerate() {
            recall_sums[k] += recall_at_m(&ranked, &relevant, m)?;
            ap_sums[k] += average_precision_at_m(&ranked, &relevant, m)?;
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(DhaError::EmptyData(
            "no users with test interactions".into(),
        ));
    }
    let recall = recall_sums.iter().map(|s| s / evaluated as f64).collect();
    let map = ap_sums.iter().map(|s| s / evaluated as f64).collect();
    Ok(MetricsReport {
        m_values: m_values.to_vec(),
        recall,
        map,
        users_evaluated: evaluated,
        users_skipped: skipped,
    })
}
