//! Ranking metrics, mixture diagnostics, significance tests and soft-prompt
//! visualization.

mod significance;
mod viz;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use significance::{paired_permutation_test, sign_test, PermutationMode};
pub use viz::{render_html, render_tsv, visualize_mixture, visualize_prompt, SlotRow};

/// 1-based rank of `gold_id`; ties are broken toward lower token ids.
pub fn rank_gold(distribution: &[f64], gold_id: usize) -> usize {
    let g = distribution[gold_id];
    1 + distribution
        .iter()
        .enumerate()
        .filter(|&(w, &p)| p > g || (p == g && w < gold_id))
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRecord {
    pub example_id: String,
    pub relation: String,
    pub rank: usize,
}

impl RankRecord {
    pub fn reciprocal_rank(&self) -> f64 {
        1.0 / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub p_at_1: f64,
    pub p_at_10: f64,
    pub mrr: f64,
    pub n: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::input("metrics need at least one ranked example"));
        }
        if ranks.contains(&0) {
            return Err(Error::input("ranks are 1-based"));
        }
        let n = ranks.len() as f64;
        Ok(Self {
            p_at_1: ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
            p_at_10: ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            n: ranks.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_relation: BTreeMap<String, Metrics>,
    /// Unweighted mean over relations.
    pub macro_avg: Metrics,
    /// Pooled over all examples.
    pub micro_avg: Metrics,
}

pub fn compute_metrics(records: &[RankRecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::input("metrics need at least one ranked example"));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in records {
        groups.entry(r.relation.clone()).or_default().push(r.rank);
    }
    let per_relation = groups
        .iter()
        .map(|(k, v)| Ok((k.clone(), Metrics::from_ranks(v)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let m = per_relation.len() as f64;
    let macro_avg = Metrics {
        p_at_1: per_relation.values().map(|x| x.p_at_1).sum::<f64>() / m,
        p_at_10: per_relation.values().map(|x| x.p_at_10).sum::<f64>() / m,
        mrr: per_relation.values().map(|x| x.mrr).sum::<f64>() / m,
        n: records.len(),
    };
    let all: Vec<usize> = records.iter().map(|r| r.rank).collect();
    Ok(MetricReport {
        per_relation,
        macro_avg,
        micro_avg: Metrics::from_ranks(&all)?,
    })
}

/// Entropy in bits of the mixture weights and the effective prompt count `2^H`.
pub fn effective_prompt_count(weights: &[f64]) -> Result<(f64, f64)> {
    if weights.is_empty() {
        return Err(Error::input("weights are empty"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::input("weights must be finite and non-negative"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::input(format!("weights sum to {s}, not 1")));
    }
    let h: f64 = weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum::<f64>()
        .max(0.0);
    let eff = 2f64.powf(h).clamp(1.0, weights.len() as f64);
    Ok((h, eff))
}
