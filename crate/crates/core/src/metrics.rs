//! DCG / NDCG@k and binarized P@k / AP@k, plus per-query reports.
//!
//! Gain is linear in the grade, `G(s) = s`, and the discount is
//! `D(r) = 1 / log_b(1 + r)`. The GTD targets use the same [`discount`]
//! so that the training targets and the evaluation metric agree.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LOG_BASE: f64 = 2.0;

/// Position discount for 1-based rank `r`.
#[inline]
pub fn discount(rank: usize, log_base: f64) -> f64 {
    log_base.ln() / ((1 + rank) as f64).ln()
}

/// Grades of a predicted ranking, position 1 first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList(pub Vec<u32>);

impl RankedList {
    pub fn new(labels_in_rank_order: Vec<u32>) -> Result<Self> {
        if labels_in_rank_order.is_empty() {
            return Err(Error::Empty("ranked list"));
        }
        Ok(Self(labels_in_rank_order))
    }

    /// Labels permuted by `order` (0-based document indices, best first).
    pub fn from_order(labels: &[u32], order: &[usize]) -> Result<Self> {
        Self::new(order.iter().map(|&i| labels[i]).collect())
    }

    pub fn labels(&self) -> &[u32] {
        &self.0
    }
}

pub fn dcg_at_k(labels: &[u32], k: usize, log_base: f64) -> f64 {
    labels
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &y)| y as f64 * discount(i + 1, log_base))
        .sum()
}

pub fn ideal_dcg_at_k(labels: &[u32], k: usize, log_base: f64) -> f64 {
    let mut ideal = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    dcg_at_k(&ideal, k, log_base)
}

/// NDCG@k against the ideal ordering of `ideal_labels`; zero when the ideal
/// DCG@k is zero.
pub fn ndcg_at_k(ranked: &[u32], ideal_labels: &[u32], k: usize, log_base: f64) -> f64 {
    let idcg = ideal_dcg_at_k(ideal_labels, k, log_base);
    if idcg <= 0.0 {
        return 0.0;
    }
    dcg_at_k(ranked, k, log_base) / idcg
}

#[inline]
fn relevant(grade: u32) -> bool {
    grade >= 1
}

pub fn precision_at_k(ranked: &[u32], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    ranked.iter().take(k).filter(|&&y| relevant(y)).count() as f64 / k as f64
}

/// Mean of P@j over the relevant positions `j <= k`, divided by the number
/// of relevant documents in the top k. Zero when there are none.
pub fn ap_at_k(ranked: &[u32], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, &y) in ranked.iter().take(k).enumerate() {
        if relevant(y) {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ndcg,
    Ap,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Ndcg => "ndcg",
            Metric::Ap => "ap",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub ndcg: BTreeMap<usize, f64>,
    pub ap: BTreeMap<usize, f64>,
}

impl QueryMetrics {
    pub fn compute(ranked: &[u32], ks: &[usize], log_base: f64) -> Self {
        let mut out = Self::default();
        for &k in ks {
            out.ndcg.insert(k, ndcg_at_k(ranked, ranked, k, log_base));
            out.ap.insert(k, ap_at_k(ranked, k));
        }
        out
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        match metric {
            Metric::Ndcg => self.ndcg.get(&k).copied(),
            Metric::Ap => self.ap.get(&k).copied(),
        }
    }
}

/// Per-query metric values for one fold, with their arithmetic means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: usize,
    pub per_query: BTreeMap<String, QueryMetrics>,
    pub means: QueryMetrics,
}

impl MetricsReport {
    pub fn from_queries(fold: usize, per_query: BTreeMap<String, QueryMetrics>) -> Self {
        let means = mean_metric(per_query.values());
        Self {
            fold,
            per_query,
            means,
        }
    }

    pub fn mean(&self, metric: Metric, k: usize) -> Option<f64> {
        self.means.get(metric, k)
    }

    pub fn ks(&self) -> Vec<usize> {
        self.means.ndcg.keys().copied().collect()
    }

    /// Writes `fold,metric,k,mean` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["fold", "metric", "k", "mean"])?;
        for metric in [Metric::Ndcg, Metric::Ap] {
            for k in self.ks() {
                let v = self.mean(metric, k).unwrap_or(f64::NAN);
                w.write_record([
                    self.fold.to_string(),
                    metric.to_string(),
                    k.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Equal-weight mean over queries of every (metric, k) entry.
pub fn mean_metric<'a>(reports: impl IntoIterator<Item = &'a QueryMetrics>) -> QueryMetrics {
    let mut sum = QueryMetrics::default();
    let mut n = 0usize;
    for r in reports {
        n += 1;
        for (k, v) in &r.ndcg {
            *sum.ndcg.entry(*k).or_default() += v;
        }
        for (k, v) in &r.ap {
            *sum.ap.entry(*k).or_default() += v;
        }
    }
    if n > 0 {
        for v in sum.ndcg.values_mut().chain(sum.ap.values_mut()) {
            *v /= n as f64;
        }
    }
    sum
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
