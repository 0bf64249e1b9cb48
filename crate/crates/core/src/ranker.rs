//! Turning predicted GTD matrices into rankings, plus a pointwise linear
//! baseline that also serves as the white-box adversary.
//!
//! Orders are 0-based document indices, best first.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Query;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingSource {
    Drmrr,
    Pointwise,
    External,
}

impl RankingSource {
    pub fn tag(self) -> &'static str {
        match self {
            RankingSource::Drmrr => "drmrr",
            RankingSource::Pointwise => "pointwise",
            RankingSource::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub source: RankingSource,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// True when `order` is a permutation of `0..len`.
    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        for &i in &self.order {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }

    /// Labels of `query` rearranged into ranked order.
    pub fn ranked_labels(&self, query: &Query) -> Vec<u32> {
        self.order.iter().map(|&i| query.documents[i].label).collect()
    }

    /// TREC run lines `qid Q0 doc_id rank score tag`. The score is
    /// `n - rank + 1` so that sorting by score reproduces the order.
    pub fn trec_lines(&self, query: &Query, tag: &str) -> String {
        let n = self.order.len();
        let mut out = String::new();
        for (pos, &i) in self.order.iter().enumerate() {
            let _ = writeln!(
                out,
                "{} Q0 {} {} {} {}",
                query.qid,
                query.documents[i].doc_id,
                pos + 1,
                n - pos,
                tag
            );
        }
        out
    }
}

/// Greedy column-cycling decoder: position `j` (1-based) takes the remaining row with the largest
/// entry in column `δ`. `δ` starts at 1, increments after each pick and wraps
/// back to 1 whenever `j` is a multiple of `K`. Ties go to the lowest row.
pub fn rank_from_gtd(theta_hat: &DMatrix<f64>) -> Result<Ranking> {
    let (n, k) = theta_hat.shape();
    if n == 0 || k == 0 {
        return Err(Error::Empty("predicted GTD matrix"));
    }
    if let Some(bad) = theta_hat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    let mut delta = 0;
    for j in 1..=n {
        let mut best = 0;
        for (slot, &row) in remaining.iter().enumerate().skip(1) {
            if theta_hat[(row, delta)] > theta_hat[(remaining[best], delta)] {
                best = slot;
            }
        }
        order.push(remaining.remove(best));
        delta = if j % k == 0 { 0 } else { delta + 1 };
    }
    Ok(Ranking {
        order,
        source: RankingSource::Drmrr,
    })
}

/// Ridge added to the normal equations so rank-deficient designs solve.
pub const RIDGE_JITTER: f64 = 1e-8;

/// Least squares `argmin Σ (w'x - y)^2` through `(X'X + jitter·I) w = X'y`.
pub fn fit_pointwise_linear(x: &DMatrix<f64>, y: &[f64]) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::Empty("pointwise training set"));
    }
    let p = x.ncols();
    let mut gram = x.transpose() * x;
    for i in 0..p {
        gram[(i, i)] += RIDGE_JITTER;
    }
    let rhs = x.transpose() * DVector::from_column_slice(y);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("normal equations are not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

/// Stacks features and raw grades of every document in `queries`.
pub fn scalar_training_set(queries: &[Query]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let docs: Vec<_> = queries.iter().flat_map(|q| q.documents.iter()).collect();
    let first = docs.first().ok_or(Error::Empty("pointwise training set"))?;
    let p = first.features.len();
    if let Some(d) = docs.iter().find(|d| d.features.len() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: d.features.len(),
        });
    }
    let x = DMatrix::from_fn(docs.len(), p, |i, j| docs[i].features[j]);
    let y = docs.iter().map(|d| f64::from(d.label)).collect();
    Ok((x, y))
}

/// Descending sort of `scores`, stable so equal scores keep input order.
pub fn rank_by_scores(scores: &[f64], source: RankingSource) -> Ranking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ranking { order, source }
}

pub fn rank_pointwise(w: &DVector<f64>, x: &DMatrix<f64>) -> Result<Ranking> {
    if x.ncols() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: x.ncols(),
        });
    }
    let scores = x * w;
    Ok(rank_by_scores(scores.as_slice(), RankingSource::Pointwise))
}
