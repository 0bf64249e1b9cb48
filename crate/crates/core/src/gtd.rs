//! Ground Truth Deviation targets.
//!
//! For document `d` of a query, the target is a K-vector
//! `θ_d = ξ_I · (ξ_D ∘ ξ_Φ)` where
//!
//! * `ξ_Φ[i]` is the NDCG of the ideally sorted list after swapping `d`
//!   with the document at position `i`,
//! * `ξ_D[i]` penalizes the distance between `i` and the ideal slot of `d`,
//!   more strongly when `i` lies below that slot,
//! * `ξ_I` grows with the grade of `d` and is 0 for irrelevant documents.
//!
//! Only the first K positions are kept. Shorter queries repeat their last
//! entry up to length K.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::Query;
use crate::error::{Error, Result};
use crate::metrics::{discount, DEFAULT_LOG_BASE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtdParams {
    /// Number of importance levels kept.
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub log_base: f64,
    pub y_max: u32,
}

impl Default for GtdParams {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 10.0,
            beta: 2.0,
            log_base: DEFAULT_LOG_BASE,
            y_max: 2,
        }
    }
}

impl GtdParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be > 0".into()));
        }
        if !(self.log_base > 1.0) {
            return Err(Error::InvalidArgument("log_base must be > 1".into()));
        }
        if self.y_max == 0 {
            return Err(Error::InvalidArgument("y_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// A query's labels in ideal (descending, stable) order.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedQuery {
    /// sorted position (0-based) -> original document index
    pub order: Vec<usize>,
    pub y_sorted: Vec<u32>,
    /// original document index -> 1-based sorted position
    pub pos_of: Vec<usize>,
    pub idcg: f64,
    pub log_base: f64,
}

impl SortedQuery {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.idcg <= 0.0
    }

    pub fn label_of(&self, d: usize) -> u32 {
        self.y_sorted[self.pos_of[d] - 1]
    }
}

pub fn sort_by_relevance(labels: &[u32], log_base: f64) -> Result<SortedQuery> {
    if labels.is_empty() {
        return Err(Error::Empty("query has no documents"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].cmp(&labels[a]));
    let y_sorted: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
    let mut pos_of = vec![0; labels.len()];
    for (pos, &doc) in order.iter().enumerate() {
        pos_of[doc] = pos + 1;
    }
    let idcg = y_sorted
        .iter()
        .enumerate()
        .map(|(r, &y)| y as f64 * discount(r + 1, log_base))
        .sum();
    Ok(SortedQuery {
        order,
        y_sorted,
        pos_of,
        idcg,
        log_base,
    })
}

/// `λ_{d,i}` for every position `i = 1..n`; all zeros for a degenerate query.
pub fn ndcg_deviation_vector(sq: &SortedQuery, d: usize) -> Vec<f64> {
    let n = sq.len();
    if sq.is_degenerate() {
        return vec![0.0; n];
    }
    let y_d = sq.label_of(d) as f64;
    let own = discount(sq.pos_of[d], sq.log_base);
    (1..=n)
        .map(|i| {
            let y_i = sq.y_sorted[i - 1] as f64;
            let at_i = discount(i, sq.log_base);
            1.0 + ((y_d - y_i) * at_i + (y_i - y_d) * own) / sq.idcg
        })
        .collect()
}

/// `α / sqrt(cosh(min(βh, βh/2)))`, evaluated without overflowing cosh.
pub fn position_deviation(h: f64, alpha: f64, beta: f64) -> f64 {
    let x = (beta * h).min(0.5 * beta * h).abs();
    // 1/sqrt(cosh x) = sqrt(2 e^{-x} / (1 + e^{-2x}))
    let e = (-x).exp();
    alpha * (2.0 * e / (1.0 + e * e)).sqrt()
}

/// `ρ_{d,i}` for every position, with `h = pos(d) - i`.
pub fn position_deviation_vector(sq: &SortedQuery, d: usize, params: &GtdParams) -> Vec<f64> {
    let pos = sq.pos_of[d] as f64;
    (1..=sq.len())
        .map(|i| position_deviation(pos - i as f64, params.alpha, params.beta))
        .collect()
}

/// `ln(y·ŷ + 1) / ln(ŷ² + 1)`.
pub fn importance_score(y: u32, y_max: u32) -> f64 {
    let ym = y_max as f64;
    ((y as f64) * ym).ln_1p() / (ym * ym).ln_1p()
}

fn first_k_padded(v: &[f64], k: usize) -> impl Iterator<Item = f64> + '_ {
    let last = *v.last().expect("non-empty component vector");
    v.iter().copied().chain(std::iter::repeat(last)).take(k)
}

pub fn gtd_vector(sq: &SortedQuery, d: usize, params: &GtdParams) -> Vec<f64> {
    let xi_i = importance_score(sq.label_of(d), params.y_max);
    if sq.is_degenerate() || xi_i == 0.0 {
        return vec![0.0; params.k];
    }
    let lambda = ndcg_deviation_vector(sq, d);
    let rho = position_deviation_vector(sq, d, params);
    first_k_padded(&rho, params.k)
        .zip(first_k_padded(&lambda, params.k))
        .map(|(r, l)| xi_i * r * l)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtdMatrix {
    /// `n_q × K`, row `d` is the target of document `d` in original order.
    pub values: DMatrix<f64>,
    pub params: GtdParams,
}

impl GtdMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, d: usize) -> Vec<f64> {
        self.values.row(d).iter().copied().collect()
    }

    /// One CSV row per document, K columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (1..=self.params.k).map(|i| format!("level{i}")).collect();
        w.write_record(&header)?;
        for d in 0..self.nrows() {
            w.write_record(self.row(d).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn build_gtd_matrix(labels: &[u32], params: &GtdParams) -> Result<GtdMatrix> {
    params.validate()?;
    if let Some(&y) = labels.iter().find(|&&y| y > params.y_max) {
        return Err(Error::InvalidArgument(format!(
            "label {y} exceeds y_max {}",
            params.y_max
        )));
    }
    let sq = sort_by_relevance(labels, params.log_base)?;
    let mut values = DMatrix::zeros(labels.len(), params.k);
    for d in 0..labels.len() {
        for (j, v) in gtd_vector(&sq, d, params).into_iter().enumerate() {
            values[(d, j)] = v;
        }
    }
    Ok(GtdMatrix {
        values,
        params: *params,
    })
}

pub fn build_query_gtd(query: &Query, params: &GtdParams) -> Result<GtdMatrix> {
    build_gtd_matrix(&query.labels(), params)
}
