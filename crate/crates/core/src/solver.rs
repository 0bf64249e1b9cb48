//! Wasserstein-robust multi-output linear regression.
//!
//! Minimizes
//!
//! ```text
//! (1/N) Σ_d ‖θ_d − B'x_d‖_r  +  ε ‖B̃'‖_s,    B̃ = (−B', I_K),  1/r + 1/s = 1
//! ```
//!
//! over `B ∈ R^{p×K}` by subgradient descent with diminishing steps and
//! best-iterate tracking. For `r = 2` the regularizer is the spectral norm of
//! `B̃' = [−B; I_K]`, which equals `sqrt(1 + σ_max(B)²)`.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Query;
use crate::error::{Error, Result};
use crate::gtd::{build_query_gtd, GtdParams};
use crate::norms::{
    max_abs_col_sum, max_abs_row_sum, norm_subgradient, sign, spectral_norm_estimate,
    top_singular_pair, vector_norm, NormOrder, PowerConfig,
};

/// Stacked features and GTD targets of every training document.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// `N × p`
    pub x: DMatrix<f64>,
    /// `N × K`
    pub theta: DMatrix<f64>,
}

impl TrainingSet {
    pub fn new(x: DMatrix<f64>, theta: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != theta.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: theta.nrows(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("training set"));
        }
        Ok(Self { x, theta })
    }

    /// Stacks every non-degenerate query. All-zero-label queries carry no
    /// ranking signal and are skipped.
    pub fn from_queries(queries: &[Query], params: &GtdParams) -> Result<Self> {
        let kept: Vec<&Query> = queries.iter().filter(|q| !q.is_degenerate()).collect();
        let n: usize = kept.iter().map(|q| q.len()).sum();
        if n == 0 {
            return Err(Error::Empty("no training query with a relevant document"));
        }
        let p = kept[0].documents[0].features.len();
        let mut x = DMatrix::zeros(n, p);
        let mut theta = DMatrix::zeros(n, params.k);
        let mut row = 0;
        for q in kept {
            let g = build_query_gtd(q, params)?;
            for (d, doc) in q.documents.iter().enumerate() {
                if doc.features.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        got: doc.features.len(),
                    });
                }
                for (j, v) in doc.features.iter().enumerate() {
                    x[(row, j)] = *v;
                }
                for k in 0..params.k {
                    theta[(row, k)] = g.values[(d, k)];
                }
                row += 1;
            }
        }
        Self::new(x, theta)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.theta.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "WeightsFile", try_from = "WeightsFile")]
pub struct ModelWeights {
    /// `p × K`
    pub b: DMatrix<f64>,
    pub r: NormOrder,
    pub epsilon: f64,
}

impl ModelWeights {
    pub fn zeros(p: usize, k: usize, r: NormOrder, epsilon: f64) -> Self {
        Self {
            b: DMatrix::zeros(p, k),
            r,
            epsilon,
        }
    }

    pub fn s(&self) -> NormOrder {
        self.r.conjugate()
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// On-disk layout of [`ModelWeights`]; `b` is row-major.
#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    version: u32,
    p: usize,
    k: usize,
    r: NormOrder,
    epsilon: f64,
    b: Vec<f64>,
}

impl From<ModelWeights> for WeightsFile {
    fn from(w: ModelWeights) -> Self {
        let b = (0..w.p())
            .flat_map(|i| (0..w.k()).map(move |j| (i, j)))
            .map(|(i, j)| w.b[(i, j)])
            .collect();
        Self {
            version: WEIGHTS_FORMAT_VERSION,
            p: w.p(),
            k: w.k(),
            r: w.r,
            epsilon: w.epsilon,
            b,
        }
    }
}

impl TryFrom<WeightsFile> for ModelWeights {
    type Error = Error;

    fn try_from(f: WeightsFile) -> Result<Self> {
        if f.version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported weights version {}",
                f.version
            )));
        }
        if f.b.len() != f.p * f.k {
            return Err(Error::DimensionMismatch {
                expected: f.p * f.k,
                got: f.b.len(),
            });
        }
        if f.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite weight".into()));
        }
        Ok(Self {
            b: DMatrix::from_row_slice(f.p, f.k, &f.b),
            r: f.r,
            epsilon: f.epsilon,
        })
    }
}

/// `B̃' = [−B; I_K]`, shape `(p + K) × K`.
pub fn augmented_transpose(b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = b.shape();
    let mut m = DMatrix::zeros(p + k, k);
    m.view_mut((0, 0), (p, k)).copy_from(&(-b));
    for j in 0..k {
        m[(p + j, j)] = 1.0;
    }
    m
}

/// `‖B̃'‖_s`, the dual-norm regularizer.
pub fn regularizer(b: &DMatrix<f64>, s: NormOrder, power: &PowerConfig) -> f64 {
    let bt = augmented_transpose(b);
    match s {
        NormOrder::One => max_abs_col_sum(&bt),
        NormOrder::Inf => max_abs_row_sum(&bt),
        NormOrder::Two => spectral_norm_estimate(&bt, power),
    }
}

pub fn residuals(b: &DMatrix<f64>, ts: &TrainingSet) -> DMatrix<f64> {
    &ts.theta - &ts.x * b
}

/// Mean residual `r`-norm, the ε = 0 (ERM) loss.
pub fn empirical_loss(b: &DMatrix<f64>, ts: &TrainingSet, r: NormOrder) -> f64 {
    let res = residuals(b, ts);
    res.row_iter()
        .map(|row| vector_norm(row.iter(), r))
        .sum::<f64>()
        / ts.n() as f64
}

pub fn objective(
    b: &DMatrix<f64>,
    ts: &TrainingSet,
    epsilon: f64,
    r: NormOrder,
    power: &PowerConfig,
) -> f64 {
    let loss = empirical_loss(b, ts, r);
    if epsilon == 0.0 {
        return loss;
    }
    loss + epsilon * regularizer(b, r.conjugate(), power)
}

/// A subgradient of the objective with respect to `B`.
pub fn subgradient(
    b: &DMatrix<f64>,
    ts: &TrainingSet,
    epsilon: f64,
    r: NormOrder,
    power: &PowerConfig,
) -> DMatrix<f64> {
    let mut grad = loss_subgradient(b, ts, r);
    if epsilon > 0.0 {
        grad += regularizer_subgradient(b, r.conjugate(), power) * epsilon;
    }
    grad
}

/// Subgradient of the mean residual norm: `−(1/N) Σ x_d u_d'` with `u_d` a
/// dual vector of the residual `θ_d − B'x_d`.
pub fn loss_subgradient(b: &DMatrix<f64>, ts: &TrainingSet, r: NormOrder) -> DMatrix<f64> {
    let res = residuals(b, ts);
    let mut dual = DMatrix::zeros(res.nrows(), res.ncols());
    let mut buf = vec![0.0; res.ncols()];
    for (i, row) in res.row_iter().enumerate() {
        for (dst, v) in buf.iter_mut().zip(row.iter()) {
            *dst = *v;
        }
        for (j, g) in norm_subgradient(&buf, r).into_iter().enumerate() {
            dual[(i, j)] = g;
        }
    }
    -(ts.x.transpose() * dual) / ts.n() as f64
}

/// Subgradient of `‖B̃'‖_s` in `B`. Ties go to the lowest row/column index
/// of `B̃'`, whose first `p` rows are `−B`.
pub fn regularizer_subgradient(b: &DMatrix<f64>, s: NormOrder, power: &PowerConfig) -> DMatrix<f64> {
    let (p, k) = b.shape();
    let mut g = DMatrix::zeros(p, k);
    match s {
        NormOrder::Two => {
            let sp = top_singular_pair(b, power);
            if sp.sigma > 0.0 {
                let scale = sp.sigma / (1.0 + sp.sigma * sp.sigma).sqrt();
                g = &sp.u * sp.v.transpose() * scale;
            }
        }
        NormOrder::Inf => {
            // max row sum of [−B; I]; identity rows sum to 1
            let mut best = 1.0;
            let mut arg = None;
            for i in 0..p {
                let s: f64 = b.row(i).iter().map(|v| v.abs()).sum();
                if s > best || (s == best && arg.is_none()) {
                    best = s;
                    arg = Some(i);
                }
            }
            if let Some(i) = arg {
                for j in 0..k {
                    g[(i, j)] = sign(b[(i, j)]);
                }
            }
        }
        NormOrder::One => {
            // column j of [−B; I] sums to Σ_i |B_ij| + 1
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for j in 0..k {
                let s: f64 = b.column(j).iter().map(|v| v.abs()).sum();
                if s > best {
                    best = s;
                    arg = j;
                }
            }
            for i in 0..p {
                g[(i, arg)] = sign(b[(i, arg)]);
            }
        }
    }
    g
}

/// Objective and subgradient at one point, sharing the residuals. For
/// `r = 2` the regularizer goes through `‖B̃'‖₂ = √(1 + σ_max(B)²)` so one
/// singular pair of `B` serves both.
fn value_and_subgradient(
    b: &DMatrix<f64>,
    ts: &TrainingSet,
    epsilon: f64,
    r: NormOrder,
    power: &PowerConfig,
) -> (f64, DMatrix<f64>) {
    let res = residuals(b, ts);
    let n = ts.n() as f64;
    let mut loss = 0.0;
    let mut dual = DMatrix::zeros(res.nrows(), res.ncols());
    let mut buf = vec![0.0; res.ncols()];
    for (i, row) in res.row_iter().enumerate() {
        for (dst, v) in buf.iter_mut().zip(row.iter()) {
            *dst = *v;
        }
        loss += vector_norm(&buf, r);
        for (j, g) in norm_subgradient(&buf, r).into_iter().enumerate() {
            dual[(i, j)] = g;
        }
    }
    let mut grad = -(ts.x.transpose() * dual) / n;
    let mut value = loss / n;
    if epsilon > 0.0 {
        let s = r.conjugate();
        if s == NormOrder::Two {
            let sp = top_singular_pair(b, power);
            let norm = (1.0 + sp.sigma * sp.sigma).sqrt();
            value += epsilon * norm;
            if sp.sigma > 0.0 {
                grad += &sp.u * sp.v.transpose() * (epsilon * sp.sigma / norm);
            }
        } else {
            value += epsilon * regularizer(b, s, power);
            grad += regularizer_subgradient(b, s, power) * epsilon;
        }
    }
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `η_t = η₀ / √t`
    InvSqrt,
    /// `η_t = η₀ / √t`, applied to the subgradient scaled to unit Frobenius norm.
    NormalizedInvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub eta0: f64,
    pub step_rule: StepRule,
    /// Stop once the best objective improves by less than this (relative)
    /// over `window` iterations.
    pub tol: f64,
    pub window: usize,
    /// Restart from the best iterate every this many steps with
    /// `η₀ ← η₀ · restart_shrink`; 0 disables restarts.
    pub restart_every: usize,
    pub restart_shrink: f64,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            eta0: 0.5,
            step_rule: StepRule::NormalizedInvSqrt,
            tol: 1e-9,
            window: 2_000,
            restart_every: 500,
            restart_shrink: 0.7,
            power_iters: 10_000,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.window == 0 || self.power_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_iters, window and power_iters must be positive".into(),
            ));
        }
        if !(self.eta0 > 0.0) || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("eta0 and tol must be > 0".into()));
        }
        if !(self.restart_shrink > 0.0 && self.restart_shrink <= 1.0) {
            return Err(Error::InvalidArgument("restart_shrink must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn power(&self) -> PowerConfig {
        PowerConfig {
            tol: 1e-10,
            max_iters: self.power_iters,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub best_iteration: usize,
    pub stopped_early: bool,
}

pub fn fit(
    ts: &TrainingSet,
    epsilon: f64,
    r: NormOrder,
    cfg: &SolverConfig,
) -> Result<ModelWeights> {
    fit_detailed(ts, epsilon, r, cfg).map(|(w, _)| w)
}

/// Subgradient descent from `B = 0`, returning the best iterate seen.
pub fn fit_detailed(
    ts: &TrainingSet,
    epsilon: f64,
    r: NormOrder,
    cfg: &SolverConfig,
) -> Result<(ModelWeights, FitSummary)> {
    cfg.validate()?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
    }
    let power = cfg.power();
    let mut b = DMatrix::zeros(ts.p(), ts.k());
    let (initial, mut g) = value_and_subgradient(&b, ts, epsilon, r, &power);
    if !initial.is_finite() {
        return Err(Error::NonFinite(0));
    }
    let mut best_b = b.clone();
    let mut best = initial;
    let mut best_iter = 0;
    let mut history: VecDeque<f64> = VecDeque::with_capacity(cfg.window + 1);
    history.push_back(best);
    let mut iterations = 0;
    let mut stopped_early = false;
    let mut eta0 = cfg.eta0;
    let mut stage_t = 0usize;

    for t in 1..=cfg.max_iters {
        iterations = t;
        if cfg.restart_every > 0 && stage_t == cfg.restart_every {
            b.copy_from(&best_b);
            g = value_and_subgradient(&b, ts, epsilon, r, &power).1;
            eta0 *= cfg.restart_shrink;
            stage_t = 0;
        }
        stage_t += 1;
        let eta = eta0 / (stage_t as f64).sqrt();
        let scale = match cfg.step_rule {
            StepRule::InvSqrt => eta,
            StepRule::NormalizedInvSqrt => {
                let n = g.norm();
                if n == 0.0 {
                    stopped_early = true;
                    break;
                }
                eta / n
            }
        };
        b -= &g * scale;
        let (f, next_g) = value_and_subgradient(&b, ts, epsilon, r, &power);
        if !f.is_finite() {
            return Err(Error::NonFinite(t));
        }
        g = next_g;
        if f < best {
            best = f;
            best_b.copy_from(&b);
            best_iter = t;
        }
        history.push_back(best);
        if history.len() > cfg.window + 1 {
            history.pop_front();
        }
        if history.len() == cfg.window + 1 {
            let old = history[0];
            if old - best <= cfg.tol * old.abs().max(f64::MIN_POSITIVE) {
                stopped_early = true;
                break;
            }
        }
    }
    Ok((
        ModelWeights {
            b: best_b,
            r,
            epsilon,
        },
        FitSummary {
            objective: best,
            initial_objective: initial,
            iterations,
            best_iteration: best_iter,
            stopped_early,
        },
    ))
}

/// `Θ̂ = X B`, one row of predicted GTD scores per document.
pub fn predict_gtd(weights: &ModelWeights, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != weights.p() {
        return Err(Error::DimensionMismatch {
            expected: weights.p(),
            got: x.ncols(),
        });
    }
    Ok(x * &weights.b)
}

/// Rows of `query` as an `n × p` matrix.
pub fn feature_matrix(query: &Query) -> DMatrix<f64> {
    let n = query.len();
    let p = query.documents.first().map_or(0, |d| d.features.len());
    DMatrix::from_fn(n, p, |i, j| query.documents[i].features[j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub objective: f64,
    pub empirical_loss: f64,
    pub max_sampled_loss: f64,
    pub samples: usize,
    /// Number of sampled distributions whose loss exceeded the objective.
    pub violations: usize,
}

impl BoundCheckReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

const BOUND_SLACK: f64 = 1e-9;

/// Samples distributions inside the order-1 Wasserstein ball of radius ε
/// around the training points and checks that none of their expected losses
/// exceeds the regularized objective at `weights`.
///
/// Each sample moves every support point `z_i = (x_i, θ_i)` by a vector
/// `Δ_i` (optionally splitting its mass in two halves) with mean transport
/// cost `(1/N) Σ ‖Δ_i‖_r ≤ ε`. Directions are random, or aligned with the
/// first-order ascent direction `B̃' ∂‖res_i‖_r` and line-searched.
pub fn worst_case_bound_check(
    weights: &ModelWeights,
    ts: &TrainingSet,
    n_samples: usize,
    seed: u64,
    power: &PowerConfig,
) -> BoundCheckReport {
    let (b, r, eps) = (&weights.b, weights.r, weights.epsilon);
    let n = ts.n();
    let dim = ts.p() + ts.k();
    let obj = objective(b, ts, eps, r, power);
    let emp = empirical_loss(b, ts, r);
    let bt = augmented_transpose(b);
    // B̃ Δ = δθ − B'δx
    let b_tilde = bt.transpose();
    let res = residuals(b, ts);
    let ascent: Vec<DVector<f64>> = res
        .row_iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().copied().collect();
            let g = DVector::from_vec(norm_subgradient(&v, r));
            unit(&bt * g, r)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_loss = f64::NEG_INFINITY;
    let mut violations = 0;
    let shifted_loss = |i: usize, delta: &DVector<f64>| -> f64 {
        let moved = res.row(i).transpose() + &b_tilde * delta;
        vector_norm(moved.iter(), r)
    };

    for s in 0..n_samples {
        // per-point budgets with mean eps * u, u in (0, 1]
        let u: f64 = 1.0 - rng.random::<f64>();
        let budgets: Vec<f64> = match s % 4 {
            0 => {
                let mut b = vec![0.0; n];
                b[rng.random_range(0..n)] = n as f64 * eps * u;
                b
            }
            _ => {
                let w: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = w.iter().sum();
                w.iter().map(|x| x / total * n as f64 * eps * u).collect()
            }
        };
        let aligned = s % 2 == 1;
        let split = s % 3 == 2;
        let mut total = 0.0;
        for i in 0..n {
            let dir = if aligned {
                ascent[i].clone()
            } else {
                random_unit(&mut rng, dim, r)
            };
            total += if split {
                // half the mass moves along dir, half along an independent direction
                let other = random_unit(&mut rng, dim, r);
                0.5 * shifted_loss(i, &(&dir * budgets[i]))
                    + 0.5 * shifted_loss(i, &(other * budgets[i]))
            } else if aligned {
                // crude line search along the ascent direction
                [0.25, 0.5, 1.0]
                    .iter()
                    .map(|t| shifted_loss(i, &(&dir * (t * budgets[i]))))
                    .fold(f64::NEG_INFINITY, f64::max)
            } else {
                shifted_loss(i, &(dir * budgets[i]))
            };
        }
        let loss = total / n as f64;
        if loss > obj + BOUND_SLACK {
            violations += 1;
        }
        max_loss = max_loss.max(loss);
    }
    BoundCheckReport {
        objective: obj,
        empirical_loss: emp,
        max_sampled_loss: max_loss,
        samples: n_samples,
        violations,
    }
}

fn unit(v: DVector<f64>, r: NormOrder) -> DVector<f64> {
    let n = vector_norm(v.iter(), r);
    if n == 0.0 {
        v
    } else {
        v / n
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize, r: NormOrder) -> DVector<f64> {
    let v = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    unit(v, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn power() -> PowerConfig {
        PowerConfig::default()
    }

    fn toy(seed: u64, n: usize, p: usize, k: usize) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
        let theta = DMatrix::from_fn(n, k, |_, _| 5.0 * rng.random::<f64>());
        TrainingSet::new(x, theta).unwrap()
    }

    #[test]
    fn objective_at_zero() {
        let ts = toy(1, 8, 3, 2);
        for r in [NormOrder::One, NormOrder::Two, NormOrder::Inf] {
            let mean: f64 = ts
                .theta
                .row_iter()
                .map(|row| vector_norm(row.iter(), r))
                .sum::<f64>()
                / 8.0;
            let z = DMatrix::zeros(3, 2);
            assert_relative_eq!(objective(&z, &ts, 0.7, r, &power()), mean + 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn fused_evaluation_matches_public_routes() {
        let ts = toy(9, 15, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for r in [NormOrder::One, NormOrder::Two, NormOrder::Inf] {
            let b = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-2.0..2.0));
            let (f, g) = value_and_subgradient(&b, &ts, 0.3, r, &power());
            assert_relative_eq!(f, objective(&b, &ts, 0.3, r, &power()), epsilon = 1e-10);
            let expected = subgradient(&b, &ts, 0.3, r, &power());
            assert!((g - expected).amax() < 1e-10);
        }
    }

    #[test]
    fn exact_fit_has_zero_objective() {
        let ts = TrainingSet::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 2.0))
            .unwrap();
        let b = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(objective(&b, &ts, 0.0, NormOrder::Two, &power()), 0.0);
        assert_eq!(subgradient(&b, &ts, 0.0, NormOrder::Two, &power()), DMatrix::zeros(1, 1));
    }

    #[test]
    fn epsilon_scales_only_regularizer() {
        let ts = toy(2, 10, 3, 2);
        let b = DMatrix::from_fn(3, 2, |i, j| (i as f64) - (j as f64) * 0.5);
        let base = objective(&b, &ts, 0.0, NormOrder::Two, &power());
        let one = objective(&b, &ts, 1.0, NormOrder::Two, &power());
        let three = objective(&b, &ts, 3.0, NormOrder::Two, &power());
        assert_relative_eq!(three - base, 3.0 * (one - base), epsilon = 1e-10);
    }

    #[test]
    fn regularizer_subgradient_vanishes_at_zero() {
        let z = DMatrix::zeros(4, 3);
        assert_eq!(regularizer_subgradient(&z, NormOrder::Two, &power()), z);
    }

    #[test]
    fn dual_norm_regularizers() {
        let b = DMatrix::from_row_slice(2, 2, &[0.5, -2.0, 1.0, 0.25]);
        // [-B; I] rows: (-0.5, 2), (-1, -0.25), (1, 0), (0, 1)
        assert_eq!(regularizer(&b, NormOrder::Inf, &power()), 2.5);
        // columns: 0.5 + 1 + 1 = 2.5, 2 + 0.25 + 1 = 3.25
        assert_eq!(regularizer(&b, NormOrder::One, &power()), 3.25);
        let g = regularizer_subgradient(&b, NormOrder::One, &power());
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 1.0]));
        let g = regularizer_subgradient(&b, NormOrder::Inf, &power());
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]));
    }

    #[test]
    fn predict_shapes() {
        let w = ModelWeights::zeros(3, 2, NormOrder::Two, 0.1);
        let x = DMatrix::from_element(4, 3, 1.0);
        assert_eq!(predict_gtd(&w, &x).unwrap(), DMatrix::zeros(4, 2));
        assert!(predict_gtd(&w, &DMatrix::zeros(4, 2)).is_err());
        let id = ModelWeights {
            b: DMatrix::identity(3, 3),
            r: NormOrder::Two,
            epsilon: 0.0,
        };
        let x = DMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(predict_gtd(&id, &x).unwrap(), x);
    }

    #[test]
    fn fit_exactly_fittable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(30, 3, |_, _| rng.random::<f64>());
        let b_true = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0]);
        let ts = TrainingSet::new(x.clone(), &x * &b_true).unwrap();
        let cfg = SolverConfig {
            max_iters: 50_000,
            tol: 1e-12,
            window: 5_000,
            ..SolverConfig::default()
        };
        let (_, s) = fit_detailed(&ts, 0.0, NormOrder::Two, &cfg).unwrap();
        assert!(s.objective < 1e-6, "objective {}", s.objective);
    }

    #[test]
    fn fit_is_deterministic() {
        let ts = toy(5, 20, 4, 3);
        let cfg = SolverConfig::default();
        let a = fit(&ts, 0.1, NormOrder::Two, &cfg).unwrap();
        let b = fit(&ts, 0.1, NormOrder::Two, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_rejects_non_finite() {
        let x = DMatrix::from_element(2, 1, f64::MAX);
        let ts = TrainingSet::new(x, DMatrix::from_element(2, 1, f64::INFINITY)).unwrap();
        assert!(matches!(
            fit(&ts, 0.0, NormOrder::Two, &SolverConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn weights_json_round_trip() {
        let w = ModelWeights {
            b: DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 2.5e-17, 7.0, f64::EPSILON, -0.0]),
            r: NormOrder::Inf,
            epsilon: 0.125,
        };
        let back = ModelWeights::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(w, back);
        assert!(ModelWeights::from_json(r#"{"version":9,"p":1,"k":1,"r":"2","epsilon":0,"b":[0]}"#).is_err());
    }

    #[test]
    fn bound_check_with_zero_radius_is_empirical() {
        let ts = toy(6, 10, 2, 2);
        let w = ModelWeights {
            b: DMatrix::from_element(2, 2, 0.3),
            r: NormOrder::Two,
            epsilon: 0.0,
        };
        let rep = worst_case_bound_check(&w, &ts, 50, 1, &power());
        assert!(rep.holds());
        assert_relative_eq!(rep.max_sampled_loss, rep.empirical_loss, epsilon = 1e-12);
    }
}
