//! Vector norms and induced matrix norms for `r, s ∈ {1, 2, ∞}`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl NormOrder {
    /// Hölder conjugate: `1/r + 1/s = 1`.
    pub fn conjugate(self) -> Self {
        match self {
            NormOrder::One => NormOrder::Inf,
            NormOrder::Two => NormOrder::Two,
            NormOrder::Inf => NormOrder::One,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" => Ok(NormOrder::One),
            "2" => Ok(NormOrder::Two),
            "inf" | "infinity" | "∞" => Ok(NormOrder::Inf),
            other => Err(Error::InvalidArgument(format!(
                "norm order must be 1, 2 or inf, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormOrder::One => "1",
            NormOrder::Two => "2",
            NormOrder::Inf => "inf",
        })
    }
}

pub fn vector_norm<'a>(v: impl IntoIterator<Item = &'a f64>, r: NormOrder) -> f64 {
    let it = v.into_iter();
    match r {
        NormOrder::One => it.map(|x| x.abs()).sum(),
        NormOrder::Two => it.map(|x| x * x).sum::<f64>().sqrt(),
        NormOrder::Inf => it.fold(0.0, |m, x| m.max(x.abs())),
    }
}

/// A dual (sub)gradient of `‖v‖_r` at `v`. Zero at `v = 0`; for `r = ∞` the
/// first index attaining the maximum is used.
pub fn norm_subgradient(v: &[f64], r: NormOrder) -> Vec<f64> {
    match r {
        NormOrder::One => v.iter().map(|&x| sign(x)).collect(),
        NormOrder::Two => {
            let n = vector_norm(v, NormOrder::Two);
            if n == 0.0 {
                vec![0.0; v.len()]
            } else {
                v.iter().map(|x| x / n).collect()
            }
        }
        NormOrder::Inf => {
            let mut g = vec![0.0; v.len()];
            let mut best = 0.0;
            let mut arg = None;
            for (i, &x) in v.iter().enumerate() {
                if x.abs() > best {
                    best = x.abs();
                    arg = Some(i);
                }
            }
            if let Some(i) = arg {
                g[i] = sign(v[i]);
            }
            g
        }
    }
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    /// Stop when successive unit iterates differ by at most this in 2-norm.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 100_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult {
    /// Largest eigenvalue of the symmetric PSD input.
    pub value: f64,
    pub vector: DVector<f64>,
    pub iters: usize,
    pub converged: bool,
}

/// Power iteration for the dominant eigenpair of a symmetric PSD matrix,
/// started from a seeded random vector.
pub fn power_iteration(gram: &DMatrix<f64>, cfg: &PowerConfig) -> PowerResult {
    power_iteration_from(gram, cfg, None)
}

/// As [`power_iteration`], optionally starting from `start`.
///
/// The operator is squared after every step, so step `j` applies
/// `G^(2^j)` (normalized). Clustered top eigenvalues then separate from the
/// rest after a few dozen steps, and the returned value is the Rayleigh
/// quotient of the final iterate on the original `G`.
pub fn power_iteration_from(
    gram: &DMatrix<f64>,
    cfg: &PowerConfig,
    start: Option<&DVector<f64>>,
) -> PowerResult {
    let n = gram.nrows();
    let scale = gram.norm();
    if n == 0 || scale == 0.0 {
        let mut vector = DVector::zeros(n);
        if n > 0 {
            vector[0] = 1.0;
        }
        return PowerResult {
            value: 0.0,
            vector,
            iters: 0,
            converged: true,
        };
    }
    let mut v = match start {
        Some(s) if s.len() == n && s.norm() > 0.0 => s / s.norm(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            &v / v.norm()
        }
    };
    let mut op = gram / scale;
    let mut squaring = true;
    for it in 1..=cfg.max_iters {
        let w = &op * &v;
        let norm = w.norm();
        if norm == 0.0 {
            // iterate fell into the null space of the current power
            v = DVector::from_fn(n, |i, _| if i == it % n { 1.0 } else { 0.0 });
            continue;
        }
        let next = w / norm;
        let delta = (&next - &v).norm();
        v = next;
        if delta <= cfg.tol {
            return PowerResult {
                value: v.dot(&(gram * &v)),
                vector: v,
                iters: it,
                converged: true,
            };
        }
        if squaring {
            let sq = &op * &op;
            let sq_norm = sq.norm();
            if sq_norm == 0.0 || !sq_norm.is_finite() {
                squaring = false;
            } else {
                let sq = sq / sq_norm;
                squaring = (&sq - &op).norm() > 1e-15;
                op = sq;
            }
        }
    }
    PowerResult {
        value: v.dot(&(gram * &v)),
        vector: v,
        iters: cfg.max_iters,
        converged: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularPair {
    pub sigma: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub converged: bool,
}

/// Top singular triplet of `m` from power iteration on `m'm`.
pub fn top_singular_pair(m: &DMatrix<f64>, cfg: &PowerConfig) -> SingularPair {
    top_singular_pair_from(m, cfg, None)
}

pub fn top_singular_pair_from(
    m: &DMatrix<f64>,
    cfg: &PowerConfig,
    start: Option<&DVector<f64>>,
) -> SingularPair {
    let gram = m.transpose() * m;
    let res = power_iteration_from(&gram, cfg, start);
    let sigma = res.value.max(0.0).sqrt();
    let u = if sigma > 0.0 {
        (m * &res.vector) / sigma
    } else {
        DVector::zeros(m.nrows())
    };
    SingularPair {
        sigma,
        u,
        v: res.vector,
        converged: res.converged,
    }
}

/// Largest singular value, without failing on slow convergence.
pub fn spectral_norm_estimate(m: &DMatrix<f64>, cfg: &PowerConfig) -> f64 {
    let res = power_iteration(&(m.transpose() * m), cfg);
    res.value.max(0.0).sqrt()
}

/// Induced `s`-norm: max column sum (1), spectral norm (2), max row sum (∞).
pub fn induced_norm(m: &DMatrix<f64>, s: NormOrder, cfg: &PowerConfig) -> Result<f64> {
    match s {
        NormOrder::One => Ok(max_abs_col_sum(m)),
        NormOrder::Inf => Ok(max_abs_row_sum(m)),
        NormOrder::Two => {
            let res = power_iteration(&(m.transpose() * m), cfg);
            if res.converged {
                Ok(res.value.max(0.0).sqrt())
            } else {
                Err(Error::NoConvergence {
                    iters: res.iters,
                    estimate: res.value.max(0.0).sqrt(),
                    last_vector: res.vector.iter().copied().collect(),
                })
            }
        }
    }
}

pub fn max_abs_col_sum(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs_row_sum(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
