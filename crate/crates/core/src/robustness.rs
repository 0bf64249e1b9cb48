//! Test-time feature attacks and training-label poisoning.
//!
//! Every attack is a pure function of its input, its [`AttackSpec`] and the
//! seed. Per-query randomness comes from a ChaCha stream indexed by the query
//! position, so the result does not depend on evaluation order.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Query;
use crate::error::{Error, Result};
use crate::norms::sign;
use crate::ranker::{fit_pointwise_linear, scalar_training_set};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Gaussian,
    UniversalFgsm,
    BlackboxFgsm,
    LabelPoison,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Gaussian => "gaussian",
            AttackKind::UniversalFgsm => "universal_fgsm",
            AttackKind::BlackboxFgsm => "blackbox_fgsm",
            AttackKind::LabelPoison => "label_poison",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            AttackKind::Gaussian,
            AttackKind::UniversalFgsm,
            AttackKind::BlackboxFgsm,
            AttackKind::LabelPoison,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown attack kind {s:?}")))
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Share of test queries that get perturbed.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// FGSM step size.
    #[serde(default)]
    pub eta: f64,
    /// Probability that a poisoned label keeps its grade.
    #[serde(default = "default_retention")]
    pub e: f64,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_FRACTION: f64 = 0.75;
pub const DEFAULT_SIGMA: f64 = 0.001;

fn default_fraction() -> f64 {
    DEFAULT_FRACTION
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn default_retention() -> f64 {
    1.0
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            fraction: default_fraction(),
            mu: 0.0,
            sigma: default_sigma(),
            eta: 0.0,
            e: default_retention(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("attack {}: {what}", self.kind)))
            }
        };
        check((0.0..=1.0).contains(&self.fraction), "fraction must lie in [0, 1]")?;
        check(self.sigma >= 0.0 && self.sigma.is_finite(), "sigma must be >= 0")?;
        check(self.eta >= 0.0 && self.eta.is_finite(), "eta must be >= 0")?;
        check((0.0..=1.0).contains(&self.e), "e must lie in [0, 1]")?;
        check(self.mu.is_finite(), "mu must be finite")
    }

    /// The swept quantity for this kind of attack.
    pub fn level(&self) -> f64 {
        match self.kind {
            AttackKind::Gaussian => self.mu,
            AttackKind::UniversalFgsm | AttackKind::BlackboxFgsm => self.eta,
            AttackKind::LabelPoison => self.e,
        }
    }
}

fn query_rng(seed: u64, query: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query as u64 + 1);
    rng
}

/// `⌈fraction · n⌉` distinct query positions, ascending. Guarded against
/// products like `0.7 · 10 = 7.000000000000001`.
pub fn attacked_queries(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let m = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Adds i.i.d. `N(mu, sigma²)` to every feature of every document in the
/// attacked queries. Labels are untouched.
pub fn gaussian_attack(queries: &[Query], spec: &AttackSpec) -> Result<Vec<Query>> {
    spec.validate()?;
    let noise = Normal::new(spec.mu, spec.sigma)
        .map_err(|e| Error::InvalidArgument(format!("gaussian attack: {e}")))?;
    let mut out = queries.to_vec();
    for qi in attacked_queries(queries.len(), spec.fraction, spec.seed) {
        let mut rng = query_rng(spec.seed, qi);
        for doc in &mut out[qi].documents {
            for v in &mut doc.features {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

/// Least-squares scorer on raw grades, fitted to clean training data.
pub fn train_linear_adversary(train: &[Query]) -> Result<DVector<f64>> {
    let (x, y) = scalar_training_set(train)?;
    fit_pointwise_linear(&x, &y)
}

/// Gradient of `(w'x - y)²` with respect to `x`.
pub fn linear_adversary_gradient(w: &DVector<f64>, x: &[f64], y: f64) -> Vec<f64> {
    let residual: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - y;
    w.iter().map(|wi| 2.0 * residual * wi).collect()
}

/// One signed-gradient step: `x + eta · sgn(∇J(x, y))`.
pub fn fgsm_perturb<G>(x: &[f64], y: f64, gradient: G, eta: f64) -> Vec<f64>
where
    G: Fn(&[f64], f64) -> Vec<f64>,
{
    let g = gradient(x, y);
    x.iter().zip(&g).map(|(xi, gi)| xi + eta * sign(*gi)).collect()
}

/// FGSM through the white-box linear adversary, `y` the document's grade.
pub fn universal_fgsm_attack(
    queries: &[Query],
    adversary: &DVector<f64>,
    spec: &AttackSpec,
) -> Result<Vec<Query>> {
    spec.validate()?;
    if let Some(d) = queries
        .iter()
        .flat_map(|q| &q.documents)
        .find(|d| d.features.len() != adversary.len())
    {
        return Err(Error::DimensionMismatch {
            expected: adversary.len(),
            got: d.features.len(),
        });
    }
    let mut out = queries.to_vec();
    for qi in attacked_queries(queries.len(), spec.fraction, spec.seed) {
        for doc in &mut out[qi].documents {
            let y = f64::from(doc.label);
            doc.features = fgsm_perturb(
                &doc.features,
                y,
                |x, y| linear_adversary_gradient(adversary, x, y),
                spec.eta,
            );
        }
    }
    Ok(out)
}

/// FGSM through a substitute network. `targets[q][d]` is the reference value
/// of document `d` of query `q` in the substitute's output space.
pub fn blackbox_fgsm_attack(
    queries: &[Query],
    substitute: &SubstituteModel,
    targets: &[Vec<f64>],
    spec: &AttackSpec,
) -> Result<Vec<Query>> {
    spec.validate()?;
    if targets.len() != queries.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            got: targets.len(),
        });
    }
    let mut out = queries.to_vec();
    for qi in attacked_queries(queries.len(), spec.fraction, spec.seed) {
        let q = &mut out[qi];
        if targets[qi].len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: targets[qi].len(),
            });
        }
        for (doc, &y) in q.documents.iter_mut().zip(&targets[qi]) {
            doc.features = fgsm_perturb(
                &doc.features,
                y,
                |x, y| mlp_input_gradient(substitute, x, y),
                spec.eta,
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    /// Learning rate at epoch `t` is `learning_rate / (1 + lr_decay · t)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a relative MSE gain above `plateau_tol`.
    pub patience: usize,
    pub plateau_tol: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            learning_rate: 3e-3,
            lr_decay: 0.01,
            batch_size: 32,
            max_epochs: 400,
            patience: 30,
            plateau_tol: 1e-4,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("mlp: {m}")));
        if self.hidden.iter().any(|&w| w == 0) {
            return bad("hidden widths must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.lr_decay < 0.0 {
            return bad("lr_decay must be >= 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        Ok(())
    }
}

/// Feed-forward scorer `x ↦ shift + scale · net(x)` with a linear output unit.
/// Targets are standardized during training and mapped back on output.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstituteModel {
    pub widths: Vec<usize>,
    /// `weights[l]` is `widths[l+1] × widths[l]`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub activation: Activation,
    pub shift: f64,
    pub scale: f64,
    pub train_mse: f64,
    pub epochs: usize,
}

impl SubstituteModel {
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Activations of every layer for a batch (rows are samples).
    fn forward_batch(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = &acts[l] * w.transpose();
            for mut row in z.row_iter_mut() {
                row += b.transpose();
            }
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let acts = self.forward_batch(&DMatrix::from_row_slice(1, x.len(), x));
        self.shift + self.scale * acts.last().unwrap()[(0, 0)]
    }

    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let acts = self.forward_batch(x);
        acts.last()
            .unwrap()
            .column(0)
            .iter()
            .map(|v| self.shift + self.scale * v)
            .collect()
    }

    /// Backpropagates `d_out` (gradient w.r.t. the raw network output, one row
    /// per sample) and returns per-layer weight and bias gradients plus the
    /// gradient w.r.t. the input batch.
    fn backward(
        &self,
        acts: &[DMatrix<f64>],
        d_out: DMatrix<f64>,
    ) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>, DMatrix<f64>) {
        let n_layers = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n_layers];
        let mut gb = vec![DVector::zeros(0); n_layers];
        let mut delta = d_out;
        for l in (0..n_layers).rev() {
            gw[l] = delta.transpose() * &acts[l];
            gb[l] = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            let mut prev = &delta * &self.weights[l];
            if l > 0 {
                let a = &acts[l];
                prev.zip_apply(a, |d, av| *d *= self.activation.derivative(av));
            }
            delta = prev;
        }
        (gw, gb, delta)
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            **p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn param_refs(model: &mut SubstituteModel) -> Vec<&mut f64> {
    let mut out = Vec::new();
    for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
        out.extend(w.iter_mut());
        out.extend(b.iter_mut());
    }
    out
}

fn flatten_grads(gw: &[DMatrix<f64>], gb: &[DVector<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in gw.iter().zip(gb) {
        out.extend(w.iter());
        out.extend(b.iter());
    }
    out
}

/// Mini-batch Adam on squared error between the network and `victim_scores`.
/// Keeps the parameters of the epoch with the lowest full-data MSE.
pub fn train_substitute_mlp(
    x: &DMatrix<f64>,
    victim_scores: &[f64],
    cfg: &MlpConfig,
) -> Result<SubstituteModel> {
    cfg.validate()?;
    let (n, p) = x.shape();
    if n != victim_scores.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: victim_scores.len(),
        });
    }
    if n == 0 || p == 0 {
        return Err(Error::Empty("substitute training set"));
    }
    let mean = victim_scores.iter().sum::<f64>() / n as f64;
    let var = victim_scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let target: Vec<f64> = victim_scores.iter().map(|v| (v - mean) / scale).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut widths = vec![p];
    widths.extend(&cfg.hidden);
    widths.push(1);
    // zero output layer: the untrained network predicts the target mean
    let last = widths.len() - 2;
    let weights: Vec<_> = widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            if l == last {
                DMatrix::zeros(w[1], w[0])
            } else {
                glorot(&mut rng, w[1], w[0])
            }
        })
        .collect();
    let biases = widths[1..].iter().map(|&w| DVector::zeros(w)).collect();
    let mut model = SubstituteModel {
        widths,
        weights,
        biases,
        activation: cfg.activation,
        shift: mean,
        scale,
        train_mse: f64::INFINITY,
        epochs: 0,
    };
    let n_params = param_refs(&mut model).len();
    let mut adam = Adam::new(n_params);

    let full_mse = |m: &SubstituteModel| -> f64 {
        let out = m.forward_batch(x);
        let last = out.last().unwrap();
        last.column(0)
            .iter()
            .zip(&target)
            .map(|(o, t)| (o - t).powi(2))
            .sum::<f64>()
            / n as f64
    };

    let mut best = model.clone();
    let mut best_mse = full_mse(&model);
    let mut plateau_ref = best_mse;
    let mut since_gain = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.learning_rate / (1.0 + cfg.lr_decay * epoch as f64);
        shuffle(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = DMatrix::from_fn(batch.len(), p, |i, j| x[(batch[i], j)]);
            let acts = model.forward_batch(&xb);
            let out = acts.last().unwrap();
            let d_out = DMatrix::from_fn(batch.len(), 1, |i, _| {
                2.0 * (out[(i, 0)] - target[batch[i]]) / batch.len() as f64
            });
            let (gw, gb, _) = model.backward(&acts, d_out);
            let grads = flatten_grads(&gw, &gb);
            adam.step(&mut param_refs(&mut model), &grads, lr);
        }
        let mse = full_mse(&model);
        if !mse.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        if mse < best_mse {
            best_mse = mse;
            best = model.clone();
            best.epochs = epoch;
        }
        if mse < plateau_ref * (1.0 - cfg.plateau_tol) {
            plateau_ref = mse;
            since_gain = 0;
        } else {
            since_gain += 1;
            if since_gain >= cfg.patience {
                break;
            }
        }
        if best_mse == 0.0 {
            break;
        }
    }
    best.train_mse = best_mse * scale * scale;
    Ok(best)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

/// Exact `∇_x (f(x) - y)²` for the substitute `f`.
pub fn mlp_input_gradient(model: &SubstituteModel, x: &[f64], y: f64) -> Vec<f64> {
    let acts = model.forward_batch(&DMatrix::from_row_slice(1, x.len(), x));
    let f = model.shift + model.scale * acts.last().unwrap()[(0, 0)];
    let d_out = DMatrix::from_element(1, 1, 2.0 * (f - y) * model.scale);
    let (_, _, dx) = model.backward(&acts, d_out);
    dx.row(0).iter().copied().collect()
}

/// Grade transition table for 3-level labels: row `a`, column `b` is the
/// probability that grade `a` becomes `b`.
pub fn transition_matrix(e: f64) -> Result<[[f64; 3]; 3]> {
    if !(0.0..=1.0).contains(&e) {
        return Err(Error::InvalidArgument(format!("retention probability {e} outside [0, 1]")));
    }
    let f = 1.0 - e;
    let t = [
        [e, 2.0 * f / 3.0, f / 3.0],
        [f / 2.0, e, f / 2.0],
        [f / 3.0, 2.0 * f / 3.0, e],
    ];
    for row in &t {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "transition row does not sum to 1");
    }
    Ok(t)
}

fn draw_grade(row: &[f64; 3], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    if u < row[0] {
        0
    } else if u < row[0] + row[1] {
        1
    } else {
        2
    }
}

/// Resamples every training label through [`transition_matrix`].
pub fn poison_labels(train: &[Query], e: f64, seed: u64) -> Result<Vec<Query>> {
    let table = transition_matrix(e)?;
    let mut out = train.to_vec();
    for (qi, q) in out.iter_mut().enumerate() {
        let mut rng = query_rng(seed, qi);
        for doc in &mut q.documents {
            if doc.label > 2 {
                return Err(Error::InvalidArgument(format!(
                    "query {}: grade {} outside {{0, 1, 2}}",
                    q.qid, doc.label
                )));
            }
            doc.label = draw_grade(&table[doc.label as usize], &mut rng);
        }
    }
    Ok(out)
}
