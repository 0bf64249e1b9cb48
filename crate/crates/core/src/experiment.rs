//! K-fold experiments: per-fold training, validation-based selection of the
//! Wasserstein radius, attack sweeps and report files.
//!
//! Fold `f` is the test part, fold `f + 1` (cyclically) the validation part
//! and every other fold the training part.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    add_constant_feature, generate_synthetic, load_fold_files, load_letor, normalize_features, split_folds, Query,
    RankingDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::gtd::{build_query_gtd, GtdParams};
use crate::metrics::{mean_sd, Metric, MetricsReport, QueryMetrics};
use crate::norms::NormOrder;
use crate::ranker::{fit_pointwise_linear, rank_from_gtd, rank_pointwise, scalar_training_set, Ranking};
use crate::robustness::{
    blackbox_fgsm_attack, gaussian_attack, poison_labels, train_linear_adversary,
    train_substitute_mlp, universal_fgsm_attack, AttackKind, AttackSpec, MlpConfig,
    SubstituteModel, DEFAULT_FRACTION, DEFAULT_SIGMA,
};
use crate::solver::{feature_matrix, fit, predict_gtd, ModelWeights, SolverConfig, TrainingSet};

/// Cutoff of the NDCG used for model selection.
pub const VALIDATION_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Robust multi-output regression with tuned ε.
    Drmrr,
    /// Same model with ε = 0.
    Erm,
    /// Least squares on raw grades.
    Pointwise,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Drmrr => "drmrr",
            ModelKind::Erm => "erm",
            ModelKind::Pointwise => "pointwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "drmrr" => Ok(ModelKind::Drmrr),
            "erm" => Ok(ModelKind::Erm),
            "pointwise" => Ok(ModelKind::Pointwise),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Single LETOR file; folds are assigned by a seeded shuffle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// One LETOR file per fold, in fold order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Per-query min-max scaling of features.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Append a constant feature after scaling.
    #[serde(default)]
    pub constant_feature: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub epsilon_grid: Vec<f64>,
    pub r: NormOrder,
    pub fit: SolverConfig,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            epsilon_grid: vec![0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            r: NormOrder::Two,
            fit: SolverConfig::default(),
        }
    }
}

/// Optional grids for GTD parameters. Empty grids keep the `[gtd]` value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub k_grid: Vec<usize>,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
}

impl TuningSection {
    pub fn candidates(&self, base: &GtdParams) -> Vec<GtdParams> {
        let ks = if self.k_grid.is_empty() { vec![base.k] } else { self.k_grid.clone() };
        let alphas = if self.alpha_grid.is_empty() { vec![base.alpha] } else { self.alpha_grid.clone() };
        let betas = if self.beta_grid.is_empty() { vec![base.beta] } else { self.beta_grid.clone() };
        let mut out = Vec::new();
        for &k in &ks {
            for &alpha in &alphas {
                for &beta in &betas {
                    out.push(GtdParams { k, alpha, beta, ..*base });
                }
            }
        }
        out
    }
}

/// One attack kind swept over `levels`. The level replaces `mu` for
/// Gaussian noise, `eta` for FGSM and `e` for label poisoning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSweep {
    pub kind: AttackKind,
    pub levels: Vec<f64>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_retention")]
    pub e: f64,
}

fn default_fraction() -> f64 {
    DEFAULT_FRACTION
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn default_retention() -> f64 {
    1.0
}

impl AttackSweep {
    pub fn spec(&self, level: f64, seed: u64) -> AttackSpec {
        let mut s = AttackSpec {
            kind: self.kind,
            fraction: self.fraction,
            mu: self.mu,
            sigma: self.sigma,
            eta: self.eta,
            e: self.e,
            seed,
        };
        match self.kind {
            AttackKind::Gaussian => s.mu = level,
            AttackKind::UniversalFgsm | AttackKind::BlackboxFgsm => s.eta = level,
            AttackKind::LabelPoison => s.e = level,
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_ks")]
    pub metric_ks: Vec<usize>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    pub data: DataConfig,
    #[serde(default)]
    pub gtd: GtdParams,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub tuning: TuningSection,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub attacks: Vec<AttackSweep>,
}

fn default_folds() -> usize {
    5
}

fn default_ks() -> Vec<usize> {
    vec![5, 10]
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Drmrr, ModelKind::Erm]
}

impl ExperimentConfig {
    /// A synthetic-data config with every other field at its default.
    pub fn synthetic(spec: SyntheticSpec, seed: u64) -> Self {
        Self {
            seed,
            folds: default_folds(),
            metric_ks: default_ks(),
            models: default_models(),
            data: DataConfig {
                path: None,
                fold_files: Vec::new(),
                synthetic: Some(spec),
                normalize: true,
                constant_feature: false,
            },
            gtd: GtdParams::default(),
            solver: SolverSection::default(),
            tuning: TuningSection::default(),
            mlp: MlpConfig::default(),
            attacks: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path`, resolves data paths against its directory and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        cfg.data.path = cfg.data.path.as_ref().map(resolve);
        cfg.data.fold_files = cfg.data.fold_files.iter().map(resolve).collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let sources = usize::from(self.data.path.is_some())
            + usize::from(!self.data.fold_files.is_empty())
            + usize::from(self.data.synthetic.is_some());
        if sources != 1 {
            return bad("data: set exactly one of path, fold_files, synthetic".into());
        }
        for p in self.data.path.iter().chain(&self.data.fold_files) {
            if !p.is_file() {
                return bad(format!("data file {} does not exist", p.display()));
            }
        }
        if self.folds < 2 {
            return bad("folds must be >= 2".into());
        }
        if !self.data.fold_files.is_empty() && self.data.fold_files.len() != self.folds {
            return bad(format!(
                "{} fold files given for {} folds",
                self.data.fold_files.len(),
                self.folds
            ));
        }
        if self.metric_ks.is_empty() || self.metric_ks.contains(&0) {
            return bad("metric_ks must be a nonempty list of positive cutoffs".into());
        }
        if self.models.is_empty() {
            return bad("models must not be empty".into());
        }
        let mut seen = self.models.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.models.len() {
            return bad("models lists a model twice".into());
        }
        if self.solver.epsilon_grid.is_empty() {
            return bad("solver.epsilon_grid must not be empty".into());
        }
        if self.solver.epsilon_grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return bad("solver.epsilon_grid values must be finite and >= 0".into());
        }
        self.solver.fit.validate()?;
        self.gtd.validate()?;
        for g in self.tuning.candidates(&self.gtd) {
            g.validate()?;
        }
        self.mlp.validate()?;
        for sweep in &self.attacks {
            if sweep.levels.is_empty() {
                return bad(format!("attack {}: levels must not be empty", sweep.kind));
            }
            for &level in &sweep.levels {
                sweep.spec(level, 0).validate()?;
            }
        }
        if let Some(spec) = &self.data.synthetic {
            if spec.y_max > self.gtd.y_max {
                return bad("synthetic y_max exceeds gtd.y_max".into());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// SplitMix64 finalizer chained over `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |h, &p| mix(h ^ p))
}

/// Loads the configured data, normalizes it and assigns folds.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<RankingDataset> {
    let data = &cfg.data;
    let mut ds = if let Some(spec) = &data.synthetic {
        generate_synthetic(spec, cfg.seed)?
    } else if let Some(path) = &data.path {
        load_letor(path)?
    } else {
        load_fold_files(&data.fold_files)?
    };
    if data.normalize {
        ds = normalize_features(&ds);
    }
    if data.constant_feature {
        ds = add_constant_feature(&ds);
    }
    if ds.y_max > cfg.gtd.y_max {
        return Err(Error::Config(format!(
            "data has grade {} above gtd.y_max = {}",
            ds.y_max, cfg.gtd.y_max
        )));
    }
    if data.fold_files.is_empty() {
        ds = split_folds(&ds, cfg.folds, cfg.seed)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<Query>,
    pub validation: Vec<Query>,
    pub test: Vec<Query>,
}

pub fn fold_split(ds: &RankingDataset, fold: usize, folds: usize) -> FoldSplit {
    let validation_fold = fold % folds + 1;
    let mut split = FoldSplit {
        fold,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for q in &ds.queries {
        match ds.fold_of(&q.qid) {
            Some(f) if f == fold => split.test.push(q.clone()),
            Some(f) if f == validation_fold => split.validation.push(q.clone()),
            Some(_) => split.train.push(q.clone()),
            None => {}
        }
    }
    split
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Gtd { weights: ModelWeights, gtd: GtdParams },
    Pointwise { w: DVector<f64> },
}

impl TrainedModel {
    pub fn rank(&self, query: &Query) -> Result<Ranking> {
        let x = feature_matrix(query);
        match self {
            TrainedModel::Gtd { weights, .. } => rank_from_gtd(&predict_gtd(weights, &x)?),
            TrainedModel::Pointwise { w } => rank_pointwise(w, &x),
        }
    }

    /// The scalar score a substitute network imitates: the first predicted
    /// GTD column, or the pointwise score.
    pub fn scalar_scores(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Gtd { weights, .. } => {
                Ok(predict_gtd(weights, x)?.column(0).iter().copied().collect())
            }
            TrainedModel::Pointwise { w } => {
                if x.ncols() != w.len() {
                    return Err(Error::DimensionMismatch {
                        expected: w.len(),
                        got: x.ncols(),
                    });
                }
                Ok((x * w).iter().copied().collect())
            }
        }
    }

    /// Ground-truth counterpart of [`Self::scalar_scores`] for one query.
    pub fn reference_scores(&self, query: &Query) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Gtd { gtd, .. } => {
                let g = build_query_gtd(query, gtd)?;
                Ok(g.values.column(0).iter().copied().collect())
            }
            TrainedModel::Pointwise { .. } => {
                Ok(query.documents.iter().map(|d| f64::from(d.label)).collect())
            }
        }
    }
}

pub fn query_metrics(
    model: &TrainedModel,
    query: &Query,
    ks: &[usize],
    log_base: f64,
) -> Result<(QueryMetrics, Ranking)> {
    let ranking = model.rank(query)?;
    let labels = ranking.ranked_labels(query);
    Ok((QueryMetrics::compute(&labels, ks, log_base), ranking))
}

/// Per-query metrics on `queries` plus the TREC run text.
pub fn evaluate(
    model: &TrainedModel,
    queries: &[Query],
    ks: &[usize],
    log_base: f64,
    fold: usize,
    tag: &str,
) -> Result<(MetricsReport, String)> {
    let mut per_query = BTreeMap::new();
    let mut run = String::new();
    for q in queries {
        let (m, ranking) = query_metrics(model, q, ks, log_base)?;
        run.push_str(&ranking.trec_lines(q, tag));
        per_query.insert(q.qid.clone(), m);
    }
    Ok((MetricsReport::from_queries(fold, per_query), run))
}

fn validation_ndcg(model: &TrainedModel, validation: &[Query], log_base: f64) -> Result<f64> {
    if validation.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for q in validation {
        let (m, _) = query_metrics(model, q, &[VALIDATION_K], log_base)?;
        sum += m.get(Metric::Ndcg, VALIDATION_K).unwrap_or(0.0);
    }
    Ok(sum / validation.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub epsilon: f64,
    pub gtd: GtdParams,
    pub validation_ndcg: f64,
    /// `(ε, validation NDCG@5)` for every grid point of the chosen GTD setting.
    pub grid_scores: Vec<(f64, f64)>,
}

/// Fits every `(gtd, ε)` candidate on `train` and keeps the one with the best
/// validation NDCG@5. Ties go to the smaller ε, then to the earlier GTD setting.
pub fn tune_model(
    train: &[Query],
    validation: &[Query],
    gtd_candidates: &[GtdParams],
    grid: &[f64],
    r: NormOrder,
    solver: &SolverConfig,
) -> Result<(TuningOutcome, ModelWeights)> {
    if grid.is_empty() || gtd_candidates.is_empty() {
        return Err(Error::Empty("tuning grid"));
    }
    let mut eps: Vec<f64> = grid.to_vec();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let jobs: Vec<(usize, f64)> = (0..gtd_candidates.len())
        .flat_map(|g| eps.iter().map(move |&e| (g, e)))
        .collect();
    let sets: Vec<TrainingSet> = gtd_candidates
        .iter()
        .map(|g| TrainingSet::from_queries(train, g))
        .collect::<Result<_>>()?;
    let fitted: Vec<(usize, f64, ModelWeights, f64)> = jobs
        .par_iter()
        .map(|&(g, e)| {
            let weights = fit(&sets[g], e, r, solver)?;
            let model = TrainedModel::Gtd {
                weights,
                gtd: gtd_candidates[g],
            };
            let score = validation_ndcg(&model, validation, gtd_candidates[g].log_base)?;
            let TrainedModel::Gtd { weights, .. } = model else { unreachable!() };
            Ok((g, e, weights, score))
        })
        .collect::<Result<_>>()?;
    let best = fitted
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            b.3.total_cmp(&a.3)
                .then(a.1.total_cmp(&b.1))
                .then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let (g, e, ref weights, score) = fitted[best];
    let grid_scores = fitted
        .iter()
        .filter(|f| f.0 == g)
        .map(|f| (f.1, f.3))
        .collect();
    Ok((
        TuningOutcome {
            epsilon: e,
            gtd: gtd_candidates[g],
            validation_ndcg: score,
            grid_scores,
        },
        weights.clone(),
    ))
}

/// Validation-selected ε for a fixed GTD setting.
pub fn tune_epsilon(
    train: &[Query],
    validation: &[Query],
    grid: &[f64],
    gtd: &GtdParams,
    r: NormOrder,
    solver: &SolverConfig,
) -> Result<f64> {
    tune_model(train, validation, &[*gtd], grid, r, solver).map(|(t, _)| t.epsilon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub kind: ModelKind,
    pub model: TrainedModel,
    pub tuning: Option<TuningOutcome>,
    pub train_ms: f64,
}

/// Trains every configured model on `train`, selecting hyperparameters on
/// `validation`.
pub fn train_models(
    cfg: &ExperimentConfig,
    train: &[Query],
    validation: &[Query],
    fold: usize,
) -> Result<Vec<FittedModel>> {
    if !train.iter().any(|q| !q.is_degenerate()) {
        return Err(Error::InvalidArgument(format!(
            "fold {fold}: no training query with a relevant document"
        )));
    }
    let candidates = cfg.tuning.candidates(&cfg.gtd);
    cfg.models
        .iter()
        .map(|&kind| {
            let start = Instant::now();
            let (model, tuning) = match kind {
                ModelKind::Drmrr | ModelKind::Erm => {
                    let grid: &[f64] = if kind == ModelKind::Erm { &[0.0] } else { &cfg.solver.epsilon_grid };
                    let (t, weights) =
                        tune_model(train, validation, &candidates, grid, cfg.solver.r, &cfg.solver.fit)?;
                    (TrainedModel::Gtd { weights, gtd: t.gtd }, Some(t))
                }
                ModelKind::Pointwise => {
                    let (x, y) = scalar_training_set(train)?;
                    (TrainedModel::Pointwise { w: fit_pointwise_linear(&x, &y)? }, None)
                }
            };
            Ok(FittedModel {
                kind,
                model,
                tuning,
                train_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub fold: usize,
    pub model: ModelKind,
    /// `None` for clean data.
    pub attack: Option<AttackKind>,
    pub level: f64,
    pub epsilon: Option<f64>,
    pub gtd: Option<GtdParams>,
    pub validation_ndcg: Option<f64>,
    pub metrics: MetricsReport,
    pub wall_clock_ms: f64,
}

impl RunRecord {
    pub fn attack_id(&self) -> &'static str {
        self.attack.map_or("clean", AttackKind::name)
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_clock_ms: 0.0,
            ..self.clone()
        } == Self {
            wall_clock_ms: 0.0,
            ..other.clone()
        }
    }

    fn order(&self, other: &Self) -> Ordering {
        self.attack
            .cmp(&other.attack)
            .then(self.level.total_cmp(&other.level))
            .then(self.model.cmp(&other.model))
            .then(self.fold.cmp(&other.fold))
    }
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(RunRecord::order);
}

/// Records plus TREC run texts keyed by file name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CvOutput {
    pub records: Vec<RunRecord>,
    pub runs: BTreeMap<String, String>,
}

/// Whether [`run_cv`] evaluates the configured attack sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweeps {
    CleanOnly,
    All,
}

pub fn run_cv(cfg: &ExperimentConfig, sweeps: Sweeps) -> Result<CvOutput> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    run_cv_on(cfg, &ds, sweeps)
}

/// [`run_cv`] on an already loaded dataset with folds assigned.
pub fn run_cv_on(cfg: &ExperimentConfig, ds: &RankingDataset, sweeps: Sweeps) -> Result<CvOutput> {
    let folds = ds.num_folds();
    if folds < 2 {
        return Err(Error::Config("dataset has no fold assignment".into()));
    }
    let hash = cfg.hash();
    let outputs: Vec<CvOutput> = (1..=folds)
        .into_par_iter()
        .map(|f| run_fold(cfg, &hash, ds, f, folds, sweeps))
        .collect::<Result<_>>()?;
    let mut out = CvOutput::default();
    for o in outputs {
        out.records.extend(o.records);
        out.runs.extend(o.runs);
    }
    sort_records(&mut out.records);
    Ok(out)
}

struct FoldContext<'a> {
    cfg: &'a ExperimentConfig,
    hash: &'a str,
    fold: usize,
}

impl FoldContext<'_> {
    fn record(
        &self,
        fitted: &FittedModel,
        attack: Option<&AttackSpec>,
        test: &[Query],
        extra_ms: f64,
    ) -> Result<(RunRecord, String)> {
        let start = Instant::now();
        let log_base = self.cfg.gtd.log_base;
        let (metrics, run) = evaluate(
            &fitted.model,
            test,
            &self.cfg.metric_ks,
            log_base,
            self.fold,
            fitted.kind.name(),
        )?;
        let t = fitted.tuning.as_ref();
        Ok((
            RunRecord {
                config_hash: self.hash.to_string(),
                fold: self.fold,
                model: fitted.kind,
                attack: attack.map(|a| a.kind),
                level: attack.map_or(0.0, AttackSpec::level),
                epsilon: t.map(|t| t.epsilon),
                gtd: t.map(|t| t.gtd),
                validation_ndcg: t.map(|t| t.validation_ndcg),
                metrics,
                wall_clock_ms: fitted.train_ms + extra_ms + start.elapsed().as_secs_f64() * 1e3,
            },
            run,
        ))
    }
}

fn run_fold(
    cfg: &ExperimentConfig,
    hash: &str,
    ds: &RankingDataset,
    fold: usize,
    folds: usize,
    sweeps: Sweeps,
) -> Result<CvOutput> {
    let split = fold_split(ds, fold, folds);
    let ctx = FoldContext { cfg, hash, fold };
    let clean = train_models(cfg, &split.train, &split.validation, fold)?;
    let mut out = CvOutput::default();
    for m in &clean {
        let (rec, run) = ctx.record(m, None, &split.test, 0.0)?;
        out.records.push(rec);
        out.runs.insert(format!("fold{fold}_{}.run", m.kind), run);
    }
    if sweeps == Sweeps::CleanOnly {
        return Ok(out);
    }

    let mut adversary: Option<DVector<f64>> = None;
    let mut substitutes: BTreeMap<ModelKind, SubstituteModel> = BTreeMap::new();
    for (ai, sweep) in cfg.attacks.iter().enumerate() {
        // One seed per (fold, sweep): the attacked query subset and the noise
        // stream are shared by every model and every level.
        let seed = derive_seed(cfg.seed, &[fold as u64, ai as u64]);
        for &level in &sweep.levels {
            let spec = sweep.spec(level, seed);
            match spec.kind {
                AttackKind::Gaussian => {
                    let test = gaussian_attack(&split.test, &spec)?;
                    for m in &clean {
                        out.records.push(ctx.record(m, Some(&spec), &test, 0.0)?.0);
                    }
                }
                AttackKind::UniversalFgsm => {
                    let start = Instant::now();
                    if adversary.is_none() {
                        adversary = Some(train_linear_adversary(&split.train)?);
                    }
                    let test = universal_fgsm_attack(&split.test, adversary.as_ref().unwrap(), &spec)?;
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    for m in &clean {
                        out.records.push(ctx.record(m, Some(&spec), &test, ms)?.0);
                    }
                }
                AttackKind::BlackboxFgsm => {
                    for m in &clean {
                        let start = Instant::now();
                        if !substitutes.contains_key(&m.kind) {
                            let (x, _) = scalar_training_set(&split.train)?;
                            let victim = m.model.scalar_scores(&x)?;
                            let mlp = MlpConfig {
                                seed: derive_seed(cfg.mlp.seed, &[fold as u64, m.kind as u64]),
                                ..cfg.mlp.clone()
                            };
                            substitutes.insert(m.kind, train_substitute_mlp(&x, &victim, &mlp)?);
                        }
                        let targets = split
                            .test
                            .iter()
                            .map(|q| m.model.reference_scores(q))
                            .collect::<Result<Vec<_>>>()?;
                        let test =
                            blackbox_fgsm_attack(&split.test, &substitutes[&m.kind], &targets, &spec)?;
                        let ms = start.elapsed().as_secs_f64() * 1e3;
                        out.records.push(ctx.record(m, Some(&spec), &test, ms)?.0);
                    }
                }
                AttackKind::LabelPoison => {
                    let train = poison_labels(&split.train, spec.e, spec.seed)?;
                    for m in train_models(cfg, &train, &split.validation, fold)? {
                        out.records.push(ctx.record(&m, Some(&spec), &split.test, 0.0)?.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    /// Mean over folds of the fold means.
    pub mean: f64,
    /// Sample standard deviation of the fold means.
    pub sd: f64,
    /// Mean over every test query of every fold.
    pub pooled: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub attack: Option<AttackKind>,
    pub level: f64,
    pub folds: usize,
    pub queries: usize,
    pub epsilons: Vec<f64>,
    pub cells: BTreeMap<(Metric, usize), SummaryCell>,
}

impl SummaryRow {
    pub fn attack_id(&self) -> &'static str {
        self.attack.map_or("clean", AttackKind::name)
    }

    pub fn mean(&self, metric: Metric, k: usize) -> Option<f64> {
        self.cells.get(&(metric, k)).map(|c| c.mean)
    }
}

/// One row per (attack, level, model), in record order.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut groups: Vec<Vec<&RunRecord>> = Vec::new();
    for r in &sorted {
        match groups.last_mut() {
            Some(g)
                if g[0].attack == r.attack
                    && g[0].level.total_cmp(&r.level).is_eq()
                    && g[0].model == r.model =>
            {
                g.push(r)
            }
            _ => groups.push(vec![r]),
        }
    }
    for g in groups {
        let mut cells = BTreeMap::new();
        let ks = g[0].metrics.ks();
        for metric in [Metric::Ndcg, Metric::Ap] {
            for &k in &ks {
                let fold_means: Vec<f64> = g.iter().filter_map(|r| r.metrics.mean(metric, k)).collect();
                let all: Vec<f64> = g
                    .iter()
                    .flat_map(|r| r.metrics.per_query.values())
                    .filter_map(|q| q.get(metric, k))
                    .collect();
                let (mean, sd) = mean_sd(&fold_means);
                let pooled = mean_sd(&all).0;
                cells.insert((metric, k), SummaryCell { mean, sd, pooled });
            }
        }
        rows.push(SummaryRow {
            model: g[0].model,
            attack: g[0].attack,
            level: g[0].level,
            folds: g.len(),
            queries: g.iter().map(|r| r.metrics.per_query.len()).sum(),
            epsilons: g.iter().filter_map(|r| r.epsilon).collect(),
            cells,
        });
    }
    rows
}

/// Header `model,attack,level,folds,queries,epsilon` followed by
/// `<metric>@<k>_{mean,sd,pooled}` for every cutoff.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let keys: Vec<(Metric, usize)> = rows
        .first()
        .map(|r| r.cells.keys().copied().collect())
        .unwrap_or_default();
    let mut header = vec![
        "model".to_string(),
        "attack".into(),
        "level".into(),
        "folds".into(),
        "queries".into(),
        "epsilon".into(),
    ];
    for (m, k) in &keys {
        for stat in ["mean", "sd", "pooled"] {
            header.push(format!("{m}@{k}_{stat}"));
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let eps: Vec<String> = r.epsilons.iter().map(f64::to_string).collect();
        let mut line = vec![
            r.model.to_string(),
            r.attack_id().to_string(),
            r.level.to_string(),
            r.folds.to_string(),
            r.queries.to_string(),
            eps.join(";"),
        ];
        for key in &keys {
            let c = r.cells.get(key).copied().unwrap_or(SummaryCell {
                mean: f64::NAN,
                sd: f64::NAN,
                pooled: f64::NAN,
            });
            line.extend([c.mean.to_string(), c.sd.to_string(), c.pooled.to_string()]);
        }
        w.write_record(&line)?;
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))?;
    Ok(())
}

pub fn records_to_json(records: &[RunRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn records_from_json(text: &str) -> Result<Vec<RunRecord>> {
    Ok(serde_json::from_str(text)?)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `records.json`, `summary.csv` and `runs/*.run` under `dir`.
pub fn emit_report(output: &CvOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let records = dir.join("records.json");
    write_file(&records, records_to_json(&output.records)?.as_bytes())?;
    written.push(records);

    let summary = dir.join("summary.csv");
    let mut buf = Vec::new();
    write_summary_csv(&summarize(&output.records), &mut buf)?;
    write_file(&summary, &buf)?;
    written.push(summary);

    if !output.runs.is_empty() {
        let runs = dir.join("runs");
        fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        for (name, text) in &output.runs {
            let path = runs.join(name);
            write_file(&path, text.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
