//! Distributionally robust multi-output regression ranking (DRMRR).
//!
//! Documents are mapped to K-dimensional Ground Truth Deviation targets
//! ([`gtd`]), a linear map `x ↦ B'x` is fitted under a Wasserstein-robust
//! objective ([`solver`]), and test queries are ordered by cycling through
//! the predicted importance columns ([`ranker`]). [`robustness`] and
//! [`experiment`] cover noise and adversarial stress tests and k-fold runs.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gtd;
pub mod metrics;
pub mod norms;
pub mod ranker;
pub mod robustness;
pub mod solver;

pub use dataset::{Document, Query, RankingDataset};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, ModelKind, RunRecord};
pub use gtd::{GtdMatrix, GtdParams};
pub use metrics::{Metric, MetricsReport};
pub use norms::NormOrder;
pub use ranker::{Ranking, RankingSource};
pub use robustness::{AttackKind, AttackSpec, MlpConfig, SubstituteModel};
pub use solver::{ModelWeights, SolverConfig, TrainingSet};
