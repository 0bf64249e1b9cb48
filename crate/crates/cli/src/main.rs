use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use drmrr::dataset::{generate_synthetic, write_letor, RankingDataset, SyntheticSpec};
use drmrr::experiment::{
    emit_report, load_dataset, records_from_json, run_cv, summarize, write_summary_csv, AttackSweep,
    ExperimentConfig, ModelKind, Sweeps,
};
use drmrr::robustness::{
    gaussian_attack, poison_labels, train_linear_adversary, universal_fgsm_attack, AttackKind,
    AttackSpec, DEFAULT_FRACTION, DEFAULT_SIGMA,
};
use drmrr::NormOrder;

#[derive(Parser)]
#[command(name = "drmrr", version, about = "Robust multi-output regression ranking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a config, load its data and print a summary.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Clean k-fold run: records.json, summary.csv and TREC runs under --out.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Clean run plus every configured attack sweep.
    AttackSweep {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the configured sweeps with a single sweep of this kind.
        #[arg(long, value_parser = parse_kind, requires = "levels")]
        kind: Option<AttackKind>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Rebuild summary.csv from a records.json file.
    Report {
        records: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in LETOR format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long, default_value_t = 20)]
        docs: usize,
        #[arg(long, default_value_t = 20)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        y_max: u32,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Apply one attack to the whole configured dataset and write it as LETOR.
    Perturb {
        config: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: AttackKind,
        /// mu for gaussian, eta for universal_fgsm, e for label_poison.
        #[arg(long)]
        level: f64,
        #[arg(long, default_value_t = DEFAULT_FRACTION)]
        fraction: f64,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Command-line values that replace config fields.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    epsilon_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_model)]
    models: Option<Vec<ModelKind>>,
    #[arg(long, value_parser = parse_norm)]
    r: Option<NormOrder>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = &self.epsilon_grid {
            cfg.solver.epsilon_grid = v.clone();
        }
        if let Some(v) = &self.ks {
            cfg.metric_ks = v.clone();
        }
        if let Some(v) = &self.models {
            cfg.models = v.clone();
        }
        if let Some(v) = self.r {
            cfg.solver.r = v;
        }
        if let Some(v) = self.max_iters {
            cfg.solver.fit.max_iters = v;
        }
    }
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    AttackKind::parse(s).map_err(|e| e.to_string())
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).map_err(|e| e.to_string())
}

fn parse_norm(s: &str) -> Result<NormOrder, String> {
    NormOrder::parse(s).map_err(|e| e.to_string())
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn describe(cfg: &ExperimentConfig, ds: &RankingDataset) {
    println!("config hash  {}", cfg.hash());
    println!("queries      {}", ds.queries.len());
    println!("documents    {}", ds.num_documents());
    println!("features     {}", ds.p);
    println!("max grade    {}", ds.y_max);
    println!("folds        {}", ds.num_folds());
    let models: Vec<&str> = cfg.models.iter().map(|m| m.name()).collect();
    println!("models       {}", models.join(", "));
    println!("epsilon grid {:?}", cfg.solver.epsilon_grid);
    for a in &cfg.attacks {
        println!("attack       {} levels {:?}", a.kind, a.levels);
    }
}

fn finish(out: &Path, written: Vec<PathBuf>) {
    let runs = written.iter().filter(|p| p.extension().is_some_and(|e| e == "run")).count();
    println!("wrote {} files under {} ({runs} run files)", written.len(), out.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let ds = load_dataset(&cfg)?;
            describe(&cfg, &ds);
            println!("ok");
        }
        Command::Run {
            config,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let output = run_cv(&cfg, Sweeps::CleanOnly)?;
            finish(&out, emit_report(&output, &out)?);
        }
        Command::AttackSweep {
            config,
            out,
            kind,
            levels,
            overrides,
        } => {
            let mut cfg = load_config(&config, &overrides)?;
            if let (Some(kind), Some(levels)) = (kind, levels) {
                let base = cfg.attacks.iter().find(|a| a.kind == kind).cloned();
                cfg.attacks = vec![AttackSweep {
                    levels,
                    ..base.unwrap_or(AttackSweep {
                        kind,
                        levels: Vec::new(),
                        fraction: DEFAULT_FRACTION,
                        mu: 0.0,
                        sigma: DEFAULT_SIGMA,
                        eta: 0.0,
                        e: 1.0,
                    })
                }];
                cfg.validate()?;
            }
            if cfg.attacks.is_empty() {
                bail!("no attack sweeps configured; add [[attacks]] or pass --kind and --levels");
            }
            let output = run_cv(&cfg, Sweeps::All)?;
            finish(&out, emit_report(&output, &out)?);
        }
        Command::Report { records, out } => {
            let text = fs::read_to_string(&records)
                .with_context(|| format!("reading {}", records.display()))?;
            let rows = summarize(&records_from_json(&text)?);
            match out {
                Some(path) => {
                    let file = fs::File::create(&path)
                        .with_context(|| format!("creating {}", path.display()))?;
                    write_summary_csv(&rows, file)?;
                }
                None => write_summary_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Synth {
            out,
            queries,
            docs,
            features,
            y_max,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_queries: queries,
                docs_per_query: docs,
                p: features,
                y_max,
                noise_scale: noise,
            };
            let ds = generate_synthetic(&spec, seed)?;
            fs::write(&out, write_letor(&ds)).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Perturb {
            config,
            kind,
            level,
            fraction,
            sigma,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let mut ds = load_dataset(&cfg)?;
            let mut spec = AttackSpec::new(kind);
            spec.fraction = fraction;
            spec.sigma = sigma;
            spec.seed = cfg.seed;
            ds.queries = match kind {
                AttackKind::Gaussian => {
                    spec.mu = level;
                    gaussian_attack(&ds.queries, &spec)?
                }
                AttackKind::UniversalFgsm => {
                    spec.eta = level;
                    let w = train_linear_adversary(&ds.queries)?;
                    universal_fgsm_attack(&ds.queries, &w, &spec)?
                }
                AttackKind::LabelPoison => poison_labels(&ds.queries, level, cfg.seed)?,
                AttackKind::BlackboxFgsm => {
                    bail!("blackbox_fgsm needs a trained victim; use attack-sweep")
                }
            };
            fs::write(&out, write_letor(&ds)).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}
