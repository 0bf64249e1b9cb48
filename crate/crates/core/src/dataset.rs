//! Ranking datasets in LETOR / SVMLight-with-qid format.
//!
//! A line looks like `<label> qid:<qid> <idx>:<val> ... # comment`. Feature
//! indices are 1-based and may be sparse; missing indices read as `0.0`.
//! A `docid = <id>` token inside the comment is used as the document id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub features: Vec<f64>,
    pub label: u32,
    pub doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub qid: String,
    pub documents: Vec<Document>,
}

impl Query {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.documents.iter().map(|d| d.label).collect()
    }

    /// True when no document carries a positive grade (ideal DCG is zero).
    pub fn is_degenerate(&self) -> bool {
        self.documents.iter().all(|d| d.label == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingDataset {
    pub queries: Vec<Query>,
    /// Feature dimension.
    pub p: usize,
    /// Largest relevance grade.
    pub y_max: u32,
    /// qid -> fold index in `1..=F`. Empty until folds are assigned.
    pub folds: BTreeMap<String, usize>,
}

impl RankingDataset {
    pub fn num_documents(&self) -> usize {
        self.queries.iter().map(Query::len).sum()
    }

    pub fn num_folds(&self) -> usize {
        self.folds.values().copied().max().unwrap_or(0)
    }

    pub fn fold_of(&self, qid: &str) -> Option<usize> {
        self.folds.get(qid).copied()
    }

    /// Queries assigned to `fold`, in dataset order.
    pub fn fold_queries(&self, fold: usize) -> Vec<Query> {
        self.queries
            .iter()
            .filter(|q| self.fold_of(&q.qid) == Some(fold))
            .cloned()
            .collect()
    }

    /// Builds a dataset from already-grouped queries, deriving `p` and `y_max`.
    pub fn from_queries(queries: Vec<Query>) -> Result<Self> {
        let p = queries
            .first()
            .and_then(|q| q.documents.first())
            .map(|d| d.features.len())
            .ok_or(Error::Empty("dataset has no documents"))?;
        for q in &queries {
            if q.is_empty() {
                return Err(Error::InvalidArgument(format!("query {} is empty", q.qid)));
            }
            for d in &q.documents {
                if d.features.len() != p {
                    return Err(Error::DimensionMismatch {
                        expected: p,
                        got: d.features.len(),
                    });
                }
            }
        }
        let y_max = queries
            .iter()
            .flat_map(|q| q.documents.iter().map(|d| d.label))
            .max()
            .unwrap_or(0);
        Ok(Self {
            queries,
            p,
            y_max,
            folds: BTreeMap::new(),
        })
    }
}

struct RawLine {
    label: u32,
    qid: String,
    features: Vec<(usize, f64)>,
    doc_id: Option<String>,
}

fn parse_line(line: &str, lineno: usize) -> Result<Option<RawLine>> {
    let err = |msg: String| Error::Parse { line: lineno, msg };
    let (body, comment) = match line.find('#') {
        Some(i) => (&line[..i], Some(&line[i + 1..])),
        None => (line, None),
    };
    let mut tokens = body.split_whitespace();
    let Some(label_tok) = tokens.next() else {
        return Ok(None);
    };
    let label: u32 = label_tok
        .parse()
        .map_err(|_| err(format!("label `{label_tok}` is not a non-negative integer")))?;
    let qid_tok = tokens
        .next()
        .ok_or_else(|| err("missing qid".to_string()))?;
    let qid = qid_tok
        .strip_prefix("qid:")
        .filter(|s| !s.is_empty())
        .ok_or_else(|| err(format!("expected `qid:<id>`, found `{qid_tok}`")))?
        .to_string();
    let mut features = Vec::new();
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| err(format!("malformed feature `{tok}`")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| err(format!("bad feature index in `{tok}`")))?;
        if idx == 0 {
            return Err(err("feature indices are 1-based".to_string()));
        }
        let val: f64 = val
            .parse()
            .map_err(|_| err(format!("bad feature value in `{tok}`")))?;
        if !val.is_finite() {
            return Err(err(format!("non-finite feature value in `{tok}`")));
        }
        features.push((idx, val));
    }
    let doc_id = comment.and_then(parse_doc_id);
    Ok(Some(RawLine {
        label,
        qid,
        features,
        doc_id,
    }))
}

fn parse_doc_id(comment: &str) -> Option<String> {
    let mut toks = comment.split_whitespace();
    while let Some(t) = toks.next() {
        if t == "docid" {
            if toks.next() == Some("=") {
                return toks.next().map(str::to_string);
            }
            return None;
        }
        if let Some(v) = t.strip_prefix("docid=") {
            return Some(v.to_string());
        }
    }
    None
}

/// Parses a LETOR stream. Documents are grouped by qid in order of first
/// appearance, keeping file order inside each query.
pub fn parse_letor<R: BufRead>(reader: R) -> Result<RankingDataset> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<RawLine>> = BTreeMap::new();
    let mut p = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let Some(raw) = parse_line(&line, lineno)? else {
            continue;
        };
        if let Some(&(idx, _)) = raw.features.iter().max_by_key(|(idx, _)| *idx) {
            p = p.max(idx);
        }
        if !groups.contains_key(&raw.qid) {
            order.push(raw.qid.clone());
        }
        groups.entry(raw.qid.clone()).or_default().push(raw);
    }
    if order.is_empty() {
        return Err(Error::Empty("no ranking lines in input"));
    }
    let queries = order
        .into_iter()
        .map(|qid| {
            let raws = groups.remove(&qid).unwrap_or_default();
            let documents = raws
                .into_iter()
                .enumerate()
                .map(|(j, raw)| {
                    let mut features = vec![0.0; p];
                    for (idx, val) in raw.features {
                        features[idx - 1] = val;
                    }
                    Document {
                        features,
                        label: raw.label,
                        doc_id: raw.doc_id.unwrap_or_else(|| format!("{qid}-{}", j + 1)),
                    }
                })
                .collect();
            Query { qid, documents }
        })
        .collect();
    RankingDataset::from_queries(queries)
}

pub fn parse_letor_str(text: &str) -> Result<RankingDataset> {
    parse_letor(text.as_bytes())
}

pub fn load_letor(path: &Path) -> Result<RankingDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_letor(std::io::BufReader::new(file))
}

/// Loads one file per fold: queries in the `i`-th file are assigned fold `i+1`.
pub fn load_fold_files(paths: &[impl AsRef<Path>]) -> Result<RankingDataset> {
    let mut queries = Vec::new();
    let mut folds = BTreeMap::new();
    for (i, path) in paths.iter().enumerate() {
        let part = load_letor(path.as_ref())?;
        for q in part.queries {
            if folds.insert(q.qid.clone(), i + 1).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "qid {} appears in more than one fold file",
                    q.qid
                )));
            }
            queries.push(q);
        }
    }
    let mut ds = RankingDataset::from_queries(queries)?;
    ds.folds = folds;
    Ok(ds)
}

/// Writes dense LETOR lines: label, qid, then every feature in ascending
/// index order, with the document id in a trailing comment.
pub fn write_letor(dataset: &RankingDataset) -> String {
    let mut out = String::new();
    for q in &dataset.queries {
        for d in &q.documents {
            let _ = write!(out, "{} qid:{}", d.label, q.qid);
            for (j, v) in d.features.iter().enumerate() {
                let _ = write!(out, " {}:{}", j + 1, v);
            }
            let _ = writeln!(out, " #docid = {}", d.doc_id);
        }
    }
    out
}

/// Appends a constant `1.0` feature to every document (an intercept for
/// linear scorers).
pub fn add_constant_feature(dataset: &RankingDataset) -> RankingDataset {
    let mut out = dataset.clone();
    for d in out.queries.iter_mut().flat_map(|q| q.documents.iter_mut()) {
        d.features.push(1.0);
    }
    out.p += 1;
    out
}

/// Per-query min-max scaling of every feature column to `[0, 1]`.
/// Columns that are constant within a query become `0.0`.
pub fn normalize_features(dataset: &RankingDataset) -> RankingDataset {
    let mut out = dataset.clone();
    for q in &mut out.queries {
        for j in 0..dataset.p {
            let (lo, hi) = q
                .documents
                .iter()
                .map(|d| d.features[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            let span = hi - lo;
            for d in &mut q.documents {
                d.features[j] = if span > 0.0 {
                    ((d.features[j] - lo) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
    }
    out
}

/// Assigns queries to `folds` balanced folds from a seeded shuffle.
pub fn split_folds(dataset: &RankingDataset, folds: usize, seed: u64) -> Result<RankingDataset> {
    let t = dataset.queries.len();
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if folds > t {
        return Err(Error::InvalidArgument(format!(
            "{folds} folds requested for {t} queries"
        )));
    }
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = dataset.clone();
    out.folds = idx
        .into_iter()
        .enumerate()
        .map(|(slot, qi)| (dataset.queries[qi].qid.clone(), slot % folds + 1))
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub p: usize,
    pub y_max: u32,
    pub noise_scale: f64,
}

/// Synthetic graded-relevance data: uniform features, a hidden linear scorer
/// plus Gaussian noise, and labels from equal-mass quantile bins of the
/// noisy latent score over the whole dataset.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<RankingDataset> {
    let SyntheticSpec {
        n_queries,
        docs_per_query,
        p,
        y_max,
        noise_scale,
    } = *spec;
    if n_queries == 0 || docs_per_query == 0 || p == 0 {
        return Err(Error::InvalidArgument(
            "synthetic counts must be positive".into(),
        ));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidArgument("noise_scale must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let hidden: Vec<f64> = (0..p).map(|_| std_normal.sample(&mut rng)).collect();

    let mut features = Vec::with_capacity(n_queries * docs_per_query);
    let mut latent = Vec::with_capacity(n_queries * docs_per_query);
    for _ in 0..n_queries * docs_per_query {
        let x: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
        let noise = std_normal.sample(&mut rng);
        let s: f64 = x.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + noise_scale * noise;
        features.push(x);
        latent.push(s);
    }

    let mut sorted = latent.clone();
    sorted.sort_by(f64::total_cmp);
    let bins = y_max as usize + 1;
    let cuts: Vec<f64> = (1..bins)
        .map(|b| sorted[(b * sorted.len() / bins).min(sorted.len() - 1)])
        .collect();

    let mut queries = Vec::with_capacity(n_queries);
    let mut it = features.into_iter().zip(latent);
    for q in 0..n_queries {
        let qid = format!("{}", q + 1);
        let documents = (0..docs_per_query)
            .map(|j| {
                let (x, s) = it.next().expect("generated count");
                let label = cuts.iter().filter(|&&c| s >= c).count() as u32;
                Document {
                    features: x,
                    label,
                    doc_id: format!("{qid}-{}", j + 1),
                }
            })
            .collect();
        queries.push(Query { qid, documents });
    }
    let mut ds = RankingDataset::from_queries(queries)?;
    ds.y_max = y_max;
    Ok(ds)
}
