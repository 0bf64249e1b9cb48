#![allow(dead_code)]

use nalgebra::DMatrix;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct OracleInstance {
    pub p: usize,
    pub k: usize,
    pub n: usize,
    pub epsilon: f64,
    pub x: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub optimum: f64,
    pub b_opt: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct OracleFile {
    instances: Vec<OracleInstance>,
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

/// Optima frozen from an external conic solver (see fixtures/solver_oracle.py).
pub fn oracle_instances() -> Vec<OracleInstance> {
    let text = include_str!("../fixtures/solver_oracle.json");
    serde_json::from_str::<OracleFile>(text)
        .expect("fixture parses")
        .instances
}
