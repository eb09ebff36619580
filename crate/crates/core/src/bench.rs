//! Scaling benchmark for the graph operators and inspection of learned
//! diffusion weights.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaglError, Result};
use crate::graph_conv::{self, normalize_gated, GatedEmbedding};
use crate::model::Forecaster;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    /// Linear-time cosine aggregation.
    Eco,
    /// Materialized `D⁻¹·S·H`.
    Explicit,
    /// Dense softmax adjacency built from the embeddings, then applied.
    SoftmaxAdj,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Eco, Operator::Explicit, Operator::SoftmaxAdj];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Eco => "eco",
            Operator::Explicit => "explicit",
            Operator::SoftmaxAdj => "softmax_adj",
        }
    }

    /// Whether the operator materializes an `N × N` matrix.
    pub fn is_quadratic(self) -> bool {
        !matches!(self, Operator::Eco)
    }
}

impl std::str::FromStr for Operator {
    type Err = RaglError;

    fn from_str(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| RaglError::Config(format!("unknown operator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub operator: Operator,
    pub n: usize,
    pub d_node: usize,
    pub d: usize,
    pub reps: usize,
    pub threads: usize,
    pub median_seconds: f64,
    /// Against the explicit path, where it fits in memory.
    pub max_abs_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub d_node: usize,
    pub d: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Recorded with every result. Values above 1 need the `threading`
    /// feature and `MATMUL_NUM_THREADS` set before the first product.
    pub threads: usize,
    pub operators: Vec<Operator>,
    /// Largest `N·N·8` the quadratic arms may allocate.
    pub dense_cap_bytes: u64,
    /// Size at which both paths must agree before anything is timed.
    pub gate_n: usize,
    pub gate_tolerance: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_list: vec![1024, 2048, 4096, 8192],
            d_node: 64,
            d: 160,
            reps: 5,
            warmup: 2,
            seed: 0,
            threads: 1,
            operators: Operator::ALL.to_vec(),
            dense_cap_bytes: 2 << 30,
            gate_n: 512,
            gate_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Least-squares slope of `ln t` against `ln N`, per operator with at
    /// least two sizes.
    pub slopes: Vec<(Operator, f64)>,
    pub gate_deviation: f64,
    /// Arms skipped for exceeding the memory cap.
    pub skipped: Vec<(Operator, usize)>,
}

impl BenchReport {
    pub fn slope(&self, op: Operator) -> Option<f64> {
        self.slopes.iter().find(|(o, _)| *o == op).map(|(_, s)| *s)
    }

    pub fn records_for(&self, op: Operator) -> impl Iterator<Item = &BenchRecord> {
        self.records.iter().filter(move |r| r.operator == op)
    }
}

pub fn dense_fits(n: usize, cap: u64) -> bool {
    (n as u64).saturating_mul(n as u64).saturating_mul(8) <= cap
}

fn inputs(n: usize, d_node: usize, d: usize, seed: u64) -> (GatedEmbedding, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let raw = Tensor::uniform(&[n, d_node], 0.0, 1.0, &mut rng);
    let h = Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng);
    let e = Tensor::uniform(&[n, d_node], -0.5, 0.5, &mut rng);
    (normalize_gated(&raw), h, e)
}

fn run(op: Operator, e_hat: &GatedEmbedding, h: &Tensor, e_node: &Tensor) -> Result<Tensor> {
    match op {
        Operator::Eco => graph_conv::eco_aggregate(e_hat, h),
        Operator::Explicit => graph_conv::explicit_oracle(e_hat, h),
        Operator::SoftmaxAdj => graph_conv::dense_aggregate(&graph_conv::softmax_adjacency(e_node), h),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Max deviation between the linear and explicit paths on one random
/// instance of size `n`.
pub fn equivalence_gate(n: usize, d_node: usize, d: usize, seed: u64) -> Result<f64> {
    let (e_hat, h, _) = inputs(n, d_node, d, seed);
    let fast = graph_conv::eco_aggregate(&e_hat, &h)?;
    let slow = graph_conv::explicit_oracle(&e_hat, &h)?;
    Ok(fast.max_abs_diff(&slow))
}

pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 5 {
        return Err(RaglError::Config(format!("at least 5 repetitions required, got {}", cfg.reps)));
    }
    if cfg.threads == 0 || (cfg.threads > 1 && !cfg!(feature = "threading")) {
        return Err(RaglError::Config(format!(
            "{} threads requested; multithreaded products need the `threading` feature",
            cfg.threads
        )));
    }
    if let Some(&n) = cfg.n_list.iter().find(|&&n| n < 2) {
        return Err(RaglError::Config(format!("benchmark sizes must be at least 2, got {n}")));
    }
    let gate = equivalence_gate(cfg.gate_n, cfg.d_node, cfg.d, cfg.seed)?;
    if !(gate <= cfg.gate_tolerance) {
        return Err(RaglError::Precondition(format!(
            "linear and explicit paths disagree by {gate:e} at N = {}; refusing to time",
            cfg.gate_n
        )));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for &n in &cfg.n_list {
        let (e_hat, h, e_node) = inputs(n, cfg.d_node, cfg.d, cfg.seed);
        let dense_ok = dense_fits(n, cfg.dense_cap_bytes);
        let reference = if dense_ok {
            Some(graph_conv::explicit_oracle(&e_hat, &h)?)
        } else {
            None
        };
        for &op in &cfg.operators {
            if op.is_quadratic() && !dense_ok {
                log::warn!("skipping {} at N = {n}: dense matrix exceeds the memory cap", op.name());
                skipped.push((op, n));
                continue;
            }
            for _ in 0..cfg.warmup {
                run(op, &e_hat, &h, &e_node)?;
            }
            let mut times = Vec::with_capacity(cfg.reps);
            let mut last = None;
            for _ in 0..cfg.reps {
                let t = Instant::now();
                let out = run(op, &e_hat, &h, &e_node)?;
                times.push(t.elapsed().as_secs_f64());
                last = Some(out);
            }
            let dev = match (op, &reference) {
                (Operator::SoftmaxAdj, _) | (_, None) => None,
                (_, Some(r)) => Some(last.expect("reps > 0").max_abs_diff(r)),
            };
            records.push(BenchRecord {
                operator: op,
                n,
                d_node: cfg.d_node,
                d: cfg.d,
                reps: cfg.reps,
                threads: cfg.threads,
                median_seconds: median(times),
                max_abs_deviation: dev,
            });
        }
    }
    let mut slopes = Vec::new();
    for &op in &cfg.operators {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.operator == op)
            .map(|r| ((r.n as f64).ln(), r.median_seconds.ln()))
            .collect();
        if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            slopes.push((op, fit_slope(&x, &y)));
        }
    }
    Ok(BenchReport {
        records,
        slopes,
        gate_deviation: gate,
        skipped,
    })
}

pub fn format_bench(report: &BenchReport) -> String {
    let mut out = format!("equivalence gate: max |eco - explicit| = {:.3e}\n", report.gate_deviation);
    out.push_str(&format!(
        "{:<12}{:>7}{:>8}{:>6}{:>6}{:>9}{:>14}{:>14}\n",
        "operator", "N", "d_node", "d", "reps", "threads", "median_s", "max_dev"
    ));
    for r in &report.records {
        out.push_str(&format!(
            "{:<12}{:>7}{:>8}{:>6}{:>6}{:>9}{:>14.6e}{:>14}\n",
            r.operator.name(),
            r.n,
            r.d_node,
            r.d,
            r.reps,
            r.threads,
            r.median_seconds,
            r.max_abs_deviation.map_or("-".to_string(), |v| format!("{v:.3e}"))
        ));
    }
    for (op, n) in &report.skipped {
        out.push_str(&format!("skipped {} at N = {n} (memory cap)\n", op.name()));
    }
    for (op, s) in &report.slopes {
        out.push_str(&format!("slope {:<12} {s:.3}\n", op.name()));
    }
    out
}

/// Summed diffusion weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub layer: usize,
    pub summed: Tensor,
    /// `‖W̃ − I‖_F / ‖I‖_F`.
    pub identity_distance: f64,
}

pub fn identity_distance(w: &Tensor) -> Result<f64> {
    let d = w.rows();
    Ok(w.sub(&Tensor::identity(d))?.frobenius() / (d as f64).sqrt())
}

/// `W̃_g = Σ_z W_g^(z)` for every layer.
pub fn inspect_weights(model: &Forecaster) -> Result<Vec<LayerWeights>> {
    (0..model.cfg.layers)
        .map(|l| {
            let summed = model.params.diffusion(&model.cfg, l)?.summed();
            Ok(LayerWeights {
                layer: l,
                identity_distance: identity_distance(&summed)?,
                summed,
            })
        })
        .collect()
}

/// First line `rows cols`, then one line per row.
pub fn format_matrix(t: &Tensor) -> String {
    let mut out = format!("{} {}\n", t.rows(), t.cols());
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines.next().ok_or_else(|| RaglError::Parse("empty matrix text".into()))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| RaglError::Parse(format!("bad extent `{s}`"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(RaglError::Parse(format!("matrix header `{head}` needs rows and cols")));
    }
    let mut data = Vec::with_capacity(dims[0] * dims[1]);
    for line in lines {
        for tok in line.split_whitespace() {
            data.push(tok.parse().map_err(|_| RaglError::Parse(format!("bad value `{tok}`")))?);
        }
    }
    if data.len() != dims[0] * dims[1] {
        return Err(RaglError::Parse(format!(
            "{} values for a {}x{} matrix",
            data.len(),
            dims[0],
            dims[1]
        )));
    }
    Tensor::matrix(dims[0], dims[1], data)
}
