//! Adaptive graph convolution over a cosine-similarity graph.
//!
//! Node embeddings are gated into a non-negative matrix `Ê` with unit-norm
//! rows. The implied adjacency is `A = D⁻¹·Ê·Êᵀ` with `D = diag(Ê·Êᵀ·1)`.
//! Because the similarity factorizes, `A·H` is evaluated right to left as
//! `D⁻¹·(Ê·(Êᵀ·H))` and the `N×N` matrix is never formed. Cost per
//! application is `O(N·d·d_node)`.
//!
//! [`explicit_oracle`] materializes the quadratic form and exists for tests
//! and the benchmark's quadratic arm.
//!
//! Batched kernels accept `H` as `B` stacked `N`-row blocks (`(B·N) × d`);
//! every block is aggregated with the same graph.

use std::sync::Arc;

use crate::error::{dim_err, RaglError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, gemm, gemm_into, Tensor, Trans};

/// Lower clamp on node degree before inversion.
pub const DEGREE_EPS: f64 = 1e-8;
/// Row-norm guard used when normalizing gated embeddings.
pub const NORM_EPS: f64 = 1e-12;

/// Non-negative node embeddings with unit-norm (or zero) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedEmbedding {
    e_hat: Tensor,
}

impl GatedEmbedding {
    /// Wrap a matrix that already satisfies the invariants.
    pub fn from_normalized(e_hat: Tensor) -> Result<Self> {
        if e_hat.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(RaglError::Precondition(
                "gated embedding entries must be finite and non-negative".into(),
            ));
        }
        for i in 0..e_hat.rows() {
            let n = e_hat.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n != 0.0 && (n - 1.0).abs() > 1e-12 {
                return Err(RaglError::Precondition(format!(
                    "row {i} of gated embedding has norm {n}"
                )));
            }
        }
        Ok(Self { e_hat })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.e_hat
    }

    pub fn n_nodes(&self) -> usize {
        self.e_hat.rows()
    }

    pub fn dim(&self) -> usize {
        self.e_hat.cols()
    }

    /// `S = Ê·Êᵀ`. Quadratic; tests and small graphs only.
    pub fn similarity(&self) -> Tensor {
        gemm(&self.e_hat, Trans::No, &self.e_hat, Trans::Yes).expect("square product")
    }
}

/// Per-step weights `W_g^(z)`, `z = 0..=Z`. Step 0 multiplies the identity
/// term.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionWeights {
    pub steps: Vec<Tensor>,
}

impl DiffusionWeights {
    pub fn new(steps: Vec<Tensor>) -> Result<Self> {
        if steps.is_empty() {
            return Err(RaglError::Config(
                "diffusion needs at least the step-0 weight".into(),
            ));
        }
        let shape = steps[0].shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(dim_err("DiffusionWeights", format!("step 0 shape {shape:?}")));
        }
        if let Some(bad) = steps.iter().find(|w| w.shape() != shape.as_slice()) {
            return Err(dim_err(
                "DiffusionWeights",
                format!("{:?} vs {:?}", bad.shape(), shape),
            ));
        }
        Ok(Self { steps })
    }

    /// Highest diffusion power `Z`.
    pub fn order(&self) -> usize {
        self.steps.len() - 1
    }

    /// `Σ_z W_g^(z)`.
    pub fn summed(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.steps[0].shape());
        for w in &self.steps {
            acc.add_assign(w);
        }
        acc
    }
}

/// `softmax_rows(E·W₁) ⊙ relu(E·W₂)`; softmax runs over the feature axis of
/// each node.
pub fn gate_embeddings(e_node: &Tensor, w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let e = tape.constant(e_node.clone());
    let w1 = tape.constant(w1.clone());
    let w2 = tape.constant(w2.clone());
    let out = gate_on_tape(&mut tape, e, w1, w2)?;
    Ok(tape.value(out).clone())
}

pub fn gate_on_tape(tape: &mut Tape, e_node: Var, w1: Var, w2: Var) -> Result<Var> {
    let n = tape.value(e_node).cols();
    for (name, w) in [("w1", w1), ("w2", w2)] {
        if tape.value(w).shape() != [n, n] {
            return Err(dim_err(
                "gate_embeddings",
                format!("{name} is {:?}, expected [{n}, {n}]", tape.value(w).shape()),
            ));
        }
    }
    let logits = tape.matmul(e_node, w1)?;
    let soft = tape.softmax_rows(logits);
    let pre = tape.matmul(e_node, w2)?;
    let act = tape.relu(pre);
    tape.mul(soft, act)
}

pub fn normalize_gated(e_g: &Tensor) -> GatedEmbedding {
    GatedEmbedding {
        e_hat: tensor::l2_normalize_rows(e_g, NORM_EPS),
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EcoCache {
    /// Unclamped degree per node.
    deg: Vec<f64>,
    /// `Êᵀ·1`.
    col: Vec<f64>,
    /// `Êᵀ·H_b` for every block, `k×d` each.
    proj: Vec<f64>,
    eps: f64,
}

fn block_count(n: usize, h: &Tensor, op: &'static str) -> Result<usize> {
    if n == 0 || h.rows() % n != 0 {
        return Err(dim_err(
            op,
            format!("{} feature rows is not a multiple of {} nodes", h.rows(), n),
        ));
    }
    Ok(h.rows() / n)
}

/// Degree vector `Ê·(Êᵀ·1)` and the column sum `Êᵀ·1`, both in `O(N·k)`.
pub fn eco_degrees(e_hat: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let k = e_hat.cols();
    let mut col = vec![0.0; k];
    for i in 0..e_hat.rows() {
        for (c, v) in col.iter_mut().zip(e_hat.row(i)) {
            *c += v;
        }
    }
    let deg = (0..e_hat.rows())
        .map(|i| e_hat.row(i).iter().zip(&col).map(|(a, b)| a * b).sum())
        .collect();
    (deg, col)
}

/// `(B·N) × d` block layout to node-major `N × (B·d)`.
fn to_node_major(h: &[f64], n: usize, blocks: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    for b in 0..blocks {
        for i in 0..n {
            let src = &h[(b * n + i) * d..(b * n + i + 1) * d];
            out[i * blocks * d + b * d..i * blocks * d + (b + 1) * d].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`to_node_major`], scaling node `i`'s values by `row_scale[i]`.
fn from_node_major(x: &[f64], n: usize, blocks: usize, d: usize, row_scale: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        let s = row_scale[i];
        for b in 0..blocks {
            let src = &x[i * blocks * d + b * d..i * blocks * d + (b + 1) * d];
            for (o, v) in out[(b * n + i) * d..(b * n + i + 1) * d].iter_mut().zip(src) {
                *o = v * s;
            }
        }
    }
    out
}

pub(crate) fn eco_forward(e_hat: &Tensor, h: &Tensor, eps: f64) -> Result<(Tensor, EcoCache)> {
    let n = e_hat.rows();
    let k = e_hat.cols();
    let d = h.cols();
    let blocks = block_count(n, h, "eco_aggregate")?;
    let (deg, col) = eco_degrees(e_hat);
    let w = blocks * d;
    let hn = to_node_major(h.data(), n, blocks, d);
    let mut proj = vec![0.0; k * w];
    gemm_into(k, n, w, e_hat.data(), Trans::Yes, &hn, Trans::No, &mut proj, false);
    let mut num = hn;
    gemm_into(n, k, w, e_hat.data(), Trans::No, &proj, Trans::No, &mut num, false);
    let inv: Vec<f64> = deg.iter().map(|&v| 1.0 / v.max(eps)).collect();
    let out = from_node_major(&num, n, blocks, d, &inv);
    Ok((
        Tensor::new(h.shape().to_vec(), out)?,
        EcoCache {
            deg,
            col,
            proj,
            eps,
        },
    ))
}

#[allow(clippy::type_complexity)]
pub(crate) fn eco_backward(
    e_hat: &Tensor,
    h: &Tensor,
    out: &Tensor,
    cache: &EcoCache,
    g: &Tensor,
    want_e: bool,
    want_h: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let n = e_hat.rows();
    let k = e_hat.cols();
    let d = h.cols();
    let blocks = h.rows() / n;
    let w = blocks * d;
    let inv: Vec<f64> = cache.deg.iter().map(|&v| 1.0 / v.max(cache.eps)).collect();
    // num = Ê·P, out = D⁻¹·num
    let mut gnum = to_node_major(g.data(), n, blocks, d);
    for (i, row) in gnum.chunks_mut(w.max(1)).enumerate().take(n) {
        row.iter_mut().for_each(|v| *v *= inv[i]);
    }
    let mut gdeg = vec![0.0; n];
    if want_e {
        for b in 0..blocks {
            for i in 0..n {
                if cache.deg[i] > cache.eps {
                    let r = (b * n + i) * d..(b * n + i + 1) * d;
                    let dot: f64 = g.data()[r.clone()].iter().zip(&out.data()[r]).map(|(a, b)| a * b).sum();
                    gdeg[i] -= dot * inv[i];
                }
            }
        }
    }
    let mut gproj = vec![0.0; k * w];
    gemm_into(k, n, w, e_hat.data(), Trans::Yes, &gnum, Trans::No, &mut gproj, false);
    let gh = if want_h {
        // P = Êᵀ·H
        let mut ghn = vec![0.0; n * w];
        gemm_into(n, k, w, e_hat.data(), Trans::No, &gproj, Trans::No, &mut ghn, false);
        Some(Tensor::new(h.shape().to_vec(), from_node_major(&ghn, n, blocks, d, &vec![1.0; n]))?)
    } else {
        None
    };
    let ge = if want_e {
        let mut ge = vec![0.0; n * k];
        gemm_into(n, w, k, &gnum, Trans::No, &cache.proj, Trans::Yes, &mut ge, false);
        let hn = to_node_major(h.data(), n, blocks, d);
        gemm_into(n, w, k, &hn, Trans::No, &gproj, Trans::Yes, &mut ge, true);
        // deg_i = Ê_i·col with col = Σ_j Ê_j
        let mut gcol = vec![0.0; k];
        for i in 0..n {
            let row = &mut ge[i * k..(i + 1) * k];
            for (c, (r, &cv)) in row.iter_mut().zip(&cache.col).enumerate() {
                *r += gdeg[i] * cv;
                gcol[c] += gdeg[i] * e_hat.data()[i * k + c];
            }
        }
        for row in ge.chunks_mut(k.max(1)) {
            for (r, gc) in row.iter_mut().zip(&gcol) {
                *r += gc;
            }
        }
        Some(Tensor::new(e_hat.shape().to_vec(), ge)?)
    } else {
        None
    };
    Ok((ge, gh))
}

/// `D⁻¹·(Ê·(Êᵀ·H))` without materializing any `N×N` matrix.
pub fn eco_aggregate(e_hat: &GatedEmbedding, h: &Tensor) -> Result<Tensor> {
    if h.rows() != e_hat.n_nodes() {
        return Err(dim_err(
            "eco_aggregate",
            format!("{} feature rows for {} nodes", h.rows(), e_hat.n_nodes()),
        ));
    }
    Ok(eco_forward(&e_hat.e_hat, h, DEGREE_EPS)?.0)
}

/// `D⁻¹·S·H` with `S` built explicitly. Same degree clamp as the linear path.
pub fn explicit_oracle(e_hat: &GatedEmbedding, h: &Tensor) -> Result<Tensor> {
    if h.rows() != e_hat.n_nodes() {
        return Err(dim_err(
            "explicit_oracle",
            format!("{} feature rows for {} nodes", h.rows(), e_hat.n_nodes()),
        ));
    }
    explicit_adjacency(e_hat).and_then(|a| tensor::matmul(&a, h))
}

/// The row-normalized similarity `D⁻¹·S` as a dense matrix.
pub fn explicit_adjacency(e_hat: &GatedEmbedding) -> Result<Tensor> {
    let mut s = e_hat.similarity();
    let n = s.rows();
    for i in 0..n {
        let row = s.row_mut(i);
        let deg: f64 = row.iter().sum();
        let inv = 1.0 / deg.max(DEGREE_EPS);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(s)
}

/// `softmax_rows(relu(E·Eᵀ))`, the quadratic adjacency used by the
/// softmax ablation.
pub fn softmax_adjacency(e_node: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let e = tape.constant(e_node.clone());
    let a = softmax_adjacency_on_tape(&mut tape, e).expect("square gram");
    tape.value(a).clone()
}

pub fn softmax_adjacency_on_tape(tape: &mut Tape, e_node: Var) -> Result<Var> {
    let et = tape.transpose(e_node);
    let gram = tape.matmul(e_node, et)?;
    let act = tape.relu(gram);
    Ok(tape.softmax_rows(act))
}

/// `A·H_b` for each `N`-row block.
pub fn dense_aggregate(adj: &Tensor, h: &Tensor) -> Result<Tensor> {
    let n = adj.rows();
    if adj.cols() != n {
        return Err(dim_err("dense_aggregate", format!("adjacency {:?}", adj.shape())));
    }
    let blocks = block_count(n, h, "dense_aggregate")?;
    let d = h.cols();
    let mut out = vec![0.0; h.len()];
    for b in 0..blocks {
        let r = b * n * d..(b + 1) * n * d;
        gemm_into(n, n, d, adj.data(), Trans::No, &h.data()[r.clone()], Trans::No, &mut out[r], false);
    }
    Tensor::new(h.shape().to_vec(), out)
}

/// Fixed sparse adjacency in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseAdjacency {
    /// Build from `(row, col, weight)` triplets; entries per row must already
    /// be sorted by column and unique.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(dim_err("SparseAdjacency", format!("{} rows for {n} nodes", rows.len())));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (j, w) in row {
                if j >= n {
                    return Err(RaglError::Index {
                        what: "sparse adjacency column",
                        index: j,
                        size: n,
                    });
                }
                col_idx.push(j);
                values.push(w);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                t.set(i, j, w);
            }
        }
        t
    }

    pub fn aggregate(&self, h: &Tensor) -> Result<Tensor> {
        self.apply(h, false)
    }

    pub fn aggregate_transposed(&self, h: &Tensor) -> Result<Tensor> {
        self.apply(h, true)
    }

    fn apply(&self, h: &Tensor, transposed: bool) -> Result<Tensor> {
        let n = self.n;
        let blocks = block_count(n, h, "sparse_aggregate")?;
        let d = h.cols();
        let mut out = vec![0.0; h.len()];
        for b in 0..blocks {
            let base = b * n * d;
            for i in 0..n {
                for (j, w) in self.row(i) {
                    let (dst, src) = if transposed { (j, i) } else { (i, j) };
                    for c in 0..d {
                        out[base + dst * d + c] += w * h.data()[base + src * d + c];
                    }
                }
            }
        }
        Tensor::new(h.shape().to_vec(), out)
    }
}

/// The neighborhood operator a diffusion layer applies repeatedly.
#[derive(Clone)]
pub enum Aggregator {
    /// Cosine graph from a gated embedding recorded on the tape.
    Eco { e_hat: Var },
    /// Dense learnable adjacency (softmax ablation).
    Dense { adj: Var },
    /// Fixed geographic adjacency.
    Sparse(Arc<SparseAdjacency>),
}

impl Aggregator {
    pub fn apply(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        match self {
            Aggregator::Eco { e_hat } => tape.eco_aggregate(*e_hat, h, DEGREE_EPS),
            Aggregator::Dense { adj } => tape.dense_aggregate(*adj, h),
            Aggregator::Sparse(a) => tape.sparse_aggregate(a.clone(), h),
        }
    }
}

/// `Σ_z A^z·H·W^(z)`, with `A^z·H` obtained by `z` repeated aggregations.
pub fn diffusion_on_tape(
    tape: &mut Tape,
    agg: &Aggregator,
    h: Var,
    weights: &[Var],
) -> Result<Var> {
    if weights.is_empty() {
        return Err(RaglError::Config("diffusion weight list is empty".into()));
    }
    let mut power = h;
    let mut acc = tape.matmul(h, weights[0])?;
    for &w in &weights[1..] {
        power = agg.apply(tape, power)?;
        let term = tape.matmul(power, w)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

pub fn diffusion_convolve(
    e_hat: &GatedEmbedding,
    h: &Tensor,
    weights: &DiffusionWeights,
) -> Result<Tensor> {
    if h.rows() != e_hat.n_nodes() {
        return Err(dim_err(
            "diffusion_convolve",
            format!("{} feature rows for {} nodes", h.rows(), e_hat.n_nodes()),
        ));
    }
    let mut tape = Tape::new();
    let e = tape.constant(e_hat.e_hat.clone());
    let hv = tape.constant(h.clone());
    let ws: Vec<Var> = weights.steps.iter().map(|w| tape.constant(w.clone())).collect();
    let out = diffusion_on_tape(&mut tape, &Aggregator::Eco { e_hat: e }, hv, &ws)?;
    Ok(tape.value(out).clone())
}
