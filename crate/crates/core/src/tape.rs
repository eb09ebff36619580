//! Reverse-mode differentiation over matrix primitives.
//!
//! A [`Tape`] records every primitive application in evaluation order. Leaves
//! are either named parameters or constants. [`Tape::backward`] walks the
//! record in reverse, accumulating adjoints, and returns one gradient per
//! named parameter (zero for parameters the loss does not reach).
//!
//! The op set is closed and small: exactly what the forecaster needs. Fused
//! graph operators (the cosine aggregation, dense and sparse adjacency
//! products) carry hand-derived adjoints that are checked against finite
//! differences in the tests.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, RaglError, Result};
use crate::graph_conv::{self, EcoCache, SparseAdjacency};
use crate::tensor::{self, gemm, gemm_into, Tensor, Trans};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Param(String),
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    L2NormalizeRows { x: Var, eps: f64 },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    GatherRows { src: Var, idx: Vec<usize> },
    Eco { e_hat: Var, h: Var, cache: EcoCache },
    DenseAggregate { adj: Var, h: Var },
    SparseAggregate { adj: Arc<SparseAdjacency>, h: Var },
    AffineCols { x: Var, scale: Vec<f64> },
    MaeLoss { pred: Var, target: Tensor, mask: Option<Vec<bool>>, count: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    vars: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Parameter gradients built directly, without a backward pass.
    pub fn from_params(params: BTreeMap<String, Tensor>) -> Self {
        Self {
            params,
            vars: Vec::new(),
        }
    }

    /// Every parameter gradient multiplied by `s`.
    pub fn scaled(self, s: f64) -> Self {
        Self {
            params: self.params.into_iter().map(|(k, t)| (k, t.scale(s))).collect(),
            vars: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    /// Adjoint of an arbitrary recorded value, if the loss reaches it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Param(name.into()), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?.check_finite("matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?.check_finite("add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?.check_finite("sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?.check_finite("mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x + 1·biasᵀ`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = tensor::add_row_vector(self.value(x), self.value(bias))?.check_finite("add_bias")?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Affine layer `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scale(s).check_finite("scale")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Scale(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = tensor::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let out = tensor::l2_normalize_rows(self.value(x), eps);
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, eps }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_cols(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let out = tensor::gather_rows(self.value(src), &idx)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::GatherRows { src, idx }, rg))
    }

    /// Cosine-graph aggregation of every `N`-row block of `h` (see
    /// [`graph_conv::eco_aggregate`]). `h` holds `B` stacked blocks.
    pub fn eco_aggregate(&mut self, e_hat: Var, h: Var, eps: f64) -> Result<Var> {
        let (out, cache) = graph_conv::eco_forward(self.value(e_hat), self.value(h), eps)?;
        let out = out.check_finite("eco_aggregate")?;
        let rg = self.rg(e_hat) || self.rg(h);
        Ok(self.push(out, Op::Eco { e_hat, h, cache }, rg))
    }

    /// `A·h_b` for every `N`-row block `h_b` of `h`, with a dense `N×N` `A`.
    pub fn dense_aggregate(&mut self, adj: Var, h: Var) -> Result<Var> {
        let out = graph_conv::dense_aggregate(self.value(adj), self.value(h))?
            .check_finite("dense_aggregate")?;
        let rg = self.rg(adj) || self.rg(h);
        Ok(self.push(out, Op::DenseAggregate { adj, h }, rg))
    }

    /// `A·h_b` for every `N`-row block with a fixed sparse `A`.
    pub fn sparse_aggregate(&mut self, adj: Arc<SparseAdjacency>, h: Var) -> Result<Var> {
        let out = adj.aggregate(self.value(h))?.check_finite("sparse_aggregate")?;
        let rg = self.rg(h);
        Ok(self.push(out, Op::SparseAggregate { adj, h }, rg))
    }

    /// Column-wise `x·scale + shift` with constant coefficients.
    pub fn affine_cols(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if scale.len() != c || shift.len() != c {
            return Err(dim_err(
                "affine_cols",
                format!("{} columns, {} scales, {} shifts", c, scale.len(), shift.len()),
            ));
        }
        let mut out = xv.as_matrix();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for ((v, s), b) in row.iter_mut().zip(scale).zip(shift) {
                    *v = *v * s + b;
                }
            }
        }
        let out = out.check_finite("affine_cols")?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::AffineCols {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Mean absolute error against a constant target over unmasked entries.
    /// `mask[i] == true` keeps entry `i`.
    pub fn mae_loss(&mut self, pred: Var, target: Tensor, mask: Option<Vec<bool>>) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(dim_err(
                "mae_loss",
                format!("prediction {:?} vs truth {:?}", p.shape(), target.shape()),
            ));
        }
        if let Some(m) = &mask {
            if m.len() != p.len() {
                return Err(dim_err("mae_loss", "mask length differs from prediction"));
            }
        }
        let value = mae(p.data(), target.data(), mask.as_deref())?;
        let count = mask
            .as_ref()
            .map_or(p.len(), |m| m.iter().filter(|&&k| k).count());
        let out = Tensor::full(&[1, 1], value).check_finite("mae_loss")?;
        let rg = self.rg(pred);
        Ok(self.push(
            out,
            Op::MaeLoss {
                pred,
                target,
                mask,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(RaglError::Precondition(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = adj
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !g.is_finite() {
                    return Err(RaglError::NonFiniteGradient(name.clone()));
                }
                params.insert(name.clone(), g);
            }
        }
        Ok(Gradients { params, vars: adj })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, grad: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let grad = grad.reshape(self.nodes[v.0].value.shape()).expect("adjoint shape");
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, gemm(g, Trans::No, val(*b), Trans::Yes)?);
                }
                if self.rg(*b) {
                    acc(*b, gemm(val(*a), Trans::Yes, g, Trans::No)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.hadamard(val(*b))?);
                }
                if self.rg(*b) {
                    acc(*b, g.hadamard(val(*a))?);
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    if c > 0 {
                        for row in g.data().chunks(c) {
                            for (s, v) in gb.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::Relu(x) => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut out = g.as_matrix();
                if c > 0 {
                    for (grow, yrow) in out.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gi, yi) in grow.iter_mut().zip(yrow) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                }
                acc(*x, out);
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = val(*x);
                let y = &node.value;
                let c = y.cols();
                let mut out = g.as_matrix();
                if c > 0 {
                    for ((grow, yrow), xrow) in out
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(xv.data().chunks(c))
                    {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for (gi, yi) in grow.iter_mut().zip(yrow) {
                                *gi = (*gi - yi * dot) / norm;
                            }
                        } else {
                            for gi in grow.iter_mut() {
                                *gi /= eps;
                            }
                        }
                    }
                }
                acc(*x, out);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        acc(p, g.slice_cols(start, start + w)?);
                    }
                    start += w;
                }
            }
            Op::GatherRows { src, idx } => {
                let sv = val(*src);
                let c = sv.cols();
                let mut out = Tensor::zeros(&[sv.rows(), c]);
                for (r, &i) in idx.iter().enumerate() {
                    let grow = g.row(r);
                    for (o, v) in out.row_mut(i).iter_mut().zip(grow) {
                        *o += v;
                    }
                }
                acc(*src, out);
            }
            Op::Eco { e_hat, h, cache } => {
                let (ge, gh) = graph_conv::eco_backward(
                    val(*e_hat),
                    val(*h),
                    &node.value,
                    cache,
                    g,
                    self.rg(*e_hat),
                    self.rg(*h),
                )?;
                if let Some(ge) = ge {
                    acc(*e_hat, ge);
                }
                if let Some(gh) = gh {
                    acc(*h, gh);
                }
            }
            Op::DenseAggregate { adj: a, h } => {
                let av = val(*a);
                let hv = val(*h);
                let n = av.rows();
                let d = hv.cols();
                let blocks = hv.rows() / n;
                if self.rg(*a) {
                    let mut ga = vec![0.0; n * n];
                    for b in 0..blocks {
                        let gb = &g.data()[b * n * d..(b + 1) * n * d];
                        let hb = &hv.data()[b * n * d..(b + 1) * n * d];
                        gemm_into(n, d, n, gb, Trans::No, hb, Trans::Yes, &mut ga, true);
                    }
                    acc(*a, Tensor::matrix(n, n, ga)?);
                }
                if self.rg(*h) {
                    let mut gh = vec![0.0; hv.len()];
                    for b in 0..blocks {
                        let gb = &g.data()[b * n * d..(b + 1) * n * d];
                        let out = &mut gh[b * n * d..(b + 1) * n * d];
                        gemm_into(n, n, d, av.data(), Trans::Yes, gb, Trans::No, out, false);
                    }
                    acc(*h, Tensor::new(hv.shape().to_vec(), gh)?);
                }
            }
            Op::SparseAggregate { adj: a, h } => {
                acc(*h, a.aggregate_transposed(g)?);
            }
            Op::AffineCols { x, scale } => {
                let c = scale.len();
                let mut out = g.as_matrix();
                if c > 0 {
                    for row in out.data_mut().chunks_mut(c) {
                        for (v, s) in row.iter_mut().zip(scale) {
                            *v *= s;
                        }
                    }
                }
                acc(*x, out);
            }
            Op::MaeLoss {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = val(*pred);
                let scale = g.data()[0] / *count as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (&p, &t))| {
                        let keep = mask.as_ref().map_or(true, |m| m[i]);
                        if !keep || p == t {
                            0.0
                        } else if p > t {
                            scale
                        } else {
                            -scale
                        }
                    })
                    .collect();
                acc(*pred, Tensor::new(pv.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

/// Mean absolute deviation over entries whose mask bit is set.
pub fn mae(pred: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            sum += (p - t).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(RaglError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Named parameter tensors, the unit a [`DifferentiableGraph`] is evaluated on.
pub type NamedTensors = BTreeMap<String, Tensor>;

/// A scalar-valued computation over named parameters.
pub trait DifferentiableGraph {
    /// Current parameter values, keyed by stable name.
    fn parameters(&self) -> NamedTensors;

    /// Record the computation on `tape` using `params` (which may be
    /// perturbed copies of [`Self::parameters`]) and return the scalar output.
    fn build(&self, tape: &mut Tape, params: &NamedTensors) -> Result<Var>;

    /// Whether two evaluations on identical parameters agree. Finite
    /// differences are meaningless otherwise.
    fn is_deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, params: &NamedTensors) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, params)?;
        Ok(tape.value(out).data()[0])
    }

    fn gradients(&self, params: &NamedTensors) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let out = self.build(&mut tape, params)?;
        let g = tape.backward(out)?;
        Ok((tape.value(out).data()[0], g))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_param: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// Flat index of the entry with the largest relative error, and its two
    /// gradient estimates.
    pub worst_entry: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol_rel: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= tol_rel)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compare analytic gradients with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on a random subsample of each parameter. The
/// entry with the largest analytic gradient is always included.
///
/// Relative error per entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    graph: &dyn DifferentiableGraph,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !graph.is_deterministic() {
        return Err(RaglError::Precondition(
            "gradient check needs a deterministic graph; fix the stochastic embedding mask first"
                .into(),
        ));
    }
    let mut params = graph.parameters();
    let (_, grads) = graph.gradients(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let names: Vec<String> = params.keys().cloned().collect();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let len = params[&name].len();
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[&name].shape()));
        let picks: Vec<usize> = if len <= opts.samples_per_param {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, opts.samples_per_param).into_vec();
            let peak = analytic
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if !v.contains(&peak) {
                v[0] = peak;
            }
            v.sort_unstable();
            v
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
            worst_entry: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in picks {
            let orig = params[&name].data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let fp = graph.evaluate(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let fm = graph.evaluate(&params)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > check.max_rel_error || (i == 0 && check.worst_entry == 0) {
                check.max_rel_error = rel;
                check.worst_entry = i;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Graph built from a closure, for exercising single primitives.
    struct Closure<F> {
        params: NamedTensors,
        f: F,
    }

    impl<F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>> DifferentiableGraph for Closure<F> {
        fn parameters(&self) -> NamedTensors {
            self.params.clone()
        }

        fn build(&self, tape: &mut Tape, params: &NamedTensors) -> Result<Var> {
            let vars = params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
                .collect();
            (self.f)(tape, &vars)
        }
    }

    /// Smooth scalar readout `mean(out ⊙ R) − floor` via an MAE against a
    /// target below every entry. `floor` is kept close to the outputs so the
    /// loss stays O(1) and central differences are not roundoff-bound.
    fn readout(tape: &mut Tape, out: Var, seed: u64, floor: f64) -> Result<Var> {
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = tape.constant(Tensor::uniform(&shape, 0.5, 1.5, &mut rng));
        let weighted = tape.mul(out, r)?;
        tape.mae_loss(weighted, Tensor::full(&shape, floor), None)
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, -1.0, 1.0, &mut rng)
    }

    fn check<F>(params: Vec<(&str, Tensor)>, f: F)
    where
        F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
    {
        let g = Closure {
            params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            f,
        };
        let report = grad_check(&g, &GradCheckOptions::default()).unwrap();
        for p in &report.params {
            assert!(
                p.max_rel_error <= 1e-6,
                "{}: rel error {} (max |analytic| {})",
                p.name,
                p.max_rel_error,
                p.max_abs_analytic
            );
        }
    }

    #[test]
    fn matmul_and_bias_adjoints() {
        check(
            vec![("a", rand_t(&[4, 3], 1)), ("b", rand_t(&[3, 5], 2)), ("c", rand_t(&[5], 3))],
            |t, v| {
                let y = t.linear(v["a"], v["b"], v["c"])?;
                readout(t, y, 9, -6.5)
            },
        );
    }

    #[test]
    fn elementwise_adjoints() {
        check(
            vec![("a", rand_t(&[3, 4], 4)), ("b", rand_t(&[3, 4], 5))],
            |t, v| {
                let m = t.mul(v["a"], v["b"])?;
                let s = t.sub(m, v["b"])?;
                let a = t.add(s, v["a"])?;
                let sc = t.scale(a, -0.7)?;
                let tr = t.transpose(sc);
                readout(t, tr, 10, -3.5)
            },
        );
    }

    #[test]
    fn relu_adjoint_off_kink() {
        let mut x = rand_t(&[4, 4], 6);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v = 0.3;
            }
        }
        check(vec![("x", x)], |t, v| {
            let y = t.relu(v["x"]);
            readout(t, y, 11, -0.5)
        });
    }

    #[test]
    fn softmax_and_normalize_adjoints() {
        check(vec![("x", rand_t(&[5, 4], 7))], |t, v| {
            let y = t.softmax_rows(v["x"]);
            readout(t, y, 12, -0.5)
        });
        check(vec![("x", rand_t(&[5, 4], 8))], |t, v| {
            let y = t.l2_normalize_rows(v["x"], 1e-12);
            readout(t, y, 13, -2.0)
        });
    }

    #[test]
    fn concat_and_gather_adjoints() {
        check(
            vec![("a", rand_t(&[3, 2], 14)), ("b", rand_t(&[3, 3], 15))],
            |t, v| {
                let c = t.concat_cols(&[v["a"], v["b"]])?;
                let g = t.gather_rows(c, vec![2, 0, 2, 1, 2])?;
                readout(t, g, 16, -2.0)
            },
        );
    }

    #[test]
    fn eco_adjoint_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let e = Tensor::uniform(&[5, 3], 0.1, 1.0, &mut rng);
        check(vec![("e", e), ("h", rand_t(&[15, 4], 18))], |t, v| {
            let ehat = t.l2_normalize_rows(v["e"], 1e-12);
            let y = t.eco_aggregate(ehat, v["h"], 1e-8)?;
            readout(t, y, 19, -2.0)
        });
    }

    #[test]
    fn dense_and_sparse_adjoints() {
        check(vec![("a", rand_t(&[4, 4], 20)), ("h", rand_t(&[8, 3], 21))], |t, v| {
            let y = t.dense_aggregate(v["a"], v["h"])?;
            readout(t, y, 22, -6.5)
        });
        let sp = Arc::new(
            SparseAdjacency::from_rows(
                3,
                vec![vec![(0, 0.2), (1, 0.8)], vec![(2, 1.0)], vec![(0, 0.5), (2, 0.5)]],
            )
            .unwrap(),
        );
        check(vec![("h", rand_t(&[6, 2], 23))], move |t, v| {
            let y = t.sparse_aggregate(sp.clone(), v["h"])?;
            let z = t.affine_cols(y, &[2.0, -0.5], &[1.0, 3.0])?;
            readout(t, z, 24, -8.0)
        });
    }

    #[test]
    fn linear_model_abs_loss() {
        // y = w·x, loss |y − t| with y > t: d/dw = x exactly.
        let x = Tensor::from_rows(&[&[1.5, -2.0, 0.25]]);
        let g = Closure {
            params: [("w".to_string(), Tensor::from_rows(&[&[0.4], &[-0.3], &[0.8]]))].into(),
            f: move |t: &mut Tape, v: &BTreeMap<String, Var>| {
                let xv = t.constant(x.clone());
                let y = t.matmul(xv, v["w"])?;
                t.mae_loss(y, Tensor::full(&[1, 1], -1.0), None)
            },
        };
        let (_, grads) = g.gradients(&g.parameters()).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.5, -2.0, 0.25]);
        let report = grad_check(&g, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() <= 1e-7);
    }

    #[test]
    fn unreachable_param_has_zero_gradient() {
        let g = Closure {
            params: [
                ("used".to_string(), rand_t(&[2, 2], 25)),
                ("unused".to_string(), rand_t(&[2, 3], 26)),
            ]
            .into(),
            f: |t: &mut Tape, v: &BTreeMap<String, Var>| readout(t, v["used"], 27, -2.0),
        };
        let report = grad_check(&g, &GradCheckOptions::default()).unwrap();
        let unused = report.params.iter().find(|p| p.name == "unused").unwrap();
        assert!(unused.max_abs_analytic <= 1e-8 && unused.max_abs_numeric <= 1e-8);
    }

    #[test]
    fn nondeterministic_graph_rejected() {
        struct Noisy;
        impl DifferentiableGraph for Noisy {
            fn parameters(&self) -> NamedTensors {
                NamedTensors::new()
            }
            fn build(&self, tape: &mut Tape, _: &NamedTensors) -> Result<Var> {
                let x = tape.constant(Tensor::full(&[1, 1], rand::thread_rng().gen()));
                Ok(x)
            }
            fn is_deterministic(&self) -> bool {
                false
            }
        }
        assert!(matches!(
            grad_check(&Noisy, &GradCheckOptions::default()),
            Err(RaglError::Precondition(_))
        ));
    }

    #[test]
    fn mae_masking() {
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0], None).unwrap(), 2.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0], Some(&[false, true])).unwrap(), 3.0);
        assert!(matches!(
            mae(&[0.0], &[1.0], Some(&[false])),
            Err(RaglError::EmptyMask)
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::zeros(&[2, 2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shared_leaf_accumulates() {
        // loss = mean(x ⊙ x) reached through two paths
        let mut t = Tape::new();
        let x = t.param("x", Tensor::from_rows(&[&[2.0, 3.0]]));
        let y = t.mul(x, x).unwrap();
        let l = t.mae_loss(y, Tensor::zeros(&[1, 2]), None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[2.0, 3.0]);
    }
}
