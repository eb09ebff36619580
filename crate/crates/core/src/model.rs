//! The full forecaster: embedding, stochastic shared embeddings, gated
//! cosine graph, stacked encoder and the two regression heads.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowSample, WindowSet};
use crate::embedding::{embed_on_tape, EmbeddingTables, EmbeddingVars, DAYS_PER_WEEK};
use crate::encoder::{encode_on_tape, EncoderLayerParams, LayerVars, MlpParams};
use crate::error::{dim_err, RaglError, Result};
use crate::graph_conv::{self, Aggregator, DiffusionWeights, SparseAdjacency, NORM_EPS};
use crate::regularization::{validate_probability, SseDraw};
use crate::tape::{self, DifferentiableGraph, Gradients, NamedTensors, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyKind {
    /// Cosine graph of gated node embeddings, aggregated in linear time.
    Eco,
    /// Dense `softmax(relu(E·Eᵀ))`.
    Softmax,
    /// Fixed thresholded Gaussian kernel over road distances.
    Geo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub horizon_in: usize,
    pub horizon_out: usize,
    pub channels: usize,
    pub steps_per_day: usize,
    pub d_in: usize,
    pub d_tid: usize,
    pub d_diw: usize,
    pub d_node: usize,
    pub layers: usize,
    /// Highest adjacency power `Z` in the diffusion sum.
    pub diffusion_steps: usize,
    pub sse_p: f64,
    pub sse_on: bool,
    pub rdm_on: bool,
    pub agc_on: bool,
    pub adjacency: AdjacencyKind,
    /// Feed the perturbed node embeddings into the gate instead of the
    /// originals.
    pub gate_from_perturbed: bool,
    /// One set of diffusion weights for all layers.
    pub share_diffusion: bool,
}

impl ModelConfig {
    pub fn new(
        n_nodes: usize,
        horizon_in: usize,
        horizon_out: usize,
        channels: usize,
        steps_per_day: usize,
    ) -> Self {
        Self {
            n_nodes,
            horizon_in,
            horizon_out,
            channels,
            steps_per_day,
            d_in: 32,
            d_tid: 32,
            d_diw: 32,
            d_node: 64,
            layers: 2,
            diffusion_steps: 2,
            sse_p: 0.1,
            sse_on: true,
            rdm_on: true,
            agc_on: true,
            adjacency: AdjacencyKind::Eco,
            gate_from_perturbed: false,
            share_diffusion: false,
        }
    }

    /// Width of the concatenated node state.
    pub fn d0(&self) -> usize {
        self.d_in + self.d_tid + self.d_diw + self.d_node
    }

    pub fn input_width(&self) -> usize {
        self.horizon_in * self.channels
    }

    pub fn output_width(&self) -> usize {
        self.horizon_out * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_nodes", self.n_nodes),
            ("horizon_in", self.horizon_in),
            ("horizon_out", self.horizon_out),
            ("channels", self.channels),
            ("steps_per_day", self.steps_per_day),
            ("d_in", self.d_in),
            ("d_tid", self.d_tid),
            ("d_diw", self.d_diw),
            ("d_node", self.d_node),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(RaglError::Config(format!("{name} must be at least 1")));
        }
        validate_probability(self.sse_p)
    }
}

/// Every learnable tensor, addressed by a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: NamedTensors,
}

fn layer_name(l: usize, part: &str) -> String {
    format!("layers.{l}.{part}")
}

fn diffusion_name(cfg: &ModelConfig, l: usize, z: usize) -> String {
    if cfg.share_diffusion {
        format!("diffusion.shared.{z}")
    } else {
        layer_name(l, &format!("diffusion.{z}"))
    }
}

fn uses_gate(cfg: &ModelConfig) -> bool {
    cfg.agc_on && cfg.adjacency == AdjacencyKind::Eco
}

impl ParameterSet {
    /// Names and shapes implied by a configuration, in a fixed order.
    pub fn schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d0 = cfg.d0();
        let out = cfg.output_width();
        let mut s = vec![
            ("embedding.w_in".to_string(), vec![cfg.input_width(), cfg.d_in]),
            ("embedding.b_in".to_string(), vec![cfg.d_in]),
            ("embedding.tid".to_string(), vec![cfg.steps_per_day, cfg.d_tid]),
            ("embedding.diw".to_string(), vec![DAYS_PER_WEEK, cfg.d_diw]),
            ("embedding.node".to_string(), vec![cfg.n_nodes, cfg.d_node]),
        ];
        if uses_gate(cfg) {
            s.push(("gate.w1".into(), vec![cfg.d_node, cfg.d_node]));
            s.push(("gate.w2".into(), vec![cfg.d_node, cfg.d_node]));
        }
        for l in 0..cfg.layers {
            s.push((layer_name(l, "fc1.weight"), vec![d0, d0]));
            s.push((layer_name(l, "fc1.bias"), vec![d0]));
            s.push((layer_name(l, "fc2.weight"), vec![d0, d0]));
            s.push((layer_name(l, "fc2.bias"), vec![d0]));
        }
        if cfg.agc_on {
            let owners = if cfg.share_diffusion { 1 } else { cfg.layers };
            for l in 0..owners {
                for z in 0..=cfg.diffusion_steps {
                    s.push((diffusion_name(cfg, l, z), vec![d0, d0]));
                }
            }
        }
        s.push(("head_node.weight".into(), vec![d0, out]));
        s.push(("head_node.bias".into(), vec![out]));
        if cfg.agc_on {
            s.push(("head_global.weight".into(), vec![d0, out]));
            s.push(("head_global.bias".into(), vec![out]));
        }
        s
    }

    /// Affine layers draw from `U(±1/√fan_in)`; lookup tables and node
    /// embeddings from `U(−0.5, 0.5)/√width`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = NamedTensors::new();
        for (name, shape) in Self::schema(cfg) {
            let t = if name.starts_with("embedding.") && name != "embedding.w_in" && name != "embedding.b_in" {
                let s = 0.5 / (shape[1] as f64).sqrt();
                Tensor::uniform(&shape, -s, s, &mut rng)
            } else {
                let fan_in = if name == "embedding.b_in" {
                    cfg.input_width()
                } else if name.ends_with(".bias") {
                    cfg.d0()
                } else {
                    shape[0]
                };
                let s = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(&shape, -s, s, &mut rng)
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Checks names and shapes against the configuration.
    pub fn from_tensors(cfg: &ModelConfig, tensors: NamedTensors) -> Result<Self> {
        let schema = Self::schema(cfg);
        if schema.len() != tensors.len() {
            return Err(RaglError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                schema.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &schema {
            let t = tensors
                .get(name)
                .ok_or_else(|| RaglError::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(RaglError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(RaglError::Checkpoint(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| RaglError::Config(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| RaglError::Config(format!("no parameter named `{name}`")))
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn into_tensors(self) -> NamedTensors {
        self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn embedding_tables(&self) -> Result<EmbeddingTables> {
        Ok(EmbeddingTables {
            w_in: self.get("embedding.w_in")?.clone(),
            b_in: self.get("embedding.b_in")?.clone(),
            tid: self.get("embedding.tid")?.clone(),
            diw: self.get("embedding.diw")?.clone(),
            node: self.get("embedding.node")?.clone(),
        })
    }

    pub fn diffusion(&self, cfg: &ModelConfig, l: usize) -> Result<DiffusionWeights> {
        if !cfg.agc_on {
            return Err(RaglError::Config("model has no graph convolution".into()));
        }
        DiffusionWeights::new(
            (0..=cfg.diffusion_steps)
                .map(|z| self.get(&diffusion_name(cfg, l, z)).cloned())
                .collect::<Result<_>>()?,
        )
    }

    pub fn mlp(&self, l: usize) -> Result<MlpParams> {
        Ok(MlpParams {
            fc1_w: self.get(&layer_name(l, "fc1.weight"))?.clone(),
            fc1_b: self.get(&layer_name(l, "fc1.bias"))?.clone(),
            fc2_w: self.get(&layer_name(l, "fc2.weight"))?.clone(),
            fc2_b: self.get(&layer_name(l, "fc2.bias"))?.clone(),
        })
    }

    pub fn layer(&self, cfg: &ModelConfig, l: usize) -> Result<EncoderLayerParams> {
        Ok(EncoderLayerParams {
            mlp: self.mlp(l)?,
            diffusion: self.diffusion(cfg, l)?,
        })
    }
}

/// How the stochastic shared embedding behaves in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardMode {
    Evaluation,
    /// Draw a fresh mask from `seed`.
    Training { seed: u64 },
    /// Use a given draw; makes training-mode passes deterministic.
    FixedMask(SseDraw),
}

/// A stack of `B` windows: inputs `(B·N) × (T·C)` and targets
/// `(B·N) × (T'·C)`, both on the raw scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    pub target: Tensor,
}

impl Batch {
    pub fn from_windows(windows: &[WindowSample]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| RaglError::Precondition("batch has no windows".into()))?;
        let (n, ti, c) = (first.input.shape()[0], first.input.shape()[1], first.input.shape()[2]);
        let to = first.target.shape()[1];
        let mut x = Vec::with_capacity(windows.len() * n * ti * c);
        let mut y = Vec::with_capacity(windows.len() * n * to * c);
        for w in windows {
            if w.input.shape() != first.input.shape() || w.target.shape() != first.target.shape() {
                return Err(dim_err("batch", "windows of different shapes"));
            }
            x.extend_from_slice(w.input.data());
            y.extend_from_slice(w.target.data());
        }
        let b = windows.len();
        Ok(Self {
            x: Tensor::matrix(b * n, ti * c, x)?,
            tod: windows.iter().map(|w| w.time_index.tod).collect(),
            dow: windows.iter().map(|w| w.time_index.dow).collect(),
            target: Tensor::matrix(b * n, to * c, y)?,
        })
    }

    pub fn from_set(set: &WindowSet, indices: &[usize]) -> Result<Self> {
        let windows = indices.iter().map(|&k| set.get(k)).collect::<Result<Vec<_>>>()?;
        Self::from_windows(&windows)
    }

    pub fn size(&self) -> usize {
        self.tod.len()
    }
}

/// Tape handles for every parameter, by name.
pub type ParamVars = BTreeMap<String, Var>;

pub fn bind_params(tape: &mut Tape, tensors: &NamedTensors) -> ParamVars {
    tensors
        .iter()
        .map(|(name, t)| (name.clone(), tape.param(name.clone(), t.clone())))
        .collect()
}

fn var(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| RaglError::Config(format!("no parameter named `{name}`")))
}

/// Configuration, parameters, normalization statistics and (for the
/// geographic variant) the fixed adjacency: everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub cfg: ModelConfig,
    pub params: ParameterSet,
    pub norm: NormStats,
    pub geo: Option<Arc<SparseAdjacency>>,
}

impl Forecaster {
    pub fn new(cfg: ModelConfig, norm: NormStats, geo: Option<SparseAdjacency>, seed: u64) -> Result<Self> {
        let params = ParameterSet::init(&cfg, seed)?;
        Self::from_parts(cfg, params, norm, geo)
    }

    pub fn from_parts(
        cfg: ModelConfig,
        params: ParameterSet,
        norm: NormStats,
        geo: Option<SparseAdjacency>,
    ) -> Result<Self> {
        cfg.validate()?;
        let params = ParameterSet::from_tensors(&cfg, params.into_tensors())?;
        if norm.channels() != cfg.channels || norm.std.len() != cfg.channels {
            return Err(RaglError::Config(format!(
                "normalization covers {} channels, model has {}",
                norm.channels(),
                cfg.channels
            )));
        }
        if norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(RaglError::Config("normalization std must be positive".into()));
        }
        let geo = match (cfg.adjacency, geo) {
            (AdjacencyKind::Geo, None) if cfg.agc_on => {
                return Err(RaglError::Config("geographic variant needs an adjacency".into()))
            }
            (_, Some(g)) if g.n_nodes() != cfg.n_nodes => {
                return Err(RaglError::Config(format!(
                    "adjacency has {} nodes, model has {}",
                    g.n_nodes(),
                    cfg.n_nodes
                )))
            }
            (_, g) => g.map(Arc::new),
        };
        Ok(Self {
            cfg,
            params,
            norm,
            geo,
        })
    }

    pub fn draw(&self, mode: &ForwardMode) -> Result<SseDraw> {
        let n = self.cfg.n_nodes;
        Ok(match mode {
            ForwardMode::Evaluation => SseDraw::identity(n),
            ForwardMode::Training { seed } => {
                if self.cfg.sse_on && self.cfg.sse_p > 0.0 {
                    SseDraw::sample(n, self.cfg.sse_p, &mut ChaCha8Rng::seed_from_u64(*seed))
                } else {
                    SseDraw::identity(n)
                }
            }
            ForwardMode::FixedMask(d) => {
                d.validate(n)?;
                d.clone()
            }
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.cfg;
        let b = batch.size();
        if b == 0
            || batch.x.shape() != [b * cfg.n_nodes, cfg.input_width()]
            || batch.target.shape() != [b * cfg.n_nodes, cfg.output_width()]
            || batch.dow.len() != b
        {
            return Err(dim_err(
                "forward",
                format!(
                    "batch x {:?}, target {:?} for {b} samples; model expects {} nodes, {} inputs, {} outputs",
                    batch.x.shape(),
                    batch.target.shape(),
                    cfg.n_nodes,
                    cfg.input_width(),
                    cfg.output_width()
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass with parameters `vars` and returns raw-scale
    /// predictions `(B·N) × (T'·C)`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &ParamVars, batch: &Batch, draw: &SseDraw) -> Result<Var> {
        self.check_batch(batch)?;
        draw.validate(self.cfg.n_nodes)?;
        let cfg = &self.cfg;
        let sources = draw.sources();
        let x = tape.constant(self.norm.normalize(&batch.x));
        let emb = EmbeddingVars {
            w_in: var(vars, "embedding.w_in")?,
            b_in: var(vars, "embedding.b_in")?,
            tid: var(vars, "embedding.tid")?,
            diw: var(vars, "embedding.diw")?,
            node: var(vars, "embedding.node")?,
        };
        let h0 = embed_on_tape(tape, &emb, x, &batch.tod, &batch.dow, &sources)?;

        let agg = if cfg.agc_on {
            let graph_input = if cfg.gate_from_perturbed {
                tape.gather_rows(emb.node, sources.clone())?
            } else {
                emb.node
            };
            Some(match cfg.adjacency {
                AdjacencyKind::Eco => {
                    let g = graph_conv::gate_on_tape(tape, graph_input, var(vars, "gate.w1")?, var(vars, "gate.w2")?)?;
                    let e_hat = tape.l2_normalize_rows(g, NORM_EPS);
                    Aggregator::Eco { e_hat }
                }
                AdjacencyKind::Softmax => Aggregator::Dense {
                    adj: graph_conv::softmax_adjacency_on_tape(tape, graph_input)?,
                },
                AdjacencyKind::Geo => {
                    Aggregator::Sparse(self.geo.clone().expect("checked at construction"))
                }
            })
        } else {
            None
        };

        let layers = (0..cfg.layers)
            .map(|l| {
                Ok(LayerVars {
                    fc1_w: var(vars, &layer_name(l, "fc1.weight"))?,
                    fc1_b: var(vars, &layer_name(l, "fc1.bias"))?,
                    fc2_w: var(vars, &layer_name(l, "fc2.weight"))?,
                    fc2_b: var(vars, &layer_name(l, "fc2.bias"))?,
                    diffusion: if cfg.agc_on {
                        (0..=cfg.diffusion_steps)
                            .map(|z| var(vars, &diffusion_name(cfg, l, z)))
                            .collect::<Result<_>>()?
                    } else {
                        Vec::new()
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (h, skip) = encode_on_tape(tape, h0, agg.as_ref(), &layers, cfg.rdm_on)?;

        let mut out = tape.linear(h, var(vars, "head_node.weight")?, var(vars, "head_node.bias")?)?;
        if let Some(skip) = skip {
            let g = tape.linear(skip, var(vars, "head_global.weight")?, var(vars, "head_global.bias")?)?;
            out = tape.add(out, g)?;
        }
        let c = cfg.channels;
        let scale: Vec<f64> = (0..cfg.output_width()).map(|j| self.norm.std[j % c]).collect();
        let shift: Vec<f64> = (0..cfg.output_width()).map(|j| self.norm.mean[j % c]).collect();
        tape.affine_cols(out, &scale, &shift)
    }

    /// Raw-scale predictions `(B·N) × (T'·C)`.
    pub fn predict(&self, batch: &Batch, mode: &ForwardMode) -> Result<Tensor> {
        let draw = self.draw(mode)?;
        let mut tape = Tape::new();
        let vars: ParamVars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        let out = self.forward_on_tape(&mut tape, &vars, batch, &draw)?;
        Ok(tape.value(out).clone())
    }

    /// Prediction for one window, shaped `N × T' × C`.
    pub fn forward(&self, window: &WindowSample, mode: &ForwardMode) -> Result<Tensor> {
        let batch = Batch::from_windows(std::slice::from_ref(window))?;
        let cfg = &self.cfg;
        self.predict(&batch, mode)?
            .reshape(&[cfg.n_nodes, cfg.horizon_out, cfg.channels])
    }

    /// Training objective and gradients for every parameter.
    pub fn loss_and_gradients(&self, batch: &Batch, mode: &ForwardMode) -> Result<(f64, Gradients)> {
        let objective = Objective {
            model: self,
            batch,
            draw: self.draw(mode)?,
        };
        objective.gradients(self.params.tensors())
    }
}

/// The training loss of a [`Forecaster`] on one batch with a fixed
/// embedding draw, as a differentiable function of the parameters.
pub struct Objective<'a> {
    pub model: &'a Forecaster,
    pub batch: &'a Batch,
    pub draw: SseDraw,
}

impl DifferentiableGraph for Objective<'_> {
    fn parameters(&self) -> NamedTensors {
        self.model.params.tensors().clone()
    }

    fn build(&self, tape: &mut Tape, params: &NamedTensors) -> Result<Var> {
        let vars = bind_params(tape, params);
        let pred = self.model.forward_on_tape(tape, &vars, self.batch, &self.draw)?;
        tape.mae_loss(pred, self.batch.target.clone(), None)
    }
}

/// Mean absolute error over the entries selected by `mask`.
pub fn mae_loss(pred: &Tensor, truth: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(dim_err(
            "mae_loss",
            format!("prediction {:?}, truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(dim_err("mae_loss", format!("mask of {} for {} values", m.len(), pred.len())));
        }
    }
    tape::mae(pred.data(), truth.data(), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{assemble_state, embed_inputs, time_lookup, TimeIndex};
    use crate::encoder::mlp_residual;
    use crate::tensor::{add_row_vector, matmul};
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_in: 4,
            d_tid: 3,
            d_diw: 2,
            d_node: 5,
            sse_p: 0.5,
            ..ModelConfig::new(6, 4, 3, 2, 96)
        }
    }

    fn window(cfg: &ModelConfig, seed: u64) -> WindowSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WindowSample {
            input: Tensor::uniform(&[cfg.n_nodes, cfg.horizon_in, cfg.channels], 0.0, 80.0, &mut rng),
            target: Tensor::uniform(&[cfg.n_nodes, cfg.horizon_out, cfg.channels], 0.0, 80.0, &mut rng),
            time_index: TimeIndex {
                tod: rng.gen_range(0..96),
                dow: rng.gen_range(0..7),
            },
        }
    }

    fn norm() -> NormStats {
        NormStats {
            mean: vec![40.0, 20.0],
            std: vec![20.0, 5.0],
        }
    }

    fn model(cfg: ModelConfig) -> Forecaster {
        Forecaster::new(cfg, norm(), None, 11).unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = model(tiny_cfg());
        let w = window(&m.cfg, 1);
        let a = m.forward(&w, &ForwardMode::Evaluation).unwrap();
        let b = m.forward(&w, &ForwardMode::Evaluation).unwrap();
        assert_eq!(a.shape(), &[6, 3, 2]);
        assert_eq!(a, b);
        let t = m.forward(&w, &ForwardMode::Training { seed: 3 }).unwrap();
        assert_eq!(t.shape(), &[6, 3, 2]);
    }

    #[test]
    fn zero_heads_give_broadcast_bias() {
        let mut m = model(tiny_cfg());
        for name in ["head_node.weight", "head_global.weight"] {
            let w = m.params.get_mut(name).unwrap();
            *w = Tensor::zeros(w.shape());
        }
        let bias = m
            .params
            .get("head_node.bias")
            .unwrap()
            .add(m.params.get("head_global.bias").unwrap())
            .unwrap();
        let out = m.forward(&window(&m.cfg, 2), &ForwardMode::Evaluation).unwrap();
        let flat = out.reshape(&[6, 6]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let c = j % 2;
                let want = bias.data()[j] * norm().std[c] + norm().mean[c];
                assert!((flat.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn without_graph_convolution_is_an_mlp_stack() {
        let cfg = ModelConfig {
            agc_on: false,
            ..tiny_cfg()
        };
        let m = model(cfg.clone());
        let w = window(&cfg, 3);
        let got = m.forward(&w, &ForwardMode::Evaluation).unwrap();

        let tables = m.params.embedding_tables().unwrap();
        let x = norm().normalize(&w.input);
        let e_in = embed_inputs(&x, &tables).unwrap();
        let (tid, diw) = time_lookup(w.time_index, &tables).unwrap();
        let mut h = assemble_state(&e_in, &tid, &diw, &tables.node).unwrap();
        for l in 0..cfg.layers {
            let p = EncoderLayerParams {
                mlp: m.params.mlp(l).unwrap(),
                diffusion: DiffusionWeights::new(vec![Tensor::zeros(&[cfg.d0(), cfg.d0()])]).unwrap(),
            };
            h = mlp_residual(&h, &p).unwrap();
        }
        let y = add_row_vector(
            &matmul(&h, m.params.get("head_node.weight").unwrap()).unwrap(),
            m.params.get("head_node.bias").unwrap(),
        )
        .unwrap();
        let want = norm()
            .denormalize(&y.reshape(&[6, 3, 2]).unwrap());
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert!(!m.params.tensors().contains_key("gate.w1"));
        assert!(!m.params.tensors().contains_key("head_global.weight"));
    }

    #[test]
    fn zero_replacement_probability_matches_evaluation() {
        let cfg = ModelConfig {
            sse_p: 0.0,
            ..tiny_cfg()
        };
        let m = model(cfg.clone());
        let w = window(&cfg, 4);
        assert_eq!(
            m.forward(&w, &ForwardMode::Training { seed: 9 }).unwrap(),
            m.forward(&w, &ForwardMode::Evaluation).unwrap()
        );
        let p1 = model(ModelConfig {
            sse_p: 1.0,
            ..tiny_cfg()
        });
        assert_ne!(
            p1.forward(&w, &ForwardMode::Training { seed: 9 }).unwrap(),
            p1.forward(&w, &ForwardMode::Evaluation).unwrap()
        );
    }

    #[test]
    fn every_parameter_gets_gradient() {
        for adjacency in [AdjacencyKind::Eco, AdjacencyKind::Softmax] {
            let cfg = ModelConfig {
                adjacency,
                ..tiny_cfg()
            };
            let m = model(cfg.clone());
            let batch = Batch::from_windows(&[window(&cfg, 5), window(&cfg, 6)]).unwrap();
            let (loss, g) = m
                .loss_and_gradients(&batch, &ForwardMode::Training { seed: 1 })
                .unwrap();
            assert!(loss > 0.0);
            for (name, _) in m.params.iter() {
                let gt = g.get(name).unwrap();
                assert!(gt.max_abs() > 0.0, "{adjacency:?}: `{name}` has zero gradient");
            }
        }
    }

    #[test]
    fn without_residual_difference_passes_graph_output() {
        // with rdm off and a single layer, the node head sees h_g, the same
        // input as the global head
        let cfg = ModelConfig {
            rdm_on: false,
            layers: 1,
            ..tiny_cfg()
        };
        let mut m = model(cfg.clone());
        let wn = m.params.get("head_node.weight").unwrap().clone();
        *m.params.get_mut("head_global.weight").unwrap() = wn;
        *m.params.get_mut("head_global.bias").unwrap() = Tensor::zeros(&[cfg.output_width()]);
        let w = window(&cfg, 7);
        let both = m.forward(&w, &ForwardMode::Evaluation).unwrap();
        *m.params.get_mut("head_global.weight").unwrap() = Tensor::zeros(&[cfg.d0(), cfg.output_width()]);
        let single = m.forward(&w, &ForwardMode::Evaluation).unwrap();
        // both = 2·node_part + bias, single = node_part + bias on the normalized scale
        let nb = norm();
        let b = m.params.get("head_node.bias").unwrap();
        let flat_both = nb.normalize(&both).reshape(&[6, 6]).unwrap();
        let flat_single = nb.normalize(&single).reshape(&[6, 6]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let lhs = flat_both.at(i, j) - b.data()[j];
                let rhs = 2.0 * (flat_single.at(i, j) - b.data()[j]);
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mae_loss_cases() {
        let t = Tensor::from_rows(&[&[1.0, 3.0]]);
        assert_eq!(mae_loss(&t, &t, None).unwrap(), 0.0);
        assert_eq!(mae_loss(&t.map(|v| v + 1.0), &t, None).unwrap(), 1.0);
        assert_eq!(mae_loss(&Tensor::zeros(&[1, 2]), &t, None).unwrap(), 2.0);
        assert!(matches!(
            mae_loss(&t, &t, Some(&[false, false])),
            Err(RaglError::EmptyMask)
        ));
        assert!(mae_loss(&t, &Tensor::zeros(&[2, 1]), None).is_err());
    }

    #[test]
    fn parameter_schema_validation() {
        let cfg = tiny_cfg();
        let p = ParameterSet::init(&cfg, 0).unwrap();
        let mut tensors = p.clone().into_tensors();
        tensors.insert("gate.w1".into(), Tensor::zeros(&[2, 2]));
        assert!(ParameterSet::from_tensors(&cfg, tensors).is_err());
        let shared = ModelConfig {
            share_diffusion: true,
            ..cfg.clone()
        };
        let ps = ParameterSet::init(&shared, 0).unwrap();
        assert_eq!(ps.len(), p.len() - (cfg.diffusion_steps + 1));
        assert_eq!(ps.layer(&shared, 0).unwrap().diffusion, ps.layer(&shared, 1).unwrap().diffusion);
    }

    #[test]
    fn geographic_variant_needs_adjacency() {
        let cfg = ModelConfig {
            adjacency: AdjacencyKind::Geo,
            ..tiny_cfg()
        };
        assert!(Forecaster::new(cfg.clone(), norm(), None, 0).is_err());
        let rows = (0..6).map(|i| vec![(i, 0.5), ((i + 1) % 6, 0.5)]).collect();
        let geo = SparseAdjacency::from_rows(6, rows).unwrap();
        let m = Forecaster::new(cfg.clone(), norm(), Some(geo), 0).unwrap();
        assert_eq!(m.forward(&window(&cfg, 8), &ForwardMode::Evaluation).unwrap().shape(), &[6, 3, 2]);
    }
}
