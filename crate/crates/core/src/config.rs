//! Flat `key = value` run configuration with one section per module.
//!
//! Values are resolved in order: built-in defaults, then a config file, then
//! individual `section.key=value` overrides.

use std::path::Path;

use ini::Ini;

use crate::bench::{BenchConfig, Operator};
use crate::data::SplitRatios;
use crate::error::{RaglError, Result};
use crate::model::{AdjacencyKind, ModelConfig};
use crate::synth::SynthSpec;
use crate::trainer::TrainSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub split: SplitRatios,
    /// Kernel weights below this are dropped from the geographic graph.
    pub geo_threshold: f64,
    /// `None` uses the standard deviation of the distances.
    pub geo_sigma: Option<f64>,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            split: SplitRatios::default(),
            geo_threshold: 0.1,
            geo_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSettings,
    /// Node count, channels and steps per day are taken from the data.
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainSchedule,
    pub synth: SynthSpec,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSettings::default(),
            model: ModelConfig::new(0, 12, 12, 1, 96),
            model_seed: 0,
            train: TrainSchedule::default(),
            synth: SynthSpec::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| RaglError::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

fn parse_opt<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(section, key, v).map(Some),
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn adjacency_name(a: AdjacencyKind) -> &'static str {
    match a {
        AdjacencyKind::Eco => "eco",
        AdjacencyKind::Softmax => "softmax",
        AdjacencyKind::Geo => "geo",
    }
}

fn parse_adjacency(value: &str) -> Result<AdjacencyKind> {
    match value.trim() {
        "eco" => Ok(AdjacencyKind::Eco),
        "softmax" => Ok(AdjacencyKind::Softmax),
        "geo" => Ok(AdjacencyKind::Geo),
        v => Err(RaglError::Config(format!("[model] adjacency: unknown kind `{v}`"))),
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let (s, k, v) = (section, key, value);
        match (s, k) {
            ("data", "train_ratio") => self.data.split.train = parse(s, k, v)?,
            ("data", "val_ratio") => self.data.split.val = parse(s, k, v)?,
            ("data", "test_ratio") => self.data.split.test = parse(s, k, v)?,
            ("data", "geo_threshold") => self.data.geo_threshold = parse(s, k, v)?,
            ("data", "geo_sigma") => self.data.geo_sigma = parse_opt(s, k, v)?,

            ("model", "horizon_in") => self.model.horizon_in = parse(s, k, v)?,
            ("model", "horizon_out") => self.model.horizon_out = parse(s, k, v)?,
            ("model", "d_in") => self.model.d_in = parse(s, k, v)?,
            ("model", "d_tid") => self.model.d_tid = parse(s, k, v)?,
            ("model", "d_diw") => self.model.d_diw = parse(s, k, v)?,
            ("model", "d_node") => self.model.d_node = parse(s, k, v)?,
            ("model", "layers") => self.model.layers = parse(s, k, v)?,
            ("model", "diffusion_steps") => self.model.diffusion_steps = parse(s, k, v)?,
            ("model", "sse_p") => self.model.sse_p = parse(s, k, v)?,
            ("model", "sse_on") => self.model.sse_on = parse(s, k, v)?,
            ("model", "rdm_on") => self.model.rdm_on = parse(s, k, v)?,
            ("model", "agc_on") => self.model.agc_on = parse(s, k, v)?,
            ("model", "adjacency") => self.model.adjacency = parse_adjacency(v)?,
            ("model", "gate_from_perturbed") => self.model.gate_from_perturbed = parse(s, k, v)?,
            ("model", "share_diffusion") => self.model.share_diffusion = parse(s, k, v)?,
            ("model", "seed") => self.model_seed = parse(s, k, v)?,

            ("train", "epochs") => self.train.epochs = parse(s, k, v)?,
            ("train", "batch_size") => self.train.batch_size = parse(s, k, v)?,
            ("train", "lr0") => self.train.lr0 = parse(s, k, v)?,
            ("train", "decay") => self.train.decay = parse(s, k, v)?,
            ("train", "decay_every") => self.train.decay_every = parse(s, k, v)?,
            ("train", "seed") => self.train.seed = parse(s, k, v)?,
            ("train", "clip_norm") => self.train.clip_norm = parse_opt(s, k, v)?,
            ("train", "memory_budget_bytes") => self.train.memory_budget_bytes = parse_opt(s, k, v)?,

            ("synth", "n_nodes") => self.synth.n_nodes = parse(s, k, v)?,
            ("synth", "steps") => self.synth.steps = parse(s, k, v)?,
            ("synth", "channels") => self.synth.channels = parse(s, k, v)?,
            ("synth", "interval_seconds") => self.synth.interval_seconds = parse(s, k, v)?,
            ("synth", "start_timestamp") => self.synth.start_timestamp = parse(s, k, v)?,
            ("synth", "seed") => self.synth.seed = parse(s, k, v)?,
            ("synth", "base") => self.synth.components.base = parse(s, k, v)?,
            ("synth", "daily") => self.synth.components.daily = parse(s, k, v)?,
            ("synth", "weekly") => self.synth.components.weekly = parse(s, k, v)?,
            ("synth", "noise") => self.synth.components.noise = parse(s, k, v)?,
            ("synth", "ar") => self.synth.components.ar = parse(s, k, v)?,
            ("synth", "coupling") => self.synth.components.coupling = parse(s, k, v)?,
            ("synth", "bandwidth_km") => self.synth.components.bandwidth_km = parse(s, k, v)?,

            ("bench", "n_list") => self.bench.n_list = parse_list(s, k, v)?,
            ("bench", "d_node") => self.bench.d_node = parse(s, k, v)?,
            ("bench", "d") => self.bench.d = parse(s, k, v)?,
            ("bench", "reps") => self.bench.reps = parse(s, k, v)?,
            ("bench", "warmup") => self.bench.warmup = parse(s, k, v)?,
            ("bench", "threads") => self.bench.threads = parse(s, k, v)?,
            ("bench", "seed") => self.bench.seed = parse(s, k, v)?,
            ("bench", "operators") => self.bench.operators = parse_list::<Operator>(s, k, v)?,
            ("bench", "dense_cap_bytes") => self.bench.dense_cap_bytes = parse(s, k, v)?,
            _ => return Err(RaglError::Config(format!("unknown setting [{s}] {k}"))),
        }
        Ok(())
    }

    /// Applies `section.key=value`.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| RaglError::Config(format!("override `{assignment}` is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| RaglError::Config(format!("override `{assignment}` is not section.key=value")))?;
        self.set(section, key, value)
    }

    /// Every setting as `(section, key, value)`, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let sy = &self.synth;
        let c = &sy.components;
        let b = &self.bench;
        vec![
            ("data", "train_ratio", self.data.split.train.to_string()),
            ("data", "val_ratio", self.data.split.val.to_string()),
            ("data", "test_ratio", self.data.split.test.to_string()),
            ("data", "geo_threshold", self.data.geo_threshold.to_string()),
            ("data", "geo_sigma", opt_str(&self.data.geo_sigma)),
            ("model", "horizon_in", m.horizon_in.to_string()),
            ("model", "horizon_out", m.horizon_out.to_string()),
            ("model", "d_in", m.d_in.to_string()),
            ("model", "d_tid", m.d_tid.to_string()),
            ("model", "d_diw", m.d_diw.to_string()),
            ("model", "d_node", m.d_node.to_string()),
            ("model", "layers", m.layers.to_string()),
            ("model", "diffusion_steps", m.diffusion_steps.to_string()),
            ("model", "sse_p", m.sse_p.to_string()),
            ("model", "sse_on", m.sse_on.to_string()),
            ("model", "rdm_on", m.rdm_on.to_string()),
            ("model", "agc_on", m.agc_on.to_string()),
            ("model", "adjacency", adjacency_name(m.adjacency).to_string()),
            ("model", "gate_from_perturbed", m.gate_from_perturbed.to_string()),
            ("model", "share_diffusion", m.share_diffusion.to_string()),
            ("model", "seed", self.model_seed.to_string()),
            ("train", "epochs", t.epochs.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "lr0", t.lr0.to_string()),
            ("train", "decay", t.decay.to_string()),
            ("train", "decay_every", t.decay_every.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("train", "clip_norm", opt_str(&t.clip_norm)),
            ("train", "memory_budget_bytes", opt_str(&t.memory_budget_bytes)),
            ("synth", "n_nodes", sy.n_nodes.to_string()),
            ("synth", "steps", sy.steps.to_string()),
            ("synth", "channels", sy.channels.to_string()),
            ("synth", "interval_seconds", sy.interval_seconds.to_string()),
            ("synth", "start_timestamp", sy.start_timestamp.to_string()),
            ("synth", "seed", sy.seed.to_string()),
            ("synth", "base", c.base.to_string()),
            ("synth", "daily", c.daily.to_string()),
            ("synth", "weekly", c.weekly.to_string()),
            ("synth", "noise", c.noise.to_string()),
            ("synth", "ar", c.ar.to_string()),
            ("synth", "coupling", c.coupling.to_string()),
            ("synth", "bandwidth_km", c.bandwidth_km.to_string()),
            ("bench", "n_list", join(&b.n_list)),
            ("bench", "d_node", b.d_node.to_string()),
            ("bench", "d", b.d.to_string()),
            ("bench", "reps", b.reps.to_string()),
            ("bench", "warmup", b.warmup.to_string()),
            ("bench", "threads", b.threads.to_string()),
            ("bench", "seed", b.seed.to_string()),
            ("bench", "operators", b.operators.iter().map(|o| o.name()).collect::<Vec<_>>().join(",")),
            ("bench", "dense_cap_bytes", b.dense_cap_bytes.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut ini = Ini::new();
        for (s, k, v) in self.entries() {
            ini.with_section(Some(s)).set(k, v);
        }
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ini output is UTF-8")
    }

    /// Applies every setting in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| RaglError::Config(e.to_string()))?;
        for (section, props) in ini.iter() {
            match section {
                Some(s) => {
                    for (k, v) in props.iter() {
                        self.set(s, k, v)?;
                    }
                }
                None => {
                    if let Some((k, _)) = props.iter().next() {
                        return Err(RaglError::Config(format!("setting `{k}` appears before any section")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Model configuration sized for a data set.
    pub fn model_for(&self, n_nodes: usize, channels: usize, steps_per_day: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            channels,
            steps_per_day,
            ..self.model.clone()
        }
    }
}
