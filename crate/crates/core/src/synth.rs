//! Seeded synthetic traffic generator.
//!
//! Nodes are scattered over a square area. Each node follows a daily profile
//! (base level plus first and second harmonics) with an optional weekly
//! modulation. On top sits a noise process that diffuses over a Gaussian
//! proximity graph: `u_t = ρ·K·u_{t−1} + σ·ε_t` with
//! `K = (1 − coupling)·I + coupling·G`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TrafficSeries;
use crate::embedding::{steps_per_day, TimeIndex, DAYS_PER_WEEK};
use crate::error::{RaglError, Result};
use crate::tensor::{matmul, Tensor};

/// Side of the square the nodes are placed in, in kilometres.
pub const AREA_KM: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthComponents {
    pub base: f64,
    pub daily: f64,
    /// Relative depth of the weekday/weekend swing.
    pub weekly: f64,
    pub noise: f64,
    /// Autoregressive coefficient of the noise process.
    pub ar: f64,
    /// Share of each node's noise inherited from its neighbours.
    pub coupling: f64,
    /// Kernel width of the proximity graph, in kilometres.
    pub bandwidth_km: f64,
}

impl Default for SynthComponents {
    fn default() -> Self {
        Self {
            base: 50.0,
            daily: 30.0,
            weekly: 0.1,
            noise: 1.0,
            ar: 0.8,
            coupling: 0.5,
            bandwidth_km: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_nodes: usize,
    pub steps: usize,
    pub channels: usize,
    pub interval_seconds: u32,
    /// Should fall on a midnight so that step 0 is time-of-day 0.
    pub start_timestamp: i64,
    pub seed: u64,
    pub components: SynthComponents,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_nodes: 20,
            steps: 5_000,
            channels: 1,
            interval_seconds: 900,
            // Monday 2024-01-01 00:00 UTC
            start_timestamp: 1_704_067_200,
            seed: 0,
            components: SynthComponents::default(),
        }
    }
}

struct NodeProfile {
    base: f64,
    amp1: f64,
    phase1: f64,
    amp2: f64,
    phase2: f64,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<TrafficSeries> {
    let n = spec.n_nodes;
    if n < 2 {
        return Err(RaglError::Config(format!("synthetic data needs at least 2 nodes, got {n}")));
    }
    if spec.channels == 0 {
        return Err(RaglError::Config("synthetic data needs at least one channel".into()));
    }
    let comp = spec.components;
    if !(0.0..=1.0).contains(&comp.coupling) || !(0.0..1.0).contains(&comp.ar.abs()) {
        return Err(RaglError::Config(format!(
            "coupling {} must lie in [0, 1] and |ar| {} below 1",
            comp.coupling, comp.ar
        )));
    }
    if comp.bandwidth_km <= 0.0 {
        return Err(RaglError::Config("proximity bandwidth must be positive".into()));
    }
    let t_d = steps_per_day(spec.interval_seconds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let pos: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen::<f64>() * AREA_KM, rng.gen::<f64>() * AREA_KM))
        .collect();
    let mut dist = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
            dist.set(i, j, (dx * dx + dy * dy).sqrt());
        }
    }
    let mixing = mixing_matrix(&dist, comp.coupling, comp.bandwidth_km);

    let profiles: Vec<NodeProfile> = (0..n)
        .map(|_| NodeProfile {
            base: comp.base * rng.gen_range(0.6..1.4),
            amp1: comp.daily * rng.gen_range(0.5..1.0),
            phase1: rng.gen_range(-0.5..0.5),
            amp2: comp.daily * rng.gen_range(0.1..0.4),
            phase2: rng.gen_range(-1.0..1.0),
        })
        .collect();
    let channel_scale: Vec<f64> = (0..spec.channels).map(|c| 1.0 + 0.25 * c as f64).collect();
    // one day of the deterministic profile per node, reused so the signal
    // repeats exactly
    let day: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| {
            (0..t_d)
                .map(|k| {
                    let x = std::f64::consts::TAU * k as f64 / t_d as f64;
                    p.base + p.amp1 * (x - std::f64::consts::PI + p.phase1).cos()
                        + p.amp2 * (2.0 * x + p.phase2).sin()
                })
                .collect()
        })
        .collect();

    let steps = spec.steps;
    let c = spec.channels;
    let mut values = vec![0.0; steps * n * c];
    let mut u = Tensor::zeros(&[n, c]);
    for s in 0..steps {
        let ts = spec.start_timestamp + s as i64 * spec.interval_seconds as i64;
        let idx = TimeIndex::from_timestamp(ts, spec.interval_seconds)?;
        let week = if idx.dow >= DAYS_PER_WEEK - 2 { 1.0 - comp.weekly } else { 1.0 };
        if comp.noise != 0.0 {
            let eps = Tensor::new(
                vec![n, c],
                (0..n * c).map(|_| rng.sample::<f64, _>(StandardNormal) * comp.noise).collect(),
            )?;
            u = matmul(&mixing, &u)?.scale(comp.ar).add(&eps)?;
        }
        for i in 0..n {
            for ch in 0..c {
                values[(s * n + i) * c + ch] = day[i][idx.tod] * week * channel_scale[ch] + u.at(i, ch);
            }
        }
    }
    TrafficSeries::new(
        Tensor::new(vec![steps, n, c], values)?,
        spec.start_timestamp,
        spec.interval_seconds,
        Some(dist),
    )
}

/// `(1 − coupling)·I + coupling·G`, `G` the row-normalized Gaussian
/// proximity kernel without self-loops.
fn mixing_matrix(dist: &Tensor, coupling: f64, bandwidth: f64) -> Tensor {
    let n = dist.rows();
    let mut k = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let w: Vec<f64> = (0..n)
            .map(|j| {
                if i == j {
                    0.0
                } else {
                    (-(dist.at(i, j) / bandwidth).powi(2)).exp()
                }
            })
            .collect();
        let s: f64 = w.iter().sum();
        for j in 0..n {
            let g = if s > 0.0 { w[j] / s } else { 0.0 };
            let id = if i == j { 1.0 - coupling } else { 0.0 };
            k.set(i, j, id + coupling * g);
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_nodes: 4,
            steps: 500,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small(3)).unwrap();
        let b = synth_generate(&small(3)).unwrap();
        let c = synth_generate(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn noiseless_is_daily_periodic() {
        let mut spec = small(1);
        spec.components.noise = 0.0;
        spec.components.weekly = 0.0;
        let s = synth_generate(&spec).unwrap();
        let per_step = s.n_nodes() * s.channels();
        let d = s.values.data();
        for i in 0..(s.steps() - 96) * per_step {
            assert_eq!(d[i], d[i + 96 * per_step]);
        }
    }

    #[test]
    fn distances_and_mixing() {
        let s = synth_generate(&small(2)).unwrap();
        let d = s.distances.unwrap();
        for i in 0..4 {
            assert_eq!(d.at(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(d.at(i, j), d.at(j, i));
            }
        }
        let k = mixing_matrix(&d, 0.5, 4.0);
        for i in 0..4 {
            assert!((k.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((k.at(i, i) - 0.5).abs() < 1e-15);
        }
        assert_eq!(mixing_matrix(&d, 0.0, 4.0), Tensor::identity(4));
    }

    #[test]
    fn rejects_single_node() {
        let spec = SynthSpec { n_nodes: 1, ..small(0) };
        assert!(synth_generate(&spec).is_err());
    }
}
