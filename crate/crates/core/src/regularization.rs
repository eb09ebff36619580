//! Stochastic shared embeddings.
//!
//! During training each node keeps its own embedding row with probability
//! `1 − p`; otherwise the row is replaced by the row of a node drawn
//! uniformly from all `N` nodes (itself included). In expectation row `i`
//! becomes `p·ē + (1 − p)·e_i`, where `ē` is the column mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaglError, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SseConfig {
    pub p: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl SseConfig {
    pub fn validate(&self) -> Result<()> {
        validate_probability(self.p)
    }
}

pub(crate) fn validate_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RaglError::Config(format!(
            "replacement probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

/// One realized perturbation: the Bernoulli mask and the replacement index
/// drawn for every node. `replacement[i]` is meaningful only where
/// `mask[i]` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SseDraw {
    pub mask: Vec<bool>,
    pub replacement: Vec<usize>,
}

impl SseDraw {
    /// No node replaced.
    pub fn identity(n: usize) -> Self {
        Self {
            mask: vec![false; n],
            replacement: (0..n).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Self {
        let mut mask = Vec::with_capacity(n);
        let mut replacement = Vec::with_capacity(n);
        for i in 0..n {
            let m = rng.gen_bool(p);
            mask.push(m);
            replacement.push(if m { rng.gen_range(0..n) } else { i });
        }
        Self { mask, replacement }
    }

    pub fn n_nodes(&self) -> usize {
        self.mask.len()
    }

    /// Row of the embedding table that node `i` reads.
    pub fn source(&self, i: usize) -> usize {
        if self.mask[i] {
            self.replacement[i]
        } else {
            i
        }
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|i| self.source(i)).collect()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mask.len() != n || self.replacement.len() != n {
            return Err(RaglError::Config(format!(
                "embedding draw covers {} nodes, model has {n}",
                self.mask.len()
            )));
        }
        if let Some(&bad) = self.replacement.iter().find(|&&r| r >= n) {
            return Err(RaglError::Index {
                what: "replacement node",
                index: bad,
                size: n,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SsePerturbation {
    pub output: Tensor,
    pub draw: SseDraw,
}

pub fn sse_perturb(e_node: &Tensor, cfg: &SseConfig) -> Result<SsePerturbation> {
    cfg.validate()?;
    let n = e_node.rows();
    if n == 0 {
        return Err(RaglError::Precondition("embedding table has no rows".into()));
    }
    let draw = match cfg.mode {
        Mode::Evaluation => SseDraw::identity(n),
        Mode::Training => SseDraw::sample(n, cfg.p, &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let output = tensor::gather_rows(e_node, &draw.sources())?;
    Ok(SsePerturbation { output, draw })
}

/// Closed-form mean of [`sse_perturb`]: `p·ē + (1 − p)·e_i` per row.
pub fn sse_expectation(e_node: &Tensor, p: f64) -> Tensor {
    let n = e_node.rows();
    let c = e_node.cols();
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(e_node.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = e_node.as_matrix();
    for i in 0..n {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v = p * m + (1.0 - p) * *v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng)
    }

    fn train(p: f64, seed: u64) -> SseConfig {
        SseConfig {
            p,
            seed,
            mode: Mode::Training,
        }
    }

    #[test]
    fn p_zero_is_identity() {
        let e = table(10, 3, 1);
        let out = sse_perturb(&e, &train(0.0, 7)).unwrap();
        assert_eq!(out.output, e);
        assert!(out.draw.mask.iter().all(|&m| !m));
    }

    #[test]
    fn p_one_rows_come_from_input() {
        let e = table(10, 3, 2);
        let out = sse_perturb(&e, &train(1.0, 8)).unwrap();
        for i in 0..10 {
            assert!((0..10).any(|j| out.output.row(i) == e.row(j)));
            assert_eq!(out.output.row(i), e.row(out.draw.replacement[i]));
        }
    }

    #[test]
    fn evaluation_mode_ignores_p() {
        let e = table(6, 2, 3);
        let cfg = SseConfig {
            p: 1.0,
            seed: 1,
            mode: Mode::Evaluation,
        };
        assert_eq!(sse_perturb(&e, &cfg).unwrap().output, e);
    }

    #[test]
    fn bad_probability_rejected() {
        let e = table(3, 2, 4);
        assert!(matches!(sse_perturb(&e, &train(1.5, 0)), Err(RaglError::Config(_))));
        assert!(matches!(sse_perturb(&e, &train(-0.1, 0)), Err(RaglError::Config(_))));
    }

    #[test]
    fn same_seed_same_draw() {
        let e = table(20, 4, 5);
        let a = sse_perturb(&e, &train(0.4, 99)).unwrap();
        let b = sse_perturb(&e, &train(0.4, 99)).unwrap();
        assert_eq!(a.draw, b.draw);
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn expectation_closed_forms() {
        let e = Tensor::from_rows(&[&[0.0], &[2.0]]);
        assert_eq!(sse_expectation(&e, 0.5).data(), &[0.5, 1.5]);
        let t = table(5, 3, 6);
        assert_eq!(sse_expectation(&t, 0.0), t);
        let full = sse_expectation(&t, 1.0);
        for i in 1..5 {
            for (a, b) in full.row(0).iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn column_mean_preserved_on_average() {
        let e = table(12, 3, 7);
        let draws = 20_000;
        let mut acc = vec![0.0; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..draws {
            let d = SseDraw::sample(12, 0.5, &mut rng);
            for i in 0..12 {
                for (a, v) in acc.iter_mut().zip(e.row(d.source(i))) {
                    *a += v;
                }
            }
        }
        for c in 0..3 {
            let truth: f64 = (0..12).map(|i| e.at(i, c)).sum::<f64>() / 12.0;
            let got = acc[c] / (draws as f64 * 12.0);
            assert!((got - truth).abs() < 5e-3, "col {c}: {got} vs {truth}");
        }
    }
}
