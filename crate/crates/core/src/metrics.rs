//! MAE, RMSE and MAPE per forecast step, with a text table that parses
//! back losslessly.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, RaglError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_HORIZONS: [usize; 3] = [3, 6, 12];
/// Entries whose truth magnitude is below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// One-based forecast step.
    pub horizon: usize,
    pub metrics: ErrorMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    /// Over every forecast step.
    pub average: ErrorMetrics,
    /// Number of windows evaluated.
    pub samples: usize,
    /// Entries excluded from MAPE by the truth floor.
    pub mape_masked: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct StepSums {
    abs: f64,
    sq: f64,
    ape: f64,
    count: usize,
    ape_count: usize,
}

impl StepSums {
    fn merge(&mut self, o: &StepSums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.ape += o.ape;
        self.count += o.count;
        self.ape_count += o.ape_count;
    }

    fn finish(&self) -> ErrorMetrics {
        let n = self.count.max(1) as f64;
        ErrorMetrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.ape_count == 0 {
                0.0
            } else {
                100.0 * self.ape / self.ape_count as f64
            },
        }
    }
}

/// Accumulates errors per forecast step over batches of predictions laid
/// out `rows × (T'·C)`, column `t·C + c`.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    horizon_out: usize,
    channels: usize,
    steps: Vec<StepSums>,
    samples: usize,
    masked: usize,
}

impl MetricsAccumulator {
    pub fn new(horizon_out: usize, channels: usize) -> Self {
        Self {
            horizon_out,
            channels,
            steps: vec![StepSums::default(); horizon_out],
            samples: 0,
            masked: 0,
        }
    }

    pub fn add(&mut self, pred: &Tensor, truth: &Tensor, samples: usize) -> Result<()> {
        let width = self.horizon_out * self.channels;
        if pred.shape() != truth.shape() || pred.cols() != width {
            return Err(dim_err(
                "metrics",
                format!("prediction {:?}, truth {:?}, expected width {width}", pred.shape(), truth.shape()),
            ));
        }
        for (i, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            let s = &mut self.steps[(i % width) / self.channels];
            let e = p - t;
            s.abs += e.abs();
            s.sq += e * e;
            s.count += 1;
            if t.abs() < MAPE_FLOOR {
                self.masked += 1;
            } else {
                s.ape += (e / t).abs();
                s.ape_count += 1;
            }
        }
        self.samples += samples;
        Ok(())
    }

    pub fn average_mae(&self) -> f64 {
        self.total().finish().mae
    }

    fn total(&self) -> StepSums {
        let mut t = StepSums::default();
        for s in &self.steps {
            t.merge(s);
        }
        t
    }

    pub fn report(&self, horizons: &[usize]) -> Result<MetricsReport> {
        let rows = horizons
            .iter()
            .map(|&h| {
                if h == 0 || h > self.horizon_out {
                    return Err(RaglError::Config(format!(
                        "horizon {h} outside 1..={}",
                        self.horizon_out
                    )));
                }
                Ok(HorizonMetrics {
                    horizon: h,
                    metrics: self.steps[h - 1].finish(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport {
            horizons: rows,
            average: self.total().finish(),
            samples: self.samples,
            mape_masked: self.masked,
        })
    }
}

/// One-shot report for `N × T' × C` (or any `rows × (T'·C)`) tensors.
pub fn compute_metrics(pred: &Tensor, truth: &Tensor, horizon_out: usize, horizons: &[usize]) -> Result<MetricsReport> {
    let width = truth.len() / truth.shape()[0].max(1);
    if horizon_out == 0 || width % horizon_out != 0 {
        return Err(dim_err("metrics", format!("row width {width} for {horizon_out} steps")));
    }
    let channels = width / horizon_out;
    let rows = truth.shape()[0];
    let mut acc = MetricsAccumulator::new(horizon_out, channels);
    let p = Tensor::matrix(rows, width, pred.data().to_vec())
        .map_err(|_| dim_err("metrics", "prediction and truth sizes differ"))?;
    acc.add(&p, &truth.clone().reshape(&[rows, width])?, 1)?;
    acc.report(horizons)
}

const MODEL_LABEL: &str = "RAGL";

impl MetricsReport {
    /// Table with one row of results: MAE, RMSE and MAPE for each horizon,
    /// then the average, followed by a line of sample counts.
    pub fn to_table(&self) -> String {
        let mut head = vec!["Model".to_string()];
        let mut row = vec![MODEL_LABEL.to_string()];
        let blocks = self
            .horizons
            .iter()
            .map(|h| (format!("Horizon {}", h.horizon), h.metrics))
            .chain(std::iter::once(("Average".to_string(), self.average)));
        for (label, m) in blocks {
            for (name, v, pct) in [("MAE", m.mae, ""), ("RMSE", m.rmse, ""), ("MAPE", m.mape, "%")] {
                head.push(format!("{label} {name}"));
                row.push(format!("{v}{pct}"));
            }
        }
        format!(
            "| {} |\n| {} |\n| {} |\nsamples {} mape_masked {}\n",
            head.join(" | "),
            head.iter().map(|_| "---").collect::<Vec<_>>().join(" | "),
            row.join(" | "),
            self.samples,
            self.mape_masked
        )
    }

    /// Short human-readable summary.
    pub fn to_pretty(&self) -> String {
        let mut out = format!("{:<12}{:>10}{:>10}{:>10}\n", "", "MAE", "RMSE", "MAPE");
        let rows = self
            .horizons
            .iter()
            .map(|h| (format!("Horizon {}", h.horizon), h.metrics))
            .chain(std::iter::once(("Average".to_string(), self.average)));
        for (label, m) in rows {
            out.push_str(&format!(
                "{:<12}{:>10.4}{:>10.4}{:>9.2}%\n",
                label, m.mae, m.rmse, m.mape
            ));
        }
        out
    }

    pub fn parse_table(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() != 4 {
            return Err(RaglError::Parse(format!("metrics table has {} lines, expected 4", lines.len())));
        }
        let cells = |l: &str| -> Vec<String> {
            l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
        };
        let head = cells(lines[0]);
        let row = cells(lines[2]);
        if head.len() != row.len() || head.len() < 4 || (head.len() - 1) % 3 != 0 {
            return Err(RaglError::Parse("metrics table header and row disagree".into()));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim_end_matches('%')
                .parse()
                .map_err(|_| RaglError::Parse(format!("bad metric value `{s}`")))
        };
        let mut horizons = Vec::new();
        let mut average = None;
        for b in 0..(head.len() - 1) / 3 {
            let i = 1 + 3 * b;
            let label = head[i]
                .strip_suffix(" MAE")
                .ok_or_else(|| RaglError::Parse(format!("unexpected column `{}`", head[i])))?;
            let m = ErrorMetrics {
                mae: num(&row[i])?,
                rmse: num(&row[i + 1])?,
                mape: num(&row[i + 2])?,
            };
            if label == "Average" {
                average = Some(m);
            } else {
                let h = label
                    .strip_prefix("Horizon ")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| RaglError::Parse(format!("unexpected column `{}`", head[i])))?;
                horizons.push(HorizonMetrics { horizon: h, metrics: m });
            }
        }
        let tail: Vec<&str> = lines[3].split_whitespace().collect();
        let count = |key: &str| -> Result<usize> {
            tail.iter()
                .position(|t| *t == key)
                .and_then(|i| tail.get(i + 1))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| RaglError::Parse(format!("missing `{key}` count")))
        };
        Ok(Self {
            horizons,
            average: average.ok_or_else(|| RaglError::Parse("missing average columns".into()))?,
            samples: count("samples")?,
            mape_masked: count("mape_masked")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction() {
        let t = Tensor::full(&[3, 12], 7.0);
        let r = compute_metrics(&t, &t, 12, &DEFAULT_HORIZONS).unwrap();
        assert_eq!(r.average, ErrorMetrics { mae: 0.0, rmse: 0.0, mape: 0.0 });
        assert!(r.horizons.iter().all(|h| h.metrics.mae == 0.0));
    }

    #[test]
    fn unit_offset_on_four() {
        let truth = Tensor::full(&[2, 12], 4.0);
        let pred = truth.map(|v| v + 1.0);
        let r = compute_metrics(&pred, &truth, 12, &DEFAULT_HORIZONS).unwrap();
        for m in r.horizons.iter().map(|h| h.metrics).chain([r.average]) {
            assert_eq!(m, ErrorMetrics { mae: 1.0, rmse: 1.0, mape: 25.0 });
        }
    }

    #[test]
    fn per_step_values() {
        // two steps, one channel; step 1 errors {1, 3}, step 2 errors {2, 2}
        let truth = Tensor::from_rows(&[&[10.0, 20.0], &[10.0, 0.0]]);
        let pred = Tensor::from_rows(&[&[11.0, 22.0], &[7.0, 2.0]]);
        let r = compute_metrics(&pred, &truth, 2, &[1, 2]).unwrap();
        let s1 = r.horizons[0].metrics;
        assert_eq!(s1.mae, 2.0);
        assert_eq!(s1.rmse, 5.0f64.sqrt());
        assert!((s1.mape - 20.0).abs() < 1e-12);
        let s2 = r.horizons[1].metrics;
        assert_eq!((s2.mae, s2.rmse), (2.0, 2.0));
        assert!((s2.mape - 10.0).abs() < 1e-12);
        assert_eq!(r.mape_masked, 1);
        assert_eq!(r.average.mae, 2.0);
    }

    #[test]
    fn rmse_dominates_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let t = Tensor::uniform(&[5, 12], 0.0, 100.0, &mut rng);
            let p = Tensor::uniform(&[5, 12], 0.0, 100.0, &mut rng);
            let r = compute_metrics(&p, &t, 12, &DEFAULT_HORIZONS).unwrap();
            for m in r.horizons.iter().map(|h| h.metrics).chain([r.average]) {
                assert!(m.rmse >= m.mae);
            }
        }
    }

    #[test]
    fn table_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::uniform(&[8, 12], 0.0, 100.0, &mut rng);
        let p = Tensor::uniform(&[8, 12], 0.0, 100.0, &mut rng);
        let r = compute_metrics(&p, &t, 12, &DEFAULT_HORIZONS).unwrap();
        let text = r.to_table();
        assert!(text.contains("Horizon 6 RMSE"));
        assert_eq!(MetricsReport::parse_table(&text).unwrap(), r);
        assert!(MetricsReport::parse_table("| a |").is_err());
    }

    #[test]
    fn horizon_out_of_range() {
        let t = Tensor::full(&[1, 4], 1.0);
        assert!(compute_metrics(&t, &t, 4, &[3, 6]).is_err());
    }
}
