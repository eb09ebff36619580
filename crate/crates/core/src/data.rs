//! Series files, chronological splits, sliding windows, normalization and
//! geographic adjacency.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::embedding::{steps_per_day, TimeIndex};
use crate::error::{dim_err, RaglError, Result};
use crate::graph_conv::SparseAdjacency;
use crate::tensor::Tensor;

pub const SERIES_MAGIC: &[u8; 4] = b"RAGL";
pub const SERIES_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 4 + 4 + 4 + 8 + 4 + 4 + 8;

/// Observations `steps × N × C` with their calendar anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub values: Tensor,
    pub start_timestamp: i64,
    pub interval_seconds: u32,
    pub distances: Option<Tensor>,
}

impl TrafficSeries {
    pub fn new(
        values: Tensor,
        start_timestamp: i64,
        interval_seconds: u32,
        distances: Option<Tensor>,
    ) -> Result<Self> {
        let s = Self {
            values,
            start_timestamp,
            interval_seconds,
            distances,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.shape().len() != 3 {
            return Err(dim_err(
                "series",
                format!("values must be steps × nodes × channels, got {:?}", self.values.shape()),
            ));
        }
        steps_per_day(self.interval_seconds)?;
        if let Some(i) = self.values.data().iter().position(|v| !v.is_finite()) {
            return Err(RaglError::NonFiniteData { what: "series values", index: i });
        }
        if let Some(d) = &self.distances {
            let n = self.n_nodes();
            if d.shape() != [n, n] {
                return Err(dim_err("series", format!("distances {:?} for {n} nodes", d.shape())));
            }
            if let Some(i) = d.data().iter().position(|v| !v.is_finite()) {
                return Err(RaglError::NonFiniteData { what: "distances", index: i });
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, step: usize, node: usize, channel: usize) -> f64 {
        let (n, c) = (self.n_nodes(), self.channels());
        self.values.data()[(step * n + node) * c + channel]
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start_timestamp + step as i64 * self.interval_seconds as i64
    }
}

/// Size in bytes of a series file with the given extents.
pub fn series_file_size(n: u64, steps: u64, c: u64, with_distances: bool) -> u64 {
    let payload = steps * n * c * 4;
    let dist = if with_distances { n * n * 4 } else { 0 };
    HEADER_BYTES + payload + 1 + dist
}

pub fn write_series<W: Write>(series: &TrafficSeries, w: &mut W) -> Result<()> {
    w.write_all(SERIES_MAGIC)?;
    w.write_u32::<LittleEndian>(SERIES_VERSION)?;
    w.write_u32::<LittleEndian>(series.n_nodes() as u32)?;
    w.write_u64::<LittleEndian>(series.steps() as u64)?;
    w.write_u32::<LittleEndian>(series.channels() as u32)?;
    w.write_u32::<LittleEndian>(series.interval_seconds)?;
    w.write_i64::<LittleEndian>(series.start_timestamp)?;
    for &v in series.values.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    match &series.distances {
        Some(d) => {
            w.write_u8(1)?;
            for &v in d.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

pub fn read_series(bytes: &[u8]) -> Result<TrafficSeries> {
    let total = bytes.len() as u64;
    if total < HEADER_BYTES {
        return Err(RaglError::Truncated {
            what: "series header",
            expected: HEADER_BYTES,
            actual: total,
        });
    }
    if &bytes[..4] != SERIES_MAGIC {
        return Err(RaglError::BadMagic {
            expected: String::from_utf8_lossy(SERIES_MAGIC).into(),
            found: String::from_utf8_lossy(&bytes[..4]).into(),
        });
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>()?;
    if version != SERIES_VERSION {
        return Err(RaglError::Version(version));
    }
    let n = r.read_u32::<LittleEndian>()? as u64;
    let steps = r.read_u64::<LittleEndian>()?;
    let c = r.read_u32::<LittleEndian>()? as u64;
    let interval = r.read_u32::<LittleEndian>()?;
    let start = r.read_i64::<LittleEndian>()?;
    let no_dist = series_file_size(n, steps, c, false);
    if total < no_dist {
        return Err(RaglError::Truncated {
            what: "series payload",
            expected: no_dist,
            actual: total,
        });
    }
    let count = (steps * n * c) as usize;
    let mut values = vec![0.0f64; count];
    for v in values.iter_mut() {
        *v = r.read_f32::<LittleEndian>()? as f64;
    }
    let flag = r.read_u8()?;
    let distances = match flag {
        0 => None,
        1 => {
            let expected = series_file_size(n, steps, c, true);
            if total < expected {
                return Err(RaglError::Truncated {
                    what: "distance block",
                    expected,
                    actual: total,
                });
            }
            let mut d = vec![0.0f64; (n * n) as usize];
            for v in d.iter_mut() {
                *v = r.read_f32::<LittleEndian>()? as f64;
            }
            Some(Tensor::matrix(n as usize, n as usize, d)?)
        }
        other => return Err(RaglError::Parse(format!("distance flag {other} is neither 0 nor 1"))),
    };
    if !r.is_empty() {
        return Err(RaglError::Parse(format!("{} trailing bytes after series", r.len())));
    }
    TrafficSeries::new(
        Tensor::new(vec![steps as usize, n as usize, c as usize], values)?,
        start,
        interval,
        distances,
    )
}

pub fn load_series(path: &Path) -> Result<TrafficSeries> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_series(&bytes)
}

pub fn save_series(series: &TrafficSeries, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(series_file_size(
        series.n_nodes() as u64,
        series.steps() as u64,
        series.channels() as u64,
        series.distances.is_some(),
    ) as usize);
    write_series(series, &mut buf)?;
    crate::checkpoint::atomic_write(path, &buf)
}

/// Text fixture: a header `N steps C interval start`, then one line of
/// `N·C` values per step.
pub fn parse_text_series(text: &str) -> Result<TrafficSeries> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| RaglError::Parse("empty series text".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(RaglError::Parse(format!("header needs 5 fields, found {}", fields.len())));
    }
    let num = |i: usize| -> Result<u64> {
        fields[i]
            .parse()
            .map_err(|_| RaglError::Parse(format!("bad header field `{}`", fields[i])))
    };
    let (n, steps, c, interval) = (num(0)? as usize, num(1)? as usize, num(2)? as usize, num(3)?);
    let start: i64 = fields[4]
        .parse()
        .map_err(|_| RaglError::Parse(format!("bad start timestamp `{}`", fields[4])))?;
    let mut values = Vec::with_capacity(n * steps * c);
    for (s, line) in lines.enumerate() {
        let before = values.len();
        for tok in line.split_whitespace() {
            values.push(
                tok.parse::<f64>()
                    .map_err(|_| RaglError::Parse(format!("step {s}: bad value `{tok}`")))?,
            );
        }
        if values.len() - before != n * c {
            return Err(RaglError::Parse(format!(
                "step {s} has {} values, expected {}",
                values.len() - before,
                n * c
            )));
        }
    }
    if values.len() != n * steps * c {
        return Err(RaglError::Parse(format!(
            "{} steps of data, header says {steps}",
            values.len() / (n * c).max(1)
        )));
    }
    TrafficSeries::new(Tensor::new(vec![steps, n, c], values)?, start, interval as u32, None)
}

pub fn format_text_series(series: &TrafficSeries) -> String {
    let (n, c) = (series.n_nodes(), series.channels());
    let mut out = format!(
        "{} {} {} {} {}\n",
        n,
        series.steps(),
        c,
        series.interval_seconds,
        series.start_timestamp
    );
    for s in 0..series.steps() {
        let row = &series.values.data()[s * n * c..(s + 1) * n * c];
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Step counts per split. Train and validation are rounded; test takes the
/// remainder.
pub fn split_steps(steps: usize, r: SplitRatios) -> Result<[usize; 3]> {
    let parts = [r.train, r.val, r.test];
    if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(RaglError::Config(format!(
            "split ratios {:?} must be in [0, 1] and sum to 1",
            parts
        )));
    }
    let train = ((r.train * steps as f64).round() as usize).min(steps);
    let val = ((r.val * steps as f64).round() as usize).min(steps - train);
    Ok([train, val, steps - train - val])
}

pub fn window_count(split_steps: usize, t_in: usize, t_out: usize) -> usize {
    (split_steps + 1).saturating_sub(t_in + t_out)
}

/// One forecasting unit: `N × T × C` input, `N × T' × C` target.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Tensor,
    pub target: Tensor,
    pub time_index: TimeIndex,
}

/// Stride-1 windows over a contiguous range of series steps.
#[derive(Debug, Clone)]
pub struct WindowSet {
    series: Arc<TrafficSeries>,
    first_step: usize,
    steps: usize,
    t_in: usize,
    t_out: usize,
}

impl WindowSet {
    pub fn new(
        series: Arc<TrafficSeries>,
        first_step: usize,
        steps: usize,
        t_in: usize,
        t_out: usize,
    ) -> Result<Self> {
        if t_in == 0 || t_out == 0 {
            return Err(RaglError::Config("input and output horizons must be positive".into()));
        }
        if first_step + steps > series.steps() {
            return Err(RaglError::Config(format!(
                "steps {first_step}..{} exceed series length {}",
                first_step + steps,
                series.steps()
            )));
        }
        Ok(Self {
            series,
            first_step,
            steps,
            t_in,
            t_out,
        })
    }

    pub fn len(&self) -> usize {
        window_count(self.steps, self.t_in, self.t_out)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn series(&self) -> &TrafficSeries {
        &self.series
    }

    pub fn first_step(&self) -> usize {
        self.first_step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizons(&self) -> (usize, usize) {
        (self.t_in, self.t_out)
    }

    /// Series step where window `k`'s input begins.
    pub fn input_start(&self, k: usize) -> usize {
        self.first_step + k
    }

    pub fn target_start(&self, k: usize) -> usize {
        self.input_start(k) + self.t_in
    }

    pub fn time_index(&self, k: usize) -> Result<TimeIndex> {
        let last = self.input_start(k) + self.t_in - 1;
        TimeIndex::from_timestamp(self.series.timestamp(last), self.series.interval_seconds)
    }

    pub fn get(&self, k: usize) -> Result<WindowSample> {
        if k >= self.len() {
            return Err(RaglError::Index {
                what: "window",
                index: k,
                size: self.len(),
            });
        }
        Ok(WindowSample {
            input: self.block(self.input_start(k), self.t_in)?,
            target: self.block(self.target_start(k), self.t_out)?,
            time_index: self.time_index(k)?,
        })
    }

    /// Steps `[start, start + len)` rearranged to `N × len × C`.
    fn block(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c) = (self.series.n_nodes(), self.series.channels());
        let mut out = vec![0.0; n * len * c];
        for node in 0..n {
            for t in 0..len {
                for ch in 0..c {
                    out[(node * len + t) * c + ch] = self.series.at(start + t, node, ch);
                }
            }
        }
        Tensor::new(vec![n, len, c], out)
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Chronological split on raw steps, then stride-1 windows within each split.
pub fn split_and_window(
    series: Arc<TrafficSeries>,
    ratios: SplitRatios,
    t_in: usize,
    t_out: usize,
) -> Result<Splits> {
    let [a, b, c] = split_steps(series.steps(), ratios)?;
    if window_count(a, t_in, t_out) == 0 {
        return Err(RaglError::Config(format!(
            "training split of {a} steps is shorter than one window of {} steps",
            t_in + t_out
        )));
    }
    for (name, steps) in [("validation", b), ("test", c)] {
        if steps > 0 && window_count(steps, t_in, t_out) == 0 {
            log::warn!("{name} split of {steps} steps holds no complete window");
        }
    }
    Ok(Splits {
        train: WindowSet::new(series.clone(), 0, a, t_in, t_out)?,
        val: WindowSet::new(series.clone(), a, b, t_in, t_out)?,
        test: WindowSet::new(series, a + b, c, t_in, t_out)?,
    })
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics over the steps that appear in the training inputs. A
    /// zero-variance channel gets `std = 1`.
    pub fn fit(train: &WindowSet) -> Result<Self> {
        if train.is_empty() {
            return Err(RaglError::Precondition("training set has no windows".into()));
        }
        let series = train.series();
        let (n, c) = (series.n_nodes(), series.channels());
        let covered = train.len() - 1 + train.horizons().0;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let count = (covered * n) as f64;
        for s in train.first_step()..train.first_step() + covered {
            for node in 0..n {
                for ch in 0..c {
                    mean[ch] += series.at(s, node, ch);
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for s in train.first_step()..train.first_step() + covered {
            for node in 0..n {
                for ch in 0..c {
                    let d = series.at(s, node, ch) - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .enumerate()
            .map(|(ch, s)| {
                let sd = (s / count).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    log::warn!("channel {ch} has zero variance in the training inputs; using std 1");
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a tensor whose last axis is the channel axis.
    pub fn normalize(&self, t: &Tensor) -> Tensor {
        self.apply(t, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        self.apply(t, |v, m, s| v * s + m)
    }

    fn apply(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.channels();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % c], self.std[i % c]))
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    }

    /// Input normalized, target left raw.
    pub fn normalize_window(&self, w: &WindowSample) -> WindowSample {
        WindowSample {
            input: self.normalize(&w.input),
            target: w.target.clone(),
            time_index: w.time_index,
        }
    }
}

/// Fits statistics on `train` and returns every set's windows with
/// normalized inputs.
pub fn normalize(train: &WindowSet, all: &[&WindowSet]) -> Result<(Vec<Vec<WindowSample>>, NormStats)> {
    let stats = NormStats::fit(train)?;
    let sets = all
        .iter()
        .map(|set| {
            (0..set.len())
                .map(|k| set.get(k).map(|w| stats.normalize_window(&w)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sets, stats))
}

/// Standard deviation of the off-diagonal distances.
pub fn distance_std(distances: &Tensor) -> f64 {
    let n = distances.rows();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| distances.at(i, j))
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Thresholded Gaussian kernel `exp(−r²/σ²)`, entries below `threshold` set
/// to zero.
pub fn gaussian_kernel(distances: &Tensor, sigma: f64, threshold: f64) -> Result<Tensor> {
    let n = distances.rows();
    if distances.shape() != [n, n] {
        return Err(dim_err("geo_adjacency", format!("distances {:?}", distances.shape())));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(RaglError::Config(format!("kernel width {sigma} must be positive")));
    }
    if let Some(i) = distances.data().iter().position(|&r| !(r >= 0.0)) {
        return Err(RaglError::Precondition(format!("distance at flat index {i} is negative")));
    }
    Ok(distances.map(|r| {
        let w = (-(r * r) / (sigma * sigma)).exp();
        if w >= threshold {
            w
        } else {
            0.0
        }
    }))
}

/// Row-normalized sparse geographic adjacency. `sigma` defaults to the
/// standard deviation of the distances; rows left empty by the threshold
/// receive a self-loop.
pub fn geo_adjacency(distances: &Tensor, sigma: Option<f64>, threshold: f64) -> Result<SparseAdjacency> {
    let sigma = sigma.unwrap_or_else(|| distance_std(distances));
    let k = gaussian_kernel(distances, sigma, threshold)?;
    let n = k.rows();
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = k
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(j, &w)| (j, w))
                .collect();
            if row.is_empty() {
                row.push((i, 1.0));
            }
            let s: f64 = row.iter().map(|(_, w)| w).sum();
            row.iter_mut().for_each(|(_, w)| *w /= s);
            row
        })
        .collect();
    SparseAdjacency::from_rows(n, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(steps: usize, n: usize, c: usize) -> TrafficSeries {
        let data = (0..steps * n * c).map(|i| i as f64).collect();
        TrafficSeries::new(Tensor::new(vec![steps, n, c], data).unwrap(), 0, 900, None).unwrap()
    }

    #[test]
    fn binary_round_trip_is_byte_identical() {
        let mut s = ramp(10, 3, 2);
        s.distances = Some(Tensor::from_rows(&[&[0.0, 1.5, 2.0], &[1.5, 0.0, 3.0], &[2.0, 3.0, 0.0]]));
        let mut a = Vec::new();
        write_series(&s, &mut a).unwrap();
        assert_eq!(a.len() as u64, series_file_size(3, 10, 2, true));
        let back = read_series(&a).unwrap();
        assert_eq!(back, s);
        let mut b = Vec::new();
        write_series(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_errors_are_distinct() {
        let s = ramp(4, 2, 1);
        let mut bytes = Vec::new();
        write_series(&s, &mut bytes).unwrap();

        let cut = &bytes[..bytes.len() - 5];
        match read_series(cut) {
            Err(RaglError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, series_file_size(2, 4, 1, false));
                assert_eq!(actual, cut.len() as u64);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_series(&bad), Err(RaglError::BadMagic { .. })));
        let mut nan = bytes.clone();
        let off = HEADER_BYTES as usize + 4;
        nan[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_series(&nan),
            Err(RaglError::NonFiniteData { index: 1, .. })
        ));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(read_series(&ver), Err(RaglError::Version(9))));
    }

    #[test]
    fn text_round_trip() {
        let s = ramp(3, 2, 2);
        let back = parse_text_series(&format_text_series(&s)).unwrap();
        assert_eq!(back, s);
        assert!(parse_text_series("2 1 1 900 0\n1\n").is_err());
        assert!(parse_text_series("2 2 1 900 0\n1 2\n").is_err());
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_steps(100, SplitRatios::default()).unwrap(), [60, 20, 20]);
        assert_eq!(split_steps(35_040, SplitRatios::default()).unwrap(), [21_024, 7_008, 7_008]);
        let all = SplitRatios { train: 1.0, val: 0.0, test: 0.0 };
        assert_eq!(split_steps(100, all).unwrap(), [100, 0, 0]);
        assert!(split_steps(100, SplitRatios { train: 0.5, val: 0.2, test: 0.2 }).is_err());
        assert_eq!(window_count(60, 12, 12), 37);
        assert_eq!(window_count(23, 12, 12), 0);
    }

    #[test]
    fn windows_are_adjacent_slices() {
        let series = Arc::new(ramp(100, 2, 1));
        let sp = split_and_window(series.clone(), SplitRatios::default(), 12, 12).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (37, 0, 0));
        let short = split_and_window(series.clone(), SplitRatios { train: 0.6, val: 0.2, test: 0.2 }, 5, 5).unwrap();
        assert_eq!((short.train.len(), short.val.len(), short.test.len()), (51, 11, 11));
        let w = short.val.get(3).unwrap();
        let k0 = short.val.input_start(3);
        assert_eq!(k0, 63);
        assert_eq!(short.val.target_start(3), k0 + 5);
        for node in 0..2 {
            for t in 0..5 {
                assert_eq!(w.input.data()[node * 5 + t], series.at(k0 + t, node, 0));
                assert_eq!(w.target.data()[node * 5 + t], series.at(k0 + 5 + t, node, 0));
            }
        }
        assert!(short.val.get(11).is_err());
        assert!(matches!(
            split_and_window(series, SplitRatios::default(), 40, 40),
            Err(RaglError::Config(_))
        ));
    }

    #[test]
    fn time_index_uses_last_input_step() {
        let series = Arc::new(ramp(200, 1, 1));
        let set = WindowSet::new(series, 0, 200, 7, 1).unwrap();
        // step 6 is 01:30 on Thursday 1970-01-01
        assert_eq!(set.time_index(0).unwrap(), TimeIndex { tod: 6, dow: 3 });
    }

    #[test]
    fn normalization_cases() {
        let series = Arc::new(ramp(60, 2, 2));
        let sp = split_and_window(series.clone(), SplitRatios::default(), 4, 4).unwrap();
        let stats = NormStats::fit(&sp.train).unwrap();
        let w = sp.test.get(0).unwrap();
        let back = stats.denormalize(&stats.normalize(&w.input));
        assert!(back.max_abs_diff(&w.input) <= 1e-12);
        assert_eq!(stats.normalize_window(&w).target, w.target);

        let mut shifted = (*series).clone();
        let cut = 36 * 4;
        for v in &mut shifted.values.data_mut()[cut..] {
            *v += 1000.0;
        }
        let sp2 = split_and_window(Arc::new(shifted), SplitRatios::default(), 4, 4).unwrap();
        assert_eq!(NormStats::fit(&sp2.train).unwrap(), stats);

        let flat = Arc::new(
            TrafficSeries::new(Tensor::full(&[30, 2, 1], 5.0), 0, 900, None).unwrap(),
        );
        let set = WindowSet::new(flat, 0, 30, 3, 3).unwrap();
        let st = NormStats::fit(&set).unwrap();
        assert_eq!(st.std, vec![1.0]);
        assert_eq!(st.normalize(&set.get(0).unwrap().input).max_abs(), 0.0);
    }

    #[test]
    fn normalize_stats_use_training_inputs() {
        let series = Arc::new(ramp(20, 1, 1));
        let set = WindowSet::new(series, 0, 12, 3, 2).unwrap();
        // inputs cover steps 0..10
        let st = NormStats::fit(&set).unwrap();
        assert!((st.mean[0] - 4.5).abs() < 1e-12);
        let (sets, st2) = normalize(&set, &[&set]).unwrap();
        assert_eq!(st2, st);
        assert_eq!(sets[0].len(), set.len());
    }

    #[test]
    fn geo_kernel_cases() {
        let d = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let k = gaussian_kernel(&d, 1.0, 0.0).unwrap();
        assert_eq!(k.at(0, 0), 1.0);
        assert_eq!(k.at(0, 1), k.at(1, 0));
        assert!((k.at(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        let cut = gaussian_kernel(&d, 1.0, 0.5).unwrap();
        assert_eq!(cut.at(0, 1), 0.0);

        let a = geo_adjacency(&d, Some(1.0), 0.0).unwrap().to_dense();
        for i in 0..2 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!((a.at(0, 1) - a.at(1, 0)).abs() < 1e-15);

        let iso = geo_adjacency(&d, Some(1.0), 1.5).unwrap().to_dense();
        assert_eq!(iso, Tensor::identity(2));
        assert!(gaussian_kernel(&d, 0.0, 0.1).is_err());
        assert!(gaussian_kernel(&Tensor::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]), 1.0, 0.1).is_err());
    }

    #[test]
    fn default_sigma_is_distance_std() {
        let d = Tensor::from_rows(&[&[0.0, 1.0, 3.0], &[1.0, 0.0, 2.0], &[3.0, 2.0, 0.0]]);
        // off-diagonal values 1,3,1,2,3,2: mean 2, variance 2/3
        assert!((distance_std(&d) - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let a = geo_adjacency(&d, None, 0.0).unwrap();
        let b = geo_adjacency(&d, Some((2.0f64 / 3.0).sqrt()), 0.0).unwrap();
        assert_eq!(a.to_dense(), b.to_dense());
    }
}
