//! Input embedding: series projection, calendar dictionaries and node
//! embeddings, concatenated per node in the order
//! `[input | time-of-day | day-of-week | node]`.
//!
//! A window `N × T × C` is flattened per node time-major: column
//! `t·C + c` holds step `t`, channel `c`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, RaglError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DAYS_PER_WEEK: usize = 7;

/// Number of samples per day for a given sampling interval.
pub fn steps_per_day(interval_seconds: u32) -> Result<usize> {
    if interval_seconds == 0 || SECONDS_PER_DAY % interval_seconds as i64 != 0 {
        return Err(RaglError::Config(format!(
            "sampling interval {interval_seconds}s does not divide a day"
        )));
    }
    Ok((SECONDS_PER_DAY / interval_seconds as i64) as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub tid: Tensor,
    pub diw: Tensor,
    pub node: Tensor,
}

/// Calendar position of a window's last input step. Days of the week count
/// from Monday = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeIndex {
    pub tod: usize,
    pub dow: usize,
}

impl TimeIndex {
    /// From a Unix timestamp in seconds (UTC). 1970-01-01 was a Thursday.
    pub fn from_timestamp(ts: i64, interval_seconds: u32) -> Result<Self> {
        steps_per_day(interval_seconds)?;
        let secs = ts.rem_euclid(SECONDS_PER_DAY);
        let days = ts.div_euclid(SECONDS_PER_DAY);
        Ok(Self {
            tod: (secs / interval_seconds as i64) as usize,
            dow: (days + 3).rem_euclid(DAYS_PER_WEEK as i64) as usize,
        })
    }
}

/// `W·x + b` applied to each node's flattened window.
pub fn embed_inputs(window: &Tensor, tables: &EmbeddingTables) -> Result<Tensor> {
    let flat_width = tables.w_in.rows();
    if window.shape().len() != 3 || window.cols() != flat_width {
        return Err(dim_err(
            "embed_inputs",
            format!(
                "window {:?} does not flatten to {} values per node",
                window.shape(),
                flat_width
            ),
        ));
    }
    let flat = window.as_matrix();
    let xw = tensor::matmul(&flat, &tables.w_in)?;
    tensor::add_row_vector(&xw, &tables.b_in)
}

pub fn time_lookup(idx: TimeIndex, tables: &EmbeddingTables) -> Result<(Tensor, Tensor)> {
    let tid = tensor::gather_rows(&tables.tid, &[checked(idx.tod, tables.tid.rows(), "time-of-day")?])?;
    let diw = tensor::gather_rows(&tables.diw, &[checked(idx.dow, tables.diw.rows(), "day-of-week")?])?;
    let tid_len = tid.len();
    let diw_len = diw.len();
    Ok((tid.reshape(&[tid_len])?, diw.reshape(&[diw_len])?))
}

fn checked(i: usize, size: usize, what: &'static str) -> Result<usize> {
    if i >= size {
        return Err(RaglError::Index { what, index: i, size });
    }
    Ok(i)
}

/// Per-node concatenation; the time vectors are broadcast to every node.
pub fn assemble_state(
    e_in: &Tensor,
    e_tid: &Tensor,
    e_diw: &Tensor,
    e_node_used: &Tensor,
) -> Result<Tensor> {
    let n = e_in.rows();
    if e_node_used.rows() != n {
        return Err(dim_err(
            "assemble_state",
            format!("{n} input rows, {} node rows", e_node_used.rows()),
        ));
    }
    let tid = broadcast(e_tid, n)?;
    let diw = broadcast(e_diw, n)?;
    tensor::concat_cols(&[e_in, &tid, &diw, e_node_used])
}

fn broadcast(v: &Tensor, n: usize) -> Result<Tensor> {
    let row = v.data().to_vec();
    let data = std::iter::repeat_n(row, n).flatten().collect();
    Tensor::matrix(n, v.len(), data)
}

/// Batched embedding on a tape. `x` is `(B·N) × (T·C)`; `tod`/`dow` hold one
/// index per sample; `node_rows` holds one embedding-table row per node
/// (identity, or the SSE replacement sources).
pub struct EmbeddingVars {
    pub w_in: Var,
    pub b_in: Var,
    pub tid: Var,
    pub diw: Var,
    pub node: Var,
}

pub fn embed_on_tape(
    tape: &mut Tape,
    vars: &EmbeddingVars,
    x: Var,
    tod: &[usize],
    dow: &[usize],
    node_rows: &[usize],
) -> Result<Var> {
    let n = node_rows.len();
    let batch = tod.len();
    if dow.len() != batch || tape.value(x).rows() != batch * n {
        return Err(dim_err(
            "embed",
            format!(
                "{} input rows for {batch} samples of {n} nodes",
                tape.value(x).rows()
            ),
        ));
    }
    let e_in = tape.linear(x, vars.w_in, vars.b_in)?;
    let per_row = |idx: &[usize]| -> Vec<usize> {
        idx.iter().flat_map(|&i| std::iter::repeat_n(i, n)).collect()
    };
    let tid = tape.gather_rows(vars.tid, per_row(tod))?;
    let diw = tape.gather_rows(vars.diw, per_row(dow))?;
    let node_idx: Vec<usize> = (0..batch).flat_map(|_| node_rows.iter().copied()).collect();
    let node = tape.gather_rows(vars.node, node_idx)?;
    tape.concat_cols(&[e_in, tid, diw, node])
}
