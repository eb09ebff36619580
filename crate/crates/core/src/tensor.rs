//! Dense row-major `f64` tensors and the matrix primitives the model is
//! built from.
//!
//! Everything here is a pure function over borrowed inputs. Two-dimensional
//! kernels treat a tensor as `rows × cols`; higher-rank tensors only appear
//! at the data boundary (windows are `N × T × C`) and are flattened before
//! they reach a kernel.

use std::fmt;

use rand::Rng;

use crate::error::{dim_err, RaglError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build a matrix from nested rows. Panics on ragged input; meant for
    /// fixtures and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; for a matrix, the row count.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing extents; for a matrix, the column count.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// View as a 2-D matrix `[rows, product(rest)]`.
    pub fn as_matrix(&self) -> Self {
        Self {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(RaglError::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let c = self.cols();
        if start > end || end > c {
            return Err(dim_err(
                "slice_cols",
                format!("range {start}..{end} of {c} columns"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows() * w);
        for i in 0..self.rows() {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Self {
            shape: vec![self.rows(), w],
            data,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Trans {
    No,
    Yes,
}

/// General product `op(a)·op(b)` where `op` optionally transposes. No copy
/// is made for a transposed operand; strides are swapped instead.
pub fn gemm(a: &Tensor, ta: Trans, b: &Tensor, tb: Trans) -> Result<Tensor> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, rsa, csa) = match ta {
        Trans::No => (ar, ac, ac as isize, 1),
        Trans::Yes => (ac, ar, 1, ac as isize),
    };
    let (k2, n, rsb, csb) = match tb {
        Trans::No => (br, bc, bc as isize, 1),
        Trans::Yes => (bc, br, 1, bc as isize),
    };
    if k != k2 {
        return Err(dim_err(
            "matmul",
            format!(
                "inner extents differ: [{m}x{k}] · [{k2}x{n}] (transposes {ta:?}, {tb:?})"
            ),
        ));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: extents and strides above describe exactly the buffers of
        // `a`, `b` and `out`, which are live and non-overlapping.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::matrix(m, n, out)
}

/// Raw-slice product `out (+)= op(a)·op(b)` for `m×k · k×n`, where `a` and
/// `b` are stored row-major in their untransposed layout. Callers guarantee
/// the extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    out: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above bounds every index touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, Trans::No, b, Trans::No)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let c = m.cols();
    let mut out = m.as_matrix();
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn relu(m: &Tensor) -> Tensor {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Divide each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows(m: &Tensor, eps: f64) -> Tensor {
    let c = m.cols();
    let mut out = m.as_matrix();
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// `m + 1·biasᵀ`: adds a length-`cols` vector to every row.
pub fn add_row_vector(m: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = m.cols();
    if bias.len() != c {
        return Err(dim_err(
            "add_row_vector",
            format!("bias of length {} for {} columns", bias.len(), c),
        ));
    }
    let mut out = m.as_matrix();
    if c > 0 {
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
    }
    Ok(out)
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
        return Err(dim_err(
            "concat_cols",
            format!("row counts {} and {}", rows, bad.rows()),
        ));
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(rows, width, data)
}

/// Row `i` of the output is row `idx[i]` of `src`.
pub fn gather_rows(src: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let c = src.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= src.rows() {
            return Err(RaglError::Index {
                what: "gather_rows",
                index: i,
                size: src.rows(),
            });
        }
        data.extend_from_slice(src.row(i));
    }
    Tensor::matrix(idx.len(), c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(i, t) * b.at(t, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
        let out = matmul(&Tensor::identity(3), &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn small_hand_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, naive(&a, &b));
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(&[7, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
    }

    #[test]
    fn transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng);
        let nt = gemm(&a, Trans::No, &b, Trans::Yes).unwrap();
        assert!(nt.max_abs_diff(&naive(&a, &b.transpose())) <= 1e-12);
        let tn = gemm(&a, Trans::Yes, &a, Trans::No).unwrap();
        assert!(tn.max_abs_diff(&naive(&a.transpose(), &a)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(RaglError::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[&[5.0, 5.0, 5.0]]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 2f64.ln()]]));
        assert!((s.at(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.at(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        let big = softmax_rows(&Tensor::from_rows(&[&[1000.0, 1000.0]]));
        assert!(big.is_finite());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(
            relu(&Tensor::from_rows(&[&[-1.0, 0.0, 2.0]])).data(),
            &[0.0, 0.0, 2.0]
        );
        assert_eq!(relu(&Tensor::full(&[2, 2], -3.0)), Tensor::zeros(&[2, 2]));
        let pos = Tensor::full(&[2, 2], 0.5);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn l2_normalize_examples() {
        let unit = Tensor::from_rows(&[&[1.0, 0.0, 0.0]]);
        assert_eq!(l2_normalize_rows(&unit, 1e-12), unit);
        let n = l2_normalize_rows(&Tensor::from_rows(&[&[3.0, 4.0]]), 1e-12);
        assert!((n.at(0, 0) - 0.6).abs() < 1e-15 && (n.at(0, 1) - 0.8).abs() < 1e-15);
        let z = Tensor::zeros(&[1, 3]);
        assert_eq!(l2_normalize_rows(&z, 1e-12), z);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::from_rows(&[&[1.0], &[2.0]]);
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]);
        let c = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.slice_cols(0, 1).unwrap(), a);
        assert_eq!(c.slice_cols(1, 3).unwrap(), b);
    }

    #[test]
    fn gather_out_of_range() {
        let a = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            gather_rows(&a, &[0, 2]),
            Err(RaglError::Index { index: 2, .. })
        ));
    }
}
