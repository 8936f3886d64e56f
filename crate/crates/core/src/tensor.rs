//! Dense order-d tensors and matrices, mode unfolding and mode products.
//!
//! Tensors are stored row-major with mode 0 slowest. Modes are 0-based
//! throughout the crate. The mode-`k` unfolding of a tensor with dims
//! `n_0 x .. x n_{d-1}` is the `n_k x prod_{j != k} n_j` matrix whose column
//! index enumerates the remaining modes in ascending order (last mode
//! fastest). Writing the tensor as `outer x n_k x inner` with
//! `outer = prod_{j<k} n_j` and `inner = prod_{j>k} n_j`, entry
//! `(o, i, c)` lands at row `i`, column `o * inner + c`.

use rayon::prelude::*;
use thiserror::Error;

/// Highest tensor order handled (batch, height, width, channels).
pub const MAX_ORDER: usize = 4;

/// Work size (multiply-adds) above which matrix kernels split rows across threads.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },
    #[error("tensor order {0} unsupported (1..={MAX_ORDER})")]
    UnsupportedOrder(usize),
    #[error("data length {len} does not match shape {dims:?}")]
    LengthMismatch { dims: Vec<usize>, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mode {0} appears more than once")]
    DuplicateMode(usize),
}

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::LengthMismatch {
                dims: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from column vectors of equal length `rows`.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self, TensorError> {
        if let Some(bad) = columns.iter().find(|c| c.len() != rows) {
            return Err(TensorError::ShapeMismatch(format!(
                "column of length {} in {rows}-row matrix",
                bad.len()
            )));
        }
        Ok(Self::from_fn(rows, columns.len(), |i, j| columns[j][i]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// The first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        let k = k.min(self.cols);
        Self::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(TensorError::ShapeMismatch(format!(
                "{}x{} minus {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        run_rows(&mut out, n, self.rows * self.cols * n, kernel);
        Ok(Self {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul_nt {}x{} by ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.rows;
        let kdim = self.cols;
        let mut out = vec![0.0; self.rows * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[i * kdim..(i + 1) * kdim];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, &other.data[j * kdim..(j + 1) * kdim]);
            }
        };
        run_rows(&mut out, n, self.rows * kdim * n, kernel);
        Ok(Self {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul_tn ({}x{})^T by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let m = self.cols;
        let n = other.cols;
        let mut out = vec![0.0; m * n];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            for k in 0..self.rows {
                let a = self.data[k * m + i];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        run_rows(&mut out, n, self.rows * m * n, kernel);
        Ok(Self {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Frobenius inner product.
    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        dot(&self.data, &other.data)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies `kernel` to every output row. Each row's arithmetic is
/// independent of the split, so threaded and sequential runs agree bitwise.
fn run_rows<F>(out: &mut [f64], row_len: usize, work: usize, kernel: F)
where
    F: Fn((usize, &mut [f64])) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(row_len).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(row_len).enumerate().for_each(kernel);
    }
}

/// Row-major order-d tensor of 64-bit floats, `1 <= d <= 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        check_order(dims.len())?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(TensorError::LengthMismatch {
                dims,
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let len = dims.iter().product();
        Self::new(dims, vec![0.0; len])
    }

    /// Builds a tensor from a function of the multi-index.
    pub fn from_fn(
        dims: Vec<usize>,
        mut f: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self, TensorError> {
        check_order(dims.len())?;
        let len: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for m in (0..dims.len()).rev() {
                idx[m] += 1;
                if idx[m] < dims[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(dims, self.data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self, TensorError> {
        if self.dims != other.dims {
            return Err(TensorError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    /// Rows `start..start+count` along mode 0.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self, TensorError> {
        if start + count > self.dims[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "slice {start}..{} of mode-0 extent {}",
                start + count,
                self.dims[0]
            )));
        }
        let stride: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = count;
        Ok(Self {
            dims,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        })
    }

    /// Gathers mode-0 slices by index.
    pub fn gather_outer(&self, indices: &[usize]) -> Self {
        let stride: usize = self.dims[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Self { dims, data }
    }
}

fn check_order(order: usize) -> Result<(), TensorError> {
    if order == 0 || order > MAX_ORDER {
        return Err(TensorError::UnsupportedOrder(order));
    }
    Ok(())
}

fn check_mode(dims: &[usize], mode: usize) -> Result<(), TensorError> {
    if mode >= dims.len() {
        return Err(TensorError::ModeOutOfRange {
            mode,
            order: dims.len(),
        });
    }
    Ok(())
}

/// `(outer, n_mode, inner)` extents around `mode`.
fn split_dims(dims: &[usize], mode: usize) -> (usize, usize, usize) {
    let outer = dims[..mode].iter().product();
    let inner = dims[mode + 1..].iter().product();
    (outer, dims[mode], inner)
}

/// Mode-`mode` unfolding (see module docs for the column order).
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<DenseMatrix, TensorError> {
    check_mode(&t.dims, mode)?;
    let (outer, n, inner) = split_dims(&t.dims, mode);
    let cols = outer * inner;
    let mut data = vec![0.0; n * cols];
    for o in 0..outer {
        for i in 0..n {
            let src = &t.data[(o * n + i) * inner..(o * n + i + 1) * inner];
            data[i * cols + o * inner..i * cols + (o + 1) * inner].copy_from_slice(src);
        }
    }
    Ok(DenseMatrix {
        rows: n,
        cols,
        data,
    })
}

/// Inverse of [`unfold`].
pub fn fold(m: &DenseMatrix, mode: usize, dims: &[usize]) -> Result<DenseTensor, TensorError> {
    check_order(dims.len())?;
    check_mode(dims, mode)?;
    let (outer, n, inner) = split_dims(dims, mode);
    if m.rows != n || m.cols != outer * inner {
        return Err(TensorError::ShapeMismatch(format!(
            "cannot fold {}x{} along mode {mode} into {dims:?}",
            m.rows, m.cols
        )));
    }
    let cols = m.cols;
    let mut data = vec![0.0; n * cols];
    for o in 0..outer {
        for i in 0..n {
            let src = &m.data[i * cols + o * inner..i * cols + (o + 1) * inner];
            data[(o * n + i) * inner..(o * n + i + 1) * inner].copy_from_slice(src);
        }
    }
    Ok(DenseTensor {
        dims: dims.to_vec(),
        data,
    })
}

/// `t x_mode u`: contracts mode `mode` of `t` with the columns of `u`.
pub fn mode_product(t: &DenseTensor, u: &DenseMatrix, mode: usize) -> Result<DenseTensor, TensorError> {
    check_mode(&t.dims, mode)?;
    let (outer, n, inner) = split_dims(&t.dims, mode);
    if u.cols != n {
        return Err(TensorError::ShapeMismatch(format!(
            "factor {}x{} against mode {mode} of extent {n}",
            u.rows, u.cols
        )));
    }
    let m = u.rows;
    let mut dims = t.dims.clone();
    dims[mode] = m;
    let mut data = vec![0.0; outer * m * inner];
    if inner == 1 {
        for o in 0..outer {
            let src = &t.data[o * n..(o + 1) * n];
            for a in 0..m {
                data[o * m + a] = dot(src, u.row(a));
            }
        }
    } else {
        for o in 0..outer {
            for a in 0..m {
                let dst = &mut data[(o * m + a) * inner..(o * m + a + 1) * inner];
                for (b, &w) in u.row(a).iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let src = &t.data[(o * n + b) * inner..(o * n + b + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
    }
    Ok(DenseTensor { dims, data })
}

/// Applies several mode products in ascending mode order.
pub fn multi_mode_product(
    t: &DenseTensor,
    factors: &[(&DenseMatrix, usize)],
) -> Result<DenseTensor, TensorError> {
    let mut order: Vec<&(&DenseMatrix, usize)> = factors.iter().collect();
    order.sort_by_key(|(_, mode)| *mode);
    for pair in order.windows(2) {
        if pair[0].1 == pair[1].1 {
            return Err(TensorError::DuplicateMode(pair[0].1));
        }
    }
    let mut out = t.clone();
    for (u, mode) in order {
        out = mode_product(&out, u, *mode)?;
    }
    Ok(out)
}

/// `X_(mode) X_(mode)^T` without materializing the unfolding.
pub fn mode_gram(t: &DenseTensor, mode: usize) -> Result<DenseMatrix, TensorError> {
    check_mode(&t.dims, mode)?;
    let (outer, n, inner) = split_dims(&t.dims, mode);
    let mut g = DenseMatrix::zeros(n, n);
    if inner == 1 && outer > 1 {
        // last mode: accumulate outer products of the length-n fibres
        for o in 0..outer {
            let fibre = &t.data[o * n..(o + 1) * n];
            for i in 0..n {
                let fi = fibre[i];
                if fi == 0.0 {
                    continue;
                }
                let row = &mut g.data[i * n..i * n + i + 1];
                for (gv, &fj) in row.iter_mut().zip(&fibre[..=i]) {
                    *gv += fi * fj;
                }
            }
        }
    } else {
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for o in 0..outer {
                    let a = &t.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                    let b = &t.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                    s += dot(a, b);
                }
                g.data[i * n + j] = s;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            g.data[j * n + i] = g.data[i * n + j];
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: Vec<usize>, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Column index for multi-index `idx` with `mode` removed, remaining
    /// modes ascending, last fastest. Written independently of `split_dims`.
    fn oracle_column(dims: &[usize], idx: &[usize], mode: usize) -> usize {
        let mut col = 0;
        for (m, (&i, &n)) in idx.iter().zip(dims).enumerate() {
            if m != mode {
                col = col * n + i;
            }
        }
        col
    }

    fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
        let total: usize = dims.iter().product();
        let mut idx = vec![0; dims.len()];
        for _ in 0..total {
            f(&idx);
            for m in (0..dims.len()).rev() {
                idx[m] += 1;
                if idx[m] < dims[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
    }

    #[test]
    fn unfold_order_two_mode_zero_is_identity() {
        let t = random_tensor(vec![3, 5], 1);
        let m = unfold(&t, 0).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 5));
        assert_eq!(m.data(), t.data());
    }

    #[test]
    fn unfold_of_zeros_is_zero() {
        let t = DenseTensor::zeros(vec![2, 3, 4]).unwrap();
        for mode in 0..3 {
            let m = unfold(&t, mode).unwrap();
            assert_eq!(m.rows(), t.dims()[mode]);
            assert_eq!(m.cols(), 24 / t.dims()[mode]);
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unfold_matches_index_enumeration() {
        let dims = vec![2, 3, 4];
        let t = DenseTensor::from_fn(dims.clone(), |ix| {
            (100 * ix[0] + 10 * ix[1] + ix[2]) as f64
        })
        .unwrap();
        let m = unfold(&t, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 8));
        for_each_index(&dims, |ix| {
            let col = oracle_column(&dims, ix, 1);
            assert_eq!(m.get(ix[1], col), t.get(ix));
        });
        for j in 0..3 {
            let mut row: Vec<i64> = m.row(j).iter().map(|&v| v as i64).collect();
            row.sort_unstable();
            let mut expect: Vec<i64> = (0..2)
                .flat_map(|i| (0..4).map(move |k| 100 * i + 10 * j as i64 + k))
                .collect();
            expect.sort_unstable();
            assert_eq!(row, expect);
        }
    }

    #[test]
    fn unfold_rejects_bad_mode() {
        let t = random_tensor(vec![2, 2], 0);
        assert!(matches!(
            unfold(&t, 2),
            Err(TensorError::ModeOutOfRange { mode: 2, order: 2 })
        ));
    }

    #[test]
    fn fold_inverts_unfold() {
        let t = random_tensor(vec![3, 4, 5], 7);
        let back = fold(&unfold(&t, 0).unwrap(), 0, t.dims()).unwrap();
        assert_eq!(back, t);
        let z = fold(&DenseMatrix::zeros(4, 15), 1, &[3, 4, 5]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fold_round_trip_order_four_all_modes() {
        let t = random_tensor(vec![2, 3, 4, 5], 11);
        for mode in 0..4 {
            assert_eq!(fold(&unfold(&t, mode).unwrap(), mode, t.dims()).unwrap(), t);
        }
    }

    #[test]
    fn fold_rejects_shape_mismatch() {
        let m = DenseMatrix::zeros(4, 10);
        assert!(matches!(
            fold(&m, 1, &[3, 4, 5]),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mode_product_identity_and_zero() {
        let t = random_tensor(vec![2, 3, 4], 3);
        for mode in 0..3 {
            let n = t.dims()[mode];
            assert_eq!(mode_product(&t, &DenseMatrix::identity(n), mode).unwrap(), t);
            let z = mode_product(&t, &DenseMatrix::zeros(2, n), mode).unwrap();
            assert_eq!(z.dims()[mode], 2);
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mode_product_matches_triple_loop() {
        let t = random_tensor(vec![2, 3, 4], 5);
        let u = random_matrix(5, 3, 6);
        let out = mode_product(&t, &u, 1).unwrap();
        assert_eq!(out.dims(), &[2, 5, 4]);
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for a in 0..5 {
                for k in 0..4 {
                    let mut s = 0.0;
                    for j in 0..3 {
                        s += u.get(a, j) * t.get(&[i, j, k]);
                    }
                    worst = worst.max((s - out.get(&[i, a, k])).abs());
                }
            }
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn mode_product_equals_fold_of_unfolded_product() {
        let t = random_tensor(vec![3, 2, 4, 2], 8);
        for mode in 0..4 {
            let u = random_matrix(3, t.dims()[mode], 9 + mode as u64);
            let direct = mode_product(&t, &u, mode).unwrap();
            let mut dims = t.dims().to_vec();
            dims[mode] = 3;
            let via = fold(&u.matmul(&unfold(&t, mode).unwrap()).unwrap(), mode, &dims).unwrap();
            assert!(direct.max_abs_diff(&via) <= 1e-12);
        }
    }

    #[test]
    fn mode_product_rejects_mismatch() {
        let t = random_tensor(vec![2, 3], 0);
        assert!(mode_product(&t, &DenseMatrix::zeros(2, 2), 1).is_err());
    }

    fn random_orthonormal(n: usize, r: usize, seed: u64) -> DenseMatrix {
        // Gram-Schmidt on random columns; test-local helper.
        let raw = random_matrix(n, r, seed);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..r {
            let mut v = raw.column(j);
            for _ in 0..2 {
                for c in &cols {
                    let p = dot(&v, c);
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
                }
            }
            let nrm = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= nrm);
            cols.push(v);
        }
        DenseMatrix::from_columns(n, &cols).unwrap()
    }

    #[test]
    fn multi_mode_identity_and_full_rank_round_trip() {
        let t = random_tensor(vec![3, 4, 5], 21);
        let ids: Vec<DenseMatrix> = t.dims().iter().map(|&n| DenseMatrix::identity(n)).collect();
        let pairs: Vec<(&DenseMatrix, usize)> = ids.iter().zip(0..).collect();
        assert_eq!(multi_mode_product(&t, &pairs).unwrap(), t);

        let us: Vec<DenseMatrix> = t
            .dims()
            .iter()
            .enumerate()
            .map(|(i, &n)| random_orthonormal(n, n, 30 + i as u64))
            .collect();
        let uts: Vec<DenseMatrix> = us.iter().map(DenseMatrix::transpose).collect();
        let core = multi_mode_product(&t, &uts.iter().zip(0..).collect::<Vec<_>>()).unwrap();
        let back = multi_mode_product(&core, &us.iter().zip(0..).collect::<Vec<_>>()).unwrap();
        assert!(back.max_abs_diff(&t) <= 1e-10);
    }

    #[test]
    fn multi_mode_matches_sequential_single_mode() {
        let t = random_tensor(vec![4, 3, 5, 2], 40);
        let us: Vec<DenseMatrix> = [(4, 2), (3, 2), (5, 3), (2, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(n, r))| random_orthonormal(n, r, 50 + i as u64).transpose())
            .collect();
        // pass out of order; the product sorts by mode
        let pairs = vec![(&us[2], 2), (&us[0], 0), (&us[3], 3), (&us[1], 1)];
        let got = multi_mode_product(&t, &pairs).unwrap();
        let mut seq = t.clone();
        for (i, u) in us.iter().enumerate() {
            seq = mode_product(&seq, u, i).unwrap();
        }
        assert_eq!(got.dims(), &[2, 2, 3, 1]);
        assert!(got.max_abs_diff(&seq) <= 1e-12);
    }

    #[test]
    fn multi_mode_rejects_duplicate_mode() {
        let t = random_tensor(vec![2, 2], 0);
        let i = DenseMatrix::identity(2);
        assert_eq!(
            multi_mode_product(&t, &[(&i, 1), (&i, 1)]),
            Err(TensorError::DuplicateMode(1))
        );
    }

    #[test]
    fn gram_matches_unfolded_product() {
        let t = random_tensor(vec![3, 4, 2, 5], 60);
        for mode in 0..4 {
            let x = unfold(&t, mode).unwrap();
            let expect = x.matmul_nt(&x).unwrap();
            assert!(mode_gram(&t, mode).unwrap().max_abs_diff(&expect) <= 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = random_matrix(7, 5, 1);
        let b = random_matrix(5, 6, 2);
        let c = a.matmul(&b).unwrap();
        assert!(a.matmul_nt(&b.transpose()).unwrap().max_abs_diff(&c) <= 1e-13);
        assert!(a.transpose().matmul_tn(&b).unwrap().max_abs_diff(&c) <= 1e-13);
    }

    #[test]
    fn tensor_rejects_bad_order_and_length() {
        assert!(matches!(
            DenseTensor::new(vec![1, 1, 1, 1, 1], vec![0.0]),
            Err(TensorError::UnsupportedOrder(5))
        ));
        assert!(matches!(
            DenseTensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=4)
    }

    proptest! {
        #[test]
        fn prop_fold_unfold_bijection(dims in dims_strategy(), seed in any::<u64>()) {
            let t = random_tensor(dims.clone(), seed);
            for mode in 0..dims.len() {
                let m = unfold(&t, mode).unwrap();
                prop_assert_eq!(&fold(&m, mode, &dims).unwrap(), &t);
            }
        }

        #[test]
        fn prop_mode_product_linear(dims in dims_strategy(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let t1 = random_tensor(dims.clone(), seed);
            let t2 = random_tensor(dims.clone(), seed.wrapping_add(1));
            let mode = (seed % dims.len() as u64) as usize;
            let u = random_matrix(3, dims[mode], seed.wrapping_add(2));
            let lhs = mode_product(&t1.lin_comb(a, &t2, b).unwrap(), &u, mode).unwrap();
            let rhs = mode_product(&t1, &u, mode).unwrap()
                .lin_comb(a, &mode_product(&t2, &u, mode).unwrap(), b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }

        #[test]
        fn prop_multi_mode_order_independent(dims in prop::collection::vec(1usize..5, 2..=4), seed in any::<u64>()) {
            let t = random_tensor(dims.clone(), seed);
            let us: Vec<DenseMatrix> = dims.iter().enumerate()
                .map(|(i, &n)| random_matrix(2, n, seed.wrapping_add(i as u64 + 1)))
                .collect();
            let forward = multi_mode_product(&t, &us.iter().zip(0..).collect::<Vec<_>>()).unwrap();
            let mut reversed = t.clone();
            for (i, u) in us.iter().enumerate().rev() {
                reversed = mode_product(&reversed, u, i).unwrap();
            }
            prop_assert!(forward.max_abs_diff(&reversed) <= 1e-10);
        }
    }
}
