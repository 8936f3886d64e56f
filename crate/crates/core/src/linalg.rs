//! Symmetric eigendecomposition, energy-threshold rank selection and
//! orthonormal basis merging.

use thiserror::Error;

use crate::tensor::{dot, DenseMatrix};

/// Off-diagonal Frobenius norm target, relative to `||B||_F`.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Negative eigenvalues down to `-PSD_CLAMP * max(1, ||B||_F)` clamp to zero.
const PSD_CLAMP: f64 = 1e-10;
/// Residual norm below which a merged column counts as already spanned.
pub const MERGE_DROP_TOL: f64 = 1e-8;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("eigenvalue {value} is below the PSD clamp threshold")]
    NegativeEigenvalue { value: f64 },
    #[error("spectrum has zero total energy (dead mode)")]
    DeadMode,
    #[error("energy threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("spectrum not usable: {0}")]
    BadSpectrum(String),
    #[error("row mismatch: memory has {memory} rows, new basis has {new}")]
    RowMismatch { memory: usize, new: usize },
}

/// Eigenpairs of a symmetric matrix, values descending, vectors as columns.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl EigenResult {
    /// The leading `k` eigenvectors.
    pub fn top_vectors(&self, k: usize) -> DenseMatrix {
        self.vectors.leading_columns(k)
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input is symmetrized as `(B + B^T) / 2` first. Eigenvalues come back
/// sorted descending (ties keep their diagonal order) and each eigenvector is
/// signed so that its first nonzero component is positive.
pub fn sym_eig(b: &DenseMatrix) -> Result<EigenResult, LinalgError> {
    let n = b.rows();
    if b.cols() != n {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: b.cols(),
        });
    }
    if !b.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let mut a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (b.get(i, j) + b.get(j, i)));
    let mut v = DenseMatrix::identity(n);
    let norm = a.frobenius_norm();
    let target = JACOBI_TOL * norm;

    let mut sweeps = 0;
    while norm > 0.0 && off_diagonal_norm(&a) >= target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep ascending original index
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    for c in 0..n {
        let lead = (0..n).map(|r| vectors.get(r, c)).find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for r in 0..n {
                let x = vectors.get(r, c);
                vectors.set(r, c, -x);
            }
        }
    }
    Ok(EigenResult { values, vectors })
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// `A <- J^T A J`, `V <- V J` for the plane rotation in `(p, q)`.
fn rotate(a: &mut DenseMatrix, v: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// [`sym_eig`] for positive semidefinite input: tiny negative eigenvalues
/// clamp to zero, larger ones are reported as an error.
pub fn psd_eig(b: &DenseMatrix) -> Result<EigenResult, LinalgError> {
    let mut eig = sym_eig(b)?;
    let tol = PSD_CLAMP * b.frobenius_norm().max(1.0);
    for v in &mut eig.values {
        if *v < 0.0 {
            if *v < -tol {
                return Err(LinalgError::NegativeEigenvalue { value: *v });
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn check_threshold(eps: f64) -> Result<(), LinalgError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(LinalgError::BadThreshold(eps));
    }
    Ok(())
}

fn check_spectrum(values: &[f64]) -> Result<(), LinalgError> {
    if values.is_empty() {
        return Err(LinalgError::BadSpectrum("empty".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(LinalgError::BadSpectrum("negative value".into()));
    }
    Ok(())
}

/// Smallest `r` whose leading values hold at least an `eps` fraction of the
/// total. `eps = 1` keeps every component, zero-energy ones included.
pub fn energy_rank(values: &[f64], eps: f64) -> Result<usize, LinalgError> {
    check_threshold(eps)?;
    check_spectrum(values)?;
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(LinalgError::DeadMode);
    }
    if eps >= 1.0 {
        return Ok(values.len());
    }
    let mut cum = 0.0;
    for (r, v) in values.iter().enumerate() {
        cum += v;
        if cum / total >= eps {
            return Ok(r + 1);
        }
    }
    Ok(values.len())
}

/// Rank selection against a memory-projected spectrum.
///
/// Returns the smallest `r` in `0..=n` such that
/// `(sum(full) - sum(proj[r..])) / sum(full) >= eps`, i.e. the components
/// discarded are the projected ones past the first `r`. Zero means the
/// projected spectrum has nothing worth keeping.
pub fn energy_rank_cl(full: &[f64], proj: &[f64], eps: f64) -> Result<usize, LinalgError> {
    if full.iter().chain(proj).any(|v| !v.is_finite()) || !eps.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    check_threshold(eps)?;
    if full.len() != proj.len() {
        return Err(LinalgError::BadSpectrum(format!(
            "full spectrum has {} values, projected {}",
            full.len(),
            proj.len()
        )));
    }
    let total: f64 = full.iter().sum();
    if total <= 0.0 {
        return Err(LinalgError::DeadMode);
    }
    let n = proj.len();
    // tail[r] = sum of proj[r..]
    let mut tail = vec![0.0; n + 1];
    for r in (0..n).rev() {
        tail[r] = tail[r + 1] + proj[r];
    }
    for (r, t) in tail.iter().enumerate() {
        if (total - t) / total >= eps {
            return Ok(r);
        }
    }
    Ok(n)
}

/// Extends the orthonormal columns of `prev` with the directions of `new`
/// not already spanned (modified Gram-Schmidt, two passes). The first
/// columns of the result are exactly `prev`.
pub fn orth_merge(prev: &DenseMatrix, new: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = prev.rows();
    if new.rows() != n {
        return Err(LinalgError::RowMismatch {
            memory: n,
            new: new.rows(),
        });
    }
    let mut basis: Vec<Vec<f64>> = (0..prev.cols()).map(|j| prev.column(j)).collect();
    let keep = basis.len();
    for j in 0..new.cols() {
        let mut v = new.column(j);
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < MERGE_DROP_TOL {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    debug_assert!(basis.len() >= keep);
    DenseMatrix::from_columns(n, &basis).map_err(|e| LinalgError::BadSpectrum(e.to_string()))
}

/// Orthonormal basis of the orthogonal complement of `span(memory)` in `R^n`.
pub fn orthogonal_complement(memory: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = memory.rows();
    let k = memory.cols();
    let full = orth_merge(memory, &DenseMatrix::identity(n))?;
    Ok(DenseMatrix::from_fn(n, full.cols() - k, |i, j| full.get(i, k + j)))
}

/// `||A^T A - I||_max`.
pub fn orthonormality_error(a: &DenseMatrix) -> f64 {
    let g = a.matmul_tn(a).expect("A^T A is conformable");
    g.max_abs_diff(&DenseMatrix::identity(a.cols()))
}
