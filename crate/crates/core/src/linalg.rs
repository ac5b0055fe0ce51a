//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Symmetrizes in place: `(A + Aᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute asymmetry relative to the largest absolute entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(sv)
}

pub fn trace_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).sum()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

/// Number of singular values above `rel_tol` times the largest.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Singular value soft-thresholding: the proximal map of `threshold·‖·‖_tr`.
///
/// Returns the thresholded matrix and its nonzero singular values (descending).
pub fn singular_value_threshold(m: &DMatrix<f64>, threshold: f64) -> (DMatrix<f64>, Vec<f64>) {
    let (rows, cols) = m.shape();
    if m.is_empty() {
        return (m.clone(), Vec::new());
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut out = DMatrix::zeros(rows, cols);
    let mut kept = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - threshold.max(0.0);
        if shrunk <= 0.0 {
            continue;
        }
        kept.push(shrunk);
        out.ger(shrunk, &u.column(k), &vt.row(k).transpose(), 1.0);
    }
    kept.sort_by(|a, b| b.total_cmp(a));
    (out, kept)
}

/// Cholesky factorization with diagonal jitter escalation.
///
/// Tries the plain matrix first, then adds `1e-12·tr(A)` to the diagonal and
/// multiplies by ten on every failure up to `1e-6·tr(A)`. Returns the factor and
/// the jitter that was added (0 when none was needed).
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok((ch, 0.0));
    }
    let trace = a.trace().abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * trace;
    while jitter <= 1e-6 * trace * (1.0 + 1e-9) {
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = shifted.cholesky() {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "cholesky failed on a {}x{} system even with jitter 1e-6·trace",
        a.nrows(),
        a.ncols()
    )))
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}
