//! Posterior mean estimation in basis coordinates.
//!
//! The mean is `ψ(m,n) = G_M(m)·B·G_N(n)ᵀ (+ b_m)` and `B` minimizes the
//! spectral elastic net objective
//!
//! ```text
//! ½ Σ_T (r − ψ)² + λ(1−α)/2 ‖B‖_F² + λα ‖B‖_tr
//! ```
//!
//! solved by monotone accelerated proximal gradient with backtracking. The
//! proximal step is singular value soft-thresholding. Row biases are refit in
//! closed form between proximal epochs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelBasis;
use crate::linalg;
use crate::par;

/// Partially observed matrix entries `(m, n, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseObservations {
    n_rows: usize,
    n_cols: usize,
    triples: Vec<(usize, usize, f64)>,
}

impl SparseObservations {
    pub fn new(n_rows: usize, n_cols: usize, triples: Vec<(usize, usize, f64)>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::invalid("observation set is empty"));
        }
        let mut seen: Vec<(usize, usize)> = Vec::with_capacity(triples.len());
        for &(m, n, r) in &triples {
            if m >= n_rows || n >= n_cols {
                return Err(Error::invalid(format!(
                    "observation ({m}, {n}) outside a {n_rows}x{n_cols} matrix"
                )));
            }
            if !r.is_finite() {
                return Err(Error::invalid(format!("observation ({m}, {n}) is not finite")));
            }
            seen.push((m, n));
        }
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!(
                "duplicate observation at ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            triples,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn triples(&self) -> &[(usize, usize, f64)] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn index(&self) -> Vec<(usize, usize)> {
        self.triples.iter().map(|&(m, n, _)| (m, n)).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.triples.iter().map(|t| t.2).collect()
    }

    /// Same index set with new values (aligned with `triples`).
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.triples.len() {
            return Err(Error::shape(format!(
                "{} values for {} observations",
                values.len(),
                self.triples.len()
            )));
        }
        let triples = self
            .triples
            .iter()
            .zip(values)
            .map(|(&(m, n, _), &v)| (m, n, v))
            .collect();
        Ok(Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            triples,
        })
    }
}

/// Regularization and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lambda: f64,
    pub alpha: f64,
    /// Noise variance; only the posterior covariance and the joint ranking
    /// objective use it directly.
    pub sigma2: f64,
    pub max_iter: usize,
    /// Relative stationarity tolerance.
    pub tol: f64,
    /// Rank of the factor GP baseline.
    pub factor_rank: usize,
    /// Trace bound `C` of the constrained form. Recorded only; the solver works
    /// with the equivalent penalty `λα`.
    pub trace_bound: Option<f64>,
    pub row_bias: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1.0,
            sigma2: 1.0,
            max_iter: 2000,
            tol: 1e-6,
            factor_rank: 10,
            trace_bound: None,
            row_bias: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::invalid(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if let Some(c) = self.trace_bound {
            if !(c >= 0.0) {
                return Err(Error::invalid("trace_bound must be nonnegative"));
            }
        }
        Ok(())
    }

    fn ridge_weight(&self) -> f64 {
        self.lambda * (1.0 - self.alpha)
    }

    fn trace_weight(&self) -> f64 {
        self.lambda * self.alpha
    }
}

/// Fitted mean function: parameter matrix, both bases and row biases.
#[derive(Debug, Clone)]
pub struct MeanModel {
    b_matrix: DMatrix<f64>,
    basis_m: Arc<KernelBasis>,
    basis_n: Arc<KernelBasis>,
    row_bias: DVector<f64>,
}

impl MeanModel {
    pub fn new(
        b_matrix: DMatrix<f64>,
        basis_m: Arc<KernelBasis>,
        basis_n: Arc<KernelBasis>,
        row_bias: DVector<f64>,
    ) -> Result<Self> {
        if b_matrix.shape() != (basis_m.dim(), basis_n.dim()) {
            return Err(Error::shape(format!(
                "B is {}x{} but the bases have dims {} and {}",
                b_matrix.nrows(),
                b_matrix.ncols(),
                basis_m.dim(),
                basis_n.dim()
            )));
        }
        if row_bias.len() != basis_m.rows() {
            return Err(Error::shape(format!(
                "{} row biases for {} rows",
                row_bias.len(),
                basis_m.rows()
            )));
        }
        if b_matrix.iter().chain(row_bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("model parameters are not finite".into()));
        }
        Ok(Self {
            b_matrix,
            basis_m,
            basis_n,
            row_bias,
        })
    }

    /// `B = 0`, no biases.
    pub fn zeros(basis_m: Arc<KernelBasis>, basis_n: Arc<KernelBasis>) -> Self {
        Self {
            b_matrix: DMatrix::zeros(basis_m.dim(), basis_n.dim()),
            row_bias: DVector::zeros(basis_m.rows()),
            basis_m,
            basis_n,
        }
    }

    pub fn b_matrix(&self) -> &DMatrix<f64> {
        &self.b_matrix
    }

    pub fn basis_m(&self) -> &Arc<KernelBasis> {
        &self.basis_m
    }

    pub fn basis_n(&self) -> &Arc<KernelBasis> {
        &self.basis_n
    }

    pub fn row_bias(&self) -> &DVector<f64> {
        &self.row_bias
    }

    pub fn n_rows(&self) -> usize {
        self.basis_m.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.basis_n.rows()
    }

    /// Noise-free scores `G_M(m)·B·G_Nᵀ` for every column of row `m` (no bias).
    pub fn score_row(&self, m: usize) -> Result<DVector<f64>> {
        if m >= self.n_rows() {
            return Err(Error::invalid(format!(
                "row {m} out of range for {} rows",
                self.n_rows()
            )));
        }
        let gm_row = self.basis_m.entries().row(m);
        let coeff = gm_row * &self.b_matrix; // 1 × D_N
        Ok(self.basis_n.entries() * coeff.transpose())
    }

    /// Dense `Ψ = G_M·B·G_Nᵀ` (no bias).
    pub fn dense_scores(&self) -> DMatrix<f64> {
        self.basis_m.entries() * &self.b_matrix * self.basis_n.entries().transpose()
    }
}

/// Diagnostics of a single fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub stationarity: f64,
    pub rank_of_b: usize,
    pub converged: bool,
}

/// `‖B‖_F²`, the squared Hilbert norm of the mean in basis coordinates.
pub fn hilbert_norm_sq(model: &MeanModel) -> f64 {
    linalg::frobenius_sq(model.b_matrix())
}

/// Sum of singular values.
pub fn trace_norm(b_matrix: &DMatrix<f64>) -> f64 {
    linalg::trace_norm(b_matrix)
}

/// `a·Σξᵢ² + b·Σξᵢ` over the singular values `ξ` of `B`.
pub fn spectral_elastic_net(b_matrix: &DMatrix<f64>, a: f64, b: f64) -> f64 {
    let sv = linalg::singular_values(b_matrix);
    a * sv.iter().map(|s| s * s).sum::<f64>() + b * sv.sum()
}

/// Kernel coefficients `A` (M×N) mapped to basis coordinates `B = G_Mᵀ·A·G_N`,
/// so that `G_M·B·G_Nᵀ = K_M·A·K_N`.
pub fn coefficients_to_basis(a: &DMatrix<f64>, g_m: &KernelBasis, g_n: &KernelBasis) -> DMatrix<f64> {
    g_m.entries().transpose() * a * g_n.entries()
}

/// Value of the spectral elastic net objective for `model` on `data`.
///
/// Residuals include the row biases when `h.row_bias` is set.
pub fn objective(model: &MeanModel, data: &SparseObservations, h: &Hyperparams) -> Result<f64> {
    check_shapes(data, model.basis_m(), model.basis_n())?;
    let design = Design::new(data, model.basis_m(), model.basis_n());
    let bias = if h.row_bias {
        model.row_bias().clone()
    } else {
        DVector::zeros(model.n_rows())
    };
    let resid = design.residuals(model.b_matrix(), &bias);
    let loss = 0.5 * resid.iter().map(|e| e * e).sum::<f64>();
    let b = model.b_matrix();
    Ok(loss
        + 0.5 * h.ridge_weight() * linalg::frobenius_sq(b)
        + h.trace_weight()
            * if h.trace_weight() > 0.0 {
                linalg::trace_norm(b)
            } else {
                0.0
            })
}

/// Row biases `b_m = mean over task m of (r − ψ)`; unseen rows get 0.
pub fn fit_row_bias(data: &SparseObservations, predictions_without_bias: &[f64]) -> Result<DVector<f64>> {
    if predictions_without_bias.len() != data.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} observations",
            predictions_without_bias.len(),
            data.len()
        )));
    }
    let mut sums = vec![0.0; data.n_rows()];
    let mut counts = vec![0usize; data.n_rows()];
    for (&(m, _, r), &p) in data.triples().iter().zip(predictions_without_bias) {
        sums[m] += r - p;
        counts[m] += 1;
    }
    Ok(DVector::from_iterator(
        data.n_rows(),
        sums.iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }),
    ))
}

/// Predictions `G_M(m)·B·G_N(n)ᵀ` (+ `b_m` when `include_bias`).
pub fn predict(model: &MeanModel, queries: &[(usize, usize)], include_bias: bool) -> Result<Vec<f64>> {
    let (rows, cols) = (model.n_rows(), model.n_cols());
    if let Some(&(m, n)) = queries.iter().find(|&&(m, n)| m >= rows || n >= cols) {
        return Err(Error::invalid(format!(
            "query ({m}, {n}) outside a {rows}x{cols} model"
        )));
    }
    let gmt = model.basis_m().entries().transpose();
    let gnt = model.basis_n().entries().transpose();
    let pt = model.b_matrix().tr_mul(&gmt);
    Ok(queries
        .iter()
        .map(|&(m, n)| {
            let base = pt.column(m).dot(&gnt.column(n));
            if include_bias {
                base + model.row_bias()[m]
            } else {
                base
            }
        })
        .collect())
}

/// Largest singular value of `G_Mᵀ·R·G_N`, the smallest trace weight at which
/// `B = 0` is optimal. With `center_rows` the residuals are taken after the
/// optimal row biases at `B = 0` (row means).
pub fn lambda_max(data: &SparseObservations, g_m: &KernelBasis, g_n: &KernelBasis, center_rows: bool) -> Result<f64> {
    check_shapes(data, g_m, g_n)?;
    let design = Design::new(data, g_m, g_n);
    let zero = DMatrix::zeros(g_m.dim(), g_n.dim());
    Ok(design.lambda_max_at_zero(&zero, center_rows).0)
}

fn check_shapes(data: &SparseObservations, g_m: &KernelBasis, g_n: &KernelBasis) -> Result<()> {
    if data.n_rows() != g_m.rows() || data.n_cols() != g_n.rows() {
        return Err(Error::shape(format!(
            "data is {}x{} but bases cover {} rows and {} columns",
            data.n_rows(),
            data.n_cols(),
            g_m.rows(),
            g_n.rows()
        )));
    }
    Ok(())
}

/// Observation index with transposed bases laid out for column access.
struct Design {
    rows: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
    n_rows: usize,
    gmt: DMatrix<f64>,
    gnt: DMatrix<f64>,
}

impl Design {
    fn new(data: &SparseObservations, g_m: &KernelBasis, g_n: &KernelBasis) -> Self {
        Self {
            rows: data.triples().iter().map(|t| t.0).collect(),
            cols: data.triples().iter().map(|t| t.1).collect(),
            values: data.values(),
            n_rows: data.n_rows(),
            gmt: g_m.entries().transpose(),
            gnt: g_n.entries().transpose(),
        }
    }

    fn predictions(&self, b: &DMatrix<f64>) -> Vec<f64> {
        let pt = b.tr_mul(&self.gmt);
        self.rows
            .iter()
            .zip(&self.cols)
            .map(|(&m, &n)| pt.column(m).dot(&self.gnt.column(n)))
            .collect()
    }

    /// `ψ + bias − r` at every observation.
    fn residuals(&self, b: &DMatrix<f64>, bias: &DVector<f64>) -> Vec<f64> {
        let mut out = self.predictions(b);
        for (k, e) in out.iter_mut().enumerate() {
            *e += bias[self.rows[k]] - self.values[k];
        }
        out
    }

    /// `G_Mᵀ·E·G_N` for the sparse residual matrix `E`.
    fn project(&self, resid: &[f64]) -> DMatrix<f64> {
        let mut yt = DMatrix::zeros(self.gnt.nrows(), self.n_rows);
        for (k, &e) in resid.iter().enumerate() {
            if e != 0.0 {
                yt.column_mut(self.rows[k]).axpy(e, &self.gnt.column(self.cols[k]), 1.0);
            }
        }
        &self.gmt * yt.transpose()
    }

    /// Subtracts each row's mean from its entries.
    fn center(&self, values: &mut [f64]) {
        let means = self.row_means(values);
        for (k, v) in values.iter_mut().enumerate() {
            *v -= means[self.rows[k]];
        }
    }

    fn row_means(&self, targets: &[f64]) -> DVector<f64> {
        let mut sums = vec![0.0; self.n_rows];
        let mut counts = vec![0usize; self.n_rows];
        for (k, &v) in targets.iter().enumerate() {
            sums[self.rows[k]] += v;
            counts[self.rows[k]] += 1;
        }
        DVector::from_iterator(
            self.n_rows,
            sums.iter()
                .zip(&counts)
                .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }),
        )
    }

    fn optimal_bias(&self, b: &DMatrix<f64>) -> DVector<f64> {
        let preds = self.predictions(b);
        let diff: Vec<f64> = self.values.iter().zip(&preds).map(|(r, p)| r - p).collect();
        self.row_means(&diff)
    }

    /// λ_max and the bias used for it, evaluated at `B = zero`.
    fn lambda_max_at_zero(&self, zero: &DMatrix<f64>, center_rows: bool) -> (f64, DVector<f64>) {
        let bias = if center_rows {
            self.optimal_bias(zero)
        } else {
            DVector::zeros(self.n_rows)
        };
        let resid = self.residuals(zero, &bias);
        if resid.iter().all(|&e| e == 0.0) {
            return (0.0, bias);
        }
        (linalg::spectral_norm(&self.project(&resid)), bias)
    }
}

/// Smooth + trace-norm objective in `B`.
///
/// With `center_rows` the row biases are eliminated exactly: for any `B` the
/// optimal bias is the closed-form row mean of `r − ψ`, which leaves per-row
/// centred residuals.
struct Composite<'a> {
    design: &'a Design,
    center_rows: bool,
    ridge: f64,
    trace_w: f64,
}

impl Composite<'_> {
    /// Residuals `ψ + b*(B) − r` (or `ψ − r` without biases).
    fn residuals(&self, b: &DMatrix<f64>) -> Vec<f64> {
        let mut resid: Vec<f64> = self
            .design
            .predictions(b)
            .iter()
            .zip(&self.design.values)
            .map(|(p, r)| p - r)
            .collect();
        if self.center_rows {
            self.design.center(&mut resid);
        }
        resid
    }

    fn smooth(&self, b: &DMatrix<f64>) -> f64 {
        let resid = self.residuals(b);
        0.5 * resid.iter().map(|e| e * e).sum::<f64>() + 0.5 * self.ridge * linalg::frobenius_sq(b)
    }

    /// `A·d`: the (row-centred) change in residuals along `d`.
    fn apply(&self, d: &DMatrix<f64>) -> Vec<f64> {
        let mut pd = self.design.predictions(d);
        if self.center_rows {
            self.design.center(&mut pd);
        }
        pd
    }

    /// Value, gradient and residuals of the smooth part.
    fn smooth_grad(&self, b: &DMatrix<f64>) -> (f64, DMatrix<f64>, Vec<f64>) {
        let resid = self.residuals(b);
        let value = 0.5 * resid.iter().map(|e| e * e).sum::<f64>() + 0.5 * self.ridge * linalg::frobenius_sq(b);
        let mut grad = self.design.project(&resid);
        if self.ridge != 0.0 {
            grad += b * self.ridge;
        }
        (value, grad, resid)
    }

    /// Proximal map of `step·trace_w·‖·‖_tr`; returns the point and its trace norm
    /// (zero when the trace term is inactive).
    fn prox(&self, v: DMatrix<f64>, step: f64) -> (DMatrix<f64>, f64) {
        if self.trace_w == 0.0 {
            return (v, 0.0);
        }
        let (out, sv) = linalg::singular_value_threshold(&v, step * self.trace_w);
        (out, sv.iter().sum())
    }

    fn total(&self, b: &DMatrix<f64>) -> f64 {
        let tn = if self.trace_w > 0.0 { linalg::trace_norm(b) } else { 0.0 };
        self.smooth(b) + self.trace_w * tn
    }

    /// `‖B − prox(B − ∇f(B)/L)‖_F / max(1, ‖B‖_F)`.
    fn stationarity(&self, b: &DMatrix<f64>, lip: f64) -> f64 {
        let (_, g, _) = self.smooth_grad(b);
        let step = 1.0 / lip;
        let (p, _) = self.prox(b - g * step, step);
        (b - p).norm() / b.norm().max(1.0)
    }
}

struct DescentOutcome {
    b: DMatrix<f64>,
    iterations: usize,
    stationarity: f64,
    converged: bool,
}

/// Monotone FISTA with backtracking and restart on objective increase.
/// Iterations without halving the smallest step after which the iterates are
/// taken to sit at rounding level.
const STALL_ITERS: usize = 500;

fn accelerated_descent(
    problem: &Composite<'_>,
    b0: DMatrix<f64>,
    lip: &mut f64,
    budget: usize,
    tol: f64,
    trace: &mut Vec<f64>,
) -> Result<DescentOutcome> {
    let mut x = b0;
    let mut fx = problem.total(&x);
    trace.push(fx);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut last_stat = f64::INFINITY;
    let (mut best_gap, mut stalled) = (f64::INFINITY, 0);
    for iter in 1..=budget {
        let (_, gy, resid_y) = problem.smooth_grad(&y);
        *lip *= 0.8;
        let (z, fz) = loop {
            let step = 1.0 / *lip;
            let (z, tn) = problem.prox(&y - &gy * step, step);
            // The smooth part is quadratic, so the majorization test reduces to
            // a curvature bound along d, evaluated without cancellation, and
            // the residuals at z follow from those at y.
            let d = &z - &y;
            let ad = problem.apply(&d);
            let dd = linalg::frobenius_sq(&d);
            let curvature = ad.iter().map(|v| v * v).sum::<f64>() + problem.ridge * dd;
            if curvature <= *lip * dd * (1.0 + 1e-12) {
                let loss: f64 = resid_y.iter().zip(&ad).map(|(e, a)| (e + a).powi(2)).sum();
                let fz = 0.5 * loss + 0.5 * problem.ridge * linalg::frobenius_sq(&z) + problem.trace_w * tn;
                break (z, fz);
            }
            *lip *= 2.0;
            if !lip.is_finite() || *lip > 1e300 {
                return Err(Error::Numerical(
                    "backtracking line search diverged (Lipschitz estimate overflow)".into(),
                ));
            }
        };
        let gap = (&z - &y).norm() / x.norm().max(1.0);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if fz <= fx {
            // Momentum is dropped when it points against the prox-gradient step.
            let uphill = (&y - &z).dot(&(&z - &x)) > 0.0;
            let prev = std::mem::replace(&mut x, z);
            fx = fz;
            if uphill {
                y = x.clone();
                t = 1.0;
            } else {
                y = &x + (&x - &prev) * ((t - 1.0) / t_next);
                t = t_next;
            }
        } else {
            y = x.clone();
            t = 1.0;
        }
        trace.push(fx);
        if gap < 0.5 * best_gap {
            best_gap = gap;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if gap <= tol || iter == budget || stalled == STALL_ITERS {
            last_stat = problem.stationarity(&x, *lip);
            if last_stat <= tol || stalled == STALL_ITERS {
                return Ok(DescentOutcome {
                    b: x,
                    iterations: iter,
                    stationarity: last_stat,
                    converged: last_stat <= tol,
                });
            }
        }
    }
    Ok(DescentOutcome {
        b: x,
        iterations: budget,
        stationarity: last_stat,
        converged: false,
    })
}

/// Fits the mean model. Hitting `max_iter` returns the last (best) iterate with
/// `converged = false`.
pub fn fit(
    data: &SparseObservations,
    g_m: &Arc<KernelBasis>,
    g_n: &Arc<KernelBasis>,
    h: &Hyperparams,
    init: Option<&MeanModel>,
) -> Result<(MeanModel, FitReport)> {
    h.validate()?;
    check_shapes(data, g_m, g_n)?;
    let design = Design::new(data, g_m, g_n);
    let problem = Composite {
        design: &design,
        center_rows: h.row_bias,
        ridge: h.ridge_weight(),
        trace_w: h.trace_weight(),
    };

    let zero = DMatrix::zeros(g_m.dim(), g_n.dim());
    let (lmax, bias_at_zero) = design.lambda_max_at_zero(&zero, h.row_bias);
    if lmax == 0.0 || (h.trace_weight() > 0.0 && h.trace_weight() >= lmax) {
        // Subgradient optimality at zero.
        let value = problem.total(&zero);
        let model = MeanModel::new(zero, Arc::clone(g_m), Arc::clone(g_n), bias_at_zero)?;
        return Ok((
            model,
            FitReport {
                objective_trace: vec![value],
                iterations: 0,
                stationarity: 0.0,
                rank_of_b: 0,
                converged: true,
            },
        ));
    }

    let b0 = match init {
        Some(m) if m.b_matrix().shape() != zero.shape() => {
            return Err(Error::shape(format!(
                "warm start B is {}x{}, expected {}x{}",
                m.b_matrix().nrows(),
                m.b_matrix().ncols(),
                zero.nrows(),
                zero.ncols()
            )));
        }
        Some(m) => m.b_matrix().clone(),
        None => zero,
    };

    let mut lip = g_m.operator_norm_sq() * g_n.operator_norm_sq() + h.ridge_weight();
    if !(lip > 0.0) {
        lip = 1.0;
    }
    let mut trace = Vec::with_capacity(64);
    let out = accelerated_descent(&problem, b0, &mut lip, h.max_iter, h.tol, &mut trace)?;

    let b = out.b;
    let row_bias = if h.row_bias {
        design.optimal_bias(&b)
    } else {
        DVector::zeros(data.n_rows())
    };
    let rank_of_b = linalg::numerical_rank(&b, 1e-8);
    let model = MeanModel::new(b, Arc::clone(g_m), Arc::clone(g_n), row_bias)?;
    Ok((
        model,
        FitReport {
            objective_trace: trace,
            iterations: out.iterations,
            stationarity: out.stationarity,
            rank_of_b,
            converged: out.converged,
        },
    ))
}

/// `count` values of `s` logarithmically spaced from `s_max` down to `s_min`.
pub fn log_grid(count: usize, s_min: f64, s_max: f64) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![s_max],
        _ => {
            let (lo, hi) = (s_min.ln(), s_max.ln());
            (0..count)
                .map(|i| {
                    if i == 0 {
                        s_max
                    } else if i == count - 1 {
                        s_min
                    } else {
                        (hi + (lo - hi) * i as f64 / (count - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// The default regularization path: 30 points from 1.0 down to 1e-3.
pub fn default_s_grid() -> Vec<f64> {
    log_grid(30, 1e-3, 1.0)
}

/// One fitted point of a regularization path.
#[derive(Debug)]
pub struct PathPoint {
    pub alpha: f64,
    pub s: f64,
    pub lambda: f64,
    pub outcome: Result<(MeanModel, FitReport)>,
}

/// Fits `λ = s·λ_max` for each `α`, walking `s` downward with warm starts.
///
/// Distinct `α` branches run in parallel when `parallel` is set; each branch
/// is sequential. A failed grid point is recorded and the next one starts
/// from the last successful model.
pub fn fit_path(
    data: &SparseObservations,
    g_m: &Arc<KernelBasis>,
    g_n: &Arc<KernelBasis>,
    base: &Hyperparams,
    alphas: &[f64],
    s_grid: &[f64],
    parallel: bool,
) -> Result<Vec<PathPoint>> {
    if s_grid.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("s_grid must be sorted in descending order"));
    }
    if s_grid.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
        return Err(Error::invalid("s_grid values must lie in (0, 1]"));
    }
    let lmax = lambda_max(data, g_m, g_n, base.row_bias)?;
    let branches = par::map(alphas, parallel, |&alpha| {
        let mut warm: Option<MeanModel> = None;
        let mut out = Vec::with_capacity(s_grid.len());
        for &s in s_grid {
            let h = Hyperparams {
                alpha,
                lambda: s * lmax,
                ..base.clone()
            };
            let outcome = fit(data, g_m, g_n, &h, warm.as_ref());
            if let Ok((model, _)) = &outcome {
                warm = Some(model.clone());
            }
            out.push(PathPoint {
                alpha,
                s,
                lambda: h.lambda,
                outcome,
            });
        }
        out
    });
    Ok(branches.into_iter().flatten().collect())
}
