//! Closed-form matrix-variate GP posterior, prior sampling and the factor GP
//! baseline.
//!
//! The joint covariance is Kronecker structured:
//! `k((m,n),(m′,n′)) = K_M(m,m′)·K_N(n,n′)`. Covariances are only ever formed
//! for the training set and for query batches, never for the full `MN × MN`
//! grid.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::{kernel_basis, KernelBasis, KernelMatrix, DEFAULT_EIG_FLOOR};
use crate::linalg;
use crate::meanfit::{self, MeanModel, SparseObservations};

fn joint_cov(k_m: &DMatrix<f64>, k_n: &DMatrix<f64>, a: (usize, usize), b: (usize, usize)) -> f64 {
    k_m[(a.0, b.0)] * k_n[(a.1, b.1)]
}

fn check_index(k_m: &KernelMatrix, k_n: &KernelMatrix, idx: &[(usize, usize)], what: &str) -> Result<()> {
    if let Some(&(m, n)) = idx.iter().find(|&&(m, n)| m >= k_m.dim() || n >= k_n.dim()) {
        return Err(Error::invalid(format!(
            "{what} index ({m}, {n}) outside a {}x{} grid",
            k_m.dim(),
            k_n.dim()
        )));
    }
    Ok(())
}

fn has_duplicates(idx: &[(usize, usize)]) -> bool {
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Factor of `K_TT + σ²I`.
fn train_system(
    k_m: &KernelMatrix,
    k_n: &KernelMatrix,
    t: &[(usize, usize)],
    sigma2: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if !(sigma2 >= 0.0) {
        return Err(Error::invalid(format!("sigma2 must be ≥ 0, got {sigma2}")));
    }
    if sigma2 == 0.0 && has_duplicates(t) {
        return Err(Error::invalid(
            "singular system: duplicate training indices with zero noise variance",
        ));
    }
    let (km, kn) = (k_m.entries(), k_n.entries());
    let mut sys = DMatrix::from_fn(t.len(), t.len(), |i, j| joint_cov(km, kn, t[i], t[j]));
    for i in 0..t.len() {
        sys[(i, i)] += sigma2;
    }
    linalg::cholesky_with_jitter(&sys)
}

/// Posterior mean `Φ(m,n) = k_T(m,n)·(K_TT + σ²I)⁻¹·r` over the full grid.
///
/// Forms the `|T| × |T|` system, so this is meant for small problems and as a
/// reference for [`meanfit::fit`].
pub fn posterior_mean_closed_form(
    k_m: &KernelMatrix,
    k_n: &KernelMatrix,
    t: &[(usize, usize)],
    r: &[f64],
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    if t.len() != r.len() {
        return Err(Error::shape(format!("{} indices but {} values", t.len(), r.len())));
    }
    check_index(k_m, k_n, t, "training")?;
    if t.is_empty() {
        return Ok(DMatrix::zeros(k_m.dim(), k_n.dim()));
    }
    let (chol, _) = train_system(k_m, k_n, t, sigma2)?;
    let weights = chol.solve(&DVector::from_column_slice(r));
    // Φ = K_M·S·K_N with S holding the weights at the training cells.
    let mut s = DMatrix::zeros(k_m.dim(), k_n.dim());
    for (&(m, n), &w) in t.iter().zip(weights.iter()) {
        s[(m, n)] += w;
    }
    Ok(k_m.entries() * s * k_n.entries())
}

/// Posterior GP given a training index set.
///
/// The covariance does not depend on the observed values nor on the trace
/// constraint; the mean comes from a fitted [`MeanModel`].
#[derive(Debug, Clone)]
pub struct PosteriorGP {
    kernel_m: KernelMatrix,
    kernel_n: KernelMatrix,
    train_index: Vec<(usize, usize)>,
    sigma2: f64,
    mean_model: MeanModel,
    factor: Option<Cholesky<f64, Dyn>>,
    jitter: f64,
}

impl PosteriorGP {
    pub fn new(
        kernel_m: KernelMatrix,
        kernel_n: KernelMatrix,
        train_index: Vec<(usize, usize)>,
        sigma2: f64,
        mean_model: MeanModel,
    ) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::invalid(format!("sigma2 must be > 0, got {sigma2}")));
        }
        check_index(&kernel_m, &kernel_n, &train_index, "training")?;
        if mean_model.n_rows() != kernel_m.dim() || mean_model.n_cols() != kernel_n.dim() {
            return Err(Error::shape("mean model and kernels cover different grids"));
        }
        let (factor, jitter) = if train_index.is_empty() {
            (None, 0.0)
        } else {
            let (f, j) = train_system(&kernel_m, &kernel_n, &train_index, sigma2)?;
            (Some(f), j)
        };
        Ok(Self {
            kernel_m,
            kernel_n,
            train_index,
            sigma2,
            mean_model,
            factor,
            jitter,
        })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn train_index(&self) -> &[(usize, usize)] {
        &self.train_index
    }

    pub fn mean_model(&self) -> &MeanModel {
        &self.mean_model
    }

    /// Diagonal jitter that was needed to factor `K_TT + σ²I`.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior mean `ψ(m,n) + b_m` at the queries.
    pub fn mean(&self, queries: &[(usize, usize)]) -> Result<Vec<f64>> {
        meanfit::predict(&self.mean_model, queries, true)
    }

    /// `Σ_q = K_qq − K_qT·(K_TT + σ²I)⁻¹·K_Tq`.
    pub fn covariance(&self, queries: &[(usize, usize)]) -> Result<DMatrix<f64>> {
        posterior_covariance(self, queries)
    }
}

/// Posterior covariance over a batch of query cells.
pub fn posterior_covariance(gp: &PosteriorGP, queries: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    check_index(&gp.kernel_m, &gp.kernel_n, queries, "query")?;
    let (km, kn) = (gp.kernel_m.entries(), gp.kernel_n.entries());
    let q = queries.len();
    let mut cov = DMatrix::from_fn(q, q, |i, j| joint_cov(km, kn, queries[i], queries[j]));
    if let Some(factor) = &gp.factor {
        let t = &gp.train_index;
        let cross = DMatrix::from_fn(t.len(), q, |i, j| joint_cov(km, kn, t[i], queries[j]));
        let half = factor
            .l()
            .solve_lower_triangular(&cross)
            .ok_or_else(|| Error::Numerical("triangular solve failed in posterior covariance".into()))?;
        cov -= half.transpose() * half;
    }
    linalg::symmetrize(&mut cov);
    Ok(cov)
}

/// Draws `Z = G_M·W·G_Nᵀ` with i.i.d. standard normal `W`, an exact sample from
/// the zero-mean GP with covariance `K_N ⊗ K_M`.
pub fn sample_prior(k_m: &KernelMatrix, k_n: &KernelMatrix, seed: u64) -> Result<DMatrix<f64>> {
    let g_m = kernel_basis(k_m, DEFAULT_EIG_FLOOR)?;
    let g_n = kernel_basis(k_n, DEFAULT_EIG_FLOOR)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_prior_from_bases(&g_m, &g_n, &mut rng))
}

/// Draws `Z = Σ_{f<rank} u_f·v_fᵀ` with independent `u_f ~ GP(0, K_M)` and
/// `v_f ~ GP(0, K_N)`, the generative model of the factor GP. The numerical
/// rank of `Z` is at most `rank`.
pub fn sample_low_rank_prior(k_m: &KernelMatrix, k_n: &KernelMatrix, rank: usize, seed: u64) -> Result<DMatrix<f64>> {
    if rank == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    let g_m = kernel_basis(k_m, DEFAULT_EIG_FLOOR)?;
    let g_n = kernel_basis(k_n, DEFAULT_EIG_FLOOR)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |g: &KernelBasis| -> DMatrix<f64> {
        let w = DMatrix::from_fn(g.dim(), rank, |_, _| StandardNormal.sample(&mut rng));
        g.entries() * w
    };
    let u = draw(&g_m);
    let v = draw(&g_n);
    Ok(u * v.transpose())
}

pub fn sample_prior_from_bases<R: rand::Rng>(g_m: &KernelBasis, g_n: &KernelBasis, rng: &mut R) -> DMatrix<f64> {
    let w = DMatrix::from_fn(g_m.dim(), g_n.dim(), |_, _| StandardNormal.sample(rng));
    g_m.entries() * w * g_n.entries().transpose()
}

/// MAP factors of the factor GP.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    /// Row factors, M × F.
    pub u: DMatrix<f64>,
    /// Column factors, N × F.
    pub v: DMatrix<f64>,
}

impl FactorModel {
    /// `U·Vᵀ`.
    pub fn mean(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }
}

/// Result of [`factor_gp_map`].
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub model: FactorModel,
    /// `(1/σ²)·Σ(r − u_m·v_n)² + tr(UᵀK_M⁻¹U) + tr(VᵀK_N⁻¹V)` at the returned factors.
    pub objective: f64,
    /// Objective reached by every restart, in order.
    pub restart_objectives: Vec<f64>,
    /// Largest diagonal jitter added to a ridge system (0 when none was needed).
    pub jitter: f64,
}

const FACTOR_MAX_SWEEPS: usize = 5000;
const FACTOR_REL_TOL: f64 = 1e-13;

/// Alternating exact ridge solves for the factor GP MAP estimate.
///
/// The factors are parametrized in basis coordinates, `U = G_M·Ũ` and
/// `V = G_N·Ṽ`, so `tr(UᵀK_M⁻¹U) = ‖Ũ‖_F²`. The problem is non-convex; the
/// best of `restarts` random initializations (i.i.d. normal scaled by `1/√F`)
/// is returned.
pub fn factor_gp_map(
    data: &SparseObservations,
    k_m: &KernelMatrix,
    k_n: &KernelMatrix,
    rank: usize,
    sigma2: f64,
    restarts: usize,
    seed: u64,
) -> Result<FactorFit> {
    if rank == 0 {
        return Err(Error::invalid("factor rank must be at least 1"));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::invalid(format!("sigma2 must be > 0, got {sigma2}")));
    }
    if data.n_rows() != k_m.dim() || data.n_cols() != k_n.dim() {
        return Err(Error::shape("observations and kernels cover different grids"));
    }
    let g_m = kernel_basis(k_m, DEFAULT_EIG_FLOOR)?;
    let g_n = kernel_basis(k_n, DEFAULT_EIG_FLOOR)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rank as f64).sqrt();
    let mut best: Option<(DMatrix<f64>, DMatrix<f64>, f64)> = None;
    let mut restart_objectives = Vec::new();
    let mut jitter = 0.0f64;
    for _ in 0..restarts.max(1) {
        let mut ut = DMatrix::from_fn(g_m.dim(), rank, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let mut vt = DMatrix::from_fn(g_n.dim(), rank, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let mut obj = factor_objective(data, &g_m, &g_n, &ut, &vt, sigma2);
        for _ in 0..FACTOR_MAX_SWEEPS {
            let (nu, j1) = ridge_update(data, &g_m, &g_n, &vt, sigma2, Side::Rows)?;
            ut = nu;
            let (nv, j2) = ridge_update(data, &g_m, &g_n, &ut, sigma2, Side::Cols)?;
            vt = nv;
            jitter = jitter.max(j1).max(j2);
            let next = factor_objective(data, &g_m, &g_n, &ut, &vt, sigma2);
            let done = obj - next <= FACTOR_REL_TOL * obj.abs().max(1e-300);
            obj = next.min(obj);
            if done {
                break;
            }
        }
        restart_objectives.push(obj);
        if best.as_ref().is_none_or(|b| obj < b.2) {
            best = Some((ut, vt, obj));
        }
    }
    let (ut, vt, objective) = best.expect("at least one restart");
    Ok(FactorFit {
        model: FactorModel {
            u: g_m.entries() * ut,
            v: g_n.entries() * vt,
        },
        objective,
        restart_objectives,
        jitter,
    })
}

#[derive(Clone, Copy)]
enum Side {
    Rows,
    Cols,
}

fn factor_objective(
    data: &SparseObservations,
    g_m: &KernelBasis,
    g_n: &KernelBasis,
    ut: &DMatrix<f64>,
    vt: &DMatrix<f64>,
    sigma2: f64,
) -> f64 {
    let u = g_m.entries() * ut;
    let v = g_n.entries() * vt;
    let rss: f64 = data
        .triples()
        .iter()
        .map(|&(m, n, r)| (r - u.row(m).dot(&v.row(n))).powi(2))
        .sum();
    rss / sigma2 + linalg::frobenius_sq(ut) + linalg::frobenius_sq(vt)
}

/// Exact minimizer over one factor with the other held fixed.
fn ridge_update(
    data: &SparseObservations,
    g_m: &KernelBasis,
    g_n: &KernelBasis,
    fixed: &DMatrix<f64>,
    sigma2: f64,
    side: Side,
) -> Result<(DMatrix<f64>, f64)> {
    let rank = fixed.ncols();
    let (own, other) = match side {
        Side::Rows => (g_m, g_n),
        Side::Cols => (g_n, g_m),
    };
    // Per observation, the prediction is ⟨own(i)ᵀ ⊗ w, vec(X)⟩ with w the fixed
    // factor evaluated at the other index.
    let other_vals = other.entries() * fixed;
    let dim = own.dim() * rank;
    let mut gram = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let mut feat = DVector::zeros(dim);
    for &(m, n, r) in data.triples() {
        let (i, j) = match side {
            Side::Rows => (m, n),
            Side::Cols => (n, m),
        };
        for d in 0..own.dim() {
            let g = own.entries()[(i, d)];
            for f in 0..rank {
                feat[d * rank + f] = g * other_vals[(j, f)];
            }
        }
        gram.ger(1.0, &feat, &feat, 1.0);
        rhs.axpy(r, &feat, 1.0);
    }
    for k in 0..dim {
        gram[(k, k)] += sigma2;
    }
    let (chol, jitter) = linalg::cholesky_with_jitter(&gram)?;
    let sol = chol.solve(&rhs);
    Ok((DMatrix::from_fn(own.dim(), rank, |d, f| sol[d * rank + f]), jitter))
}

/// `(½(‖U‖_F² + ‖V‖_F²), ‖UVᵀ‖_tr)`. The first is never smaller than the second;
/// they agree for balanced factorizations.
pub fn variational_trace_identity(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(f64, f64)> {
    if u.ncols() != v.ncols() {
        return Err(Error::shape(format!(
            "factors have {} and {} columns",
            u.ncols(),
            v.ncols()
        )));
    }
    let lhs = 0.5 * (linalg::frobenius_sq(u) + linalg::frobenius_sq(v));
    let rhs = linalg::trace_norm(&(u * v.transpose()));
    Ok((lhs, rhs))
}

/// Balanced factorization `U = A·Σ^{1/2}`, `V = B·Σ^{1/2}` from the thin SVD `W = AΣBᵀ`.
pub fn balanced_factorization(w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let svd = w.clone().svd(true, true);
    let root = svd.singular_values.map(f64::sqrt);
    let u = svd.u.expect("u requested") * DMatrix::from_diagonal(&root);
    let v = svd.v_t.expect("v_t requested").transpose() * DMatrix::from_diagonal(&root);
    (u, v)
}

/// Shared bases for a pair of kernels, for callers that go on to fit mean models.
pub fn bases_for(
    k_m: &KernelMatrix,
    k_n: &KernelMatrix,
    eig_floor: f64,
) -> Result<(Arc<KernelBasis>, Arc<KernelBasis>)> {
    Ok((
        Arc::new(kernel_basis(k_m, eig_floor)?),
        Arc::new(kernel_basis(k_n, eig_floor)?),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfit::Hyperparams;
    use rand::Rng;

    fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> KernelMatrix {
        let x = DMatrix::from_fn(n, n + 1, |_, _| rng.random_range(-1.0..1.0));
        KernelMatrix::new(&x * x.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1).unwrap()
    }

    /// Conditioning of the full joint Gaussian over (vec Z, r_T), solved with LU.
    fn joint_oracle(
        km: &DMatrix<f64>,
        kn: &DMatrix<f64>,
        t: &[(usize, usize)],
        r: &[f64],
        sigma2: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (m, n) = (km.nrows(), kn.nrows());
        let cells: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..m).map(move |i| (i, j))).collect();
        let prior = kn.kronecker(km);
        let obs = DMatrix::from_fn(t.len(), t.len(), |a, b| {
            km[(t[a].0, t[b].0)] * kn[(t[a].1, t[b].1)] + if a == b { sigma2 } else { 0.0 }
        });
        let cross = DMatrix::from_fn(cells.len(), t.len(), |c, a| {
            prior[(cells[c].0 + m * cells[c].1, t[a].0 + m * t[a].1)]
        });
        let lu = obs.lu();
        let mean_vec = &cross * lu.solve(&DVector::from_column_slice(r)).unwrap();
        let cov = &prior - &cross * lu.solve(&cross.transpose()).unwrap();
        let mean = DMatrix::from_fn(m, n, |i, j| mean_vec[i + m * j]);
        (mean, cov)
    }

    #[test]
    fn unit_kernels_single_observation() {
        let k = KernelMatrix::identity(3).unwrap();
        let phi = posterior_mean_closed_form(&k, &k, &[(0, 0)], &[1.0], 1.0).unwrap();
        assert!((phi[(0, 0)] - 0.5).abs() < 1e-15);
        let rest: f64 = phi.iter().skip(1).map(|v| v.abs()).sum();
        assert_eq!(rest, 0.0);
    }

    #[test]
    fn huge_noise_kills_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (km, kn) = (random_kernel(&mut rng, 4), random_kernel(&mut rng, 3));
        let phi = posterior_mean_closed_form(&km, &kn, &[(0, 0), (2, 1)], &[3.0, -2.0], 1e8).unwrap();
        assert!(phi.amax() < 1e-6);
    }

    #[test]
    fn zero_noise_duplicates_rejected() {
        let k = KernelMatrix::identity(2).unwrap();
        assert!(posterior_mean_closed_form(&k, &k, &[(0, 0), (0, 0)], &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn covariance_matches_joint_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (km, kn) = (random_kernel(&mut rng, 3), random_kernel(&mut rng, 3));
        let t = vec![(0, 1), (2, 2)];
        let r = vec![0.7, -1.1];
        let sigma2 = 0.3;
        let (oracle_mean, oracle_cov) = joint_oracle(km.entries(), kn.entries(), &t, &r, sigma2);
        let phi = posterior_mean_closed_form(&km, &kn, &t, &r, sigma2).unwrap();
        assert!((&phi - &oracle_mean).amax() < 1e-10);
        let (gm, gn) = bases_for(&km, &kn, 1e-12).unwrap();
        let gp = PosteriorGP::new(km.clone(), kn.clone(), t.clone(), sigma2, MeanModel::zeros(gm, gn)).unwrap();
        let cells: Vec<(usize, usize)> = (0..3).flat_map(|j| (0..3).map(move |i| (i, j))).collect();
        let cov = gp.covariance(&cells).unwrap();
        assert!((&cov - &oracle_cov).amax() < 1e-10);
    }

    #[test]
    fn empty_training_set_gives_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (km, kn) = (random_kernel(&mut rng, 3), random_kernel(&mut rng, 2));
        let (gm, gn) = bases_for(&km, &kn, 1e-12).unwrap();
        let gp = PosteriorGP::new(km.clone(), kn.clone(), vec![], 1.0, MeanModel::zeros(gm, gn)).unwrap();
        let q = vec![(0, 0), (2, 1), (1, 1)];
        let cov = gp.covariance(&q).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let expected = km.entries()[(q[a].0, q[b].0)] * kn.entries()[(q[a].1, q[b].1)];
                assert!((cov[(a, b)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn noiseless_limit_collapses_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (km, kn) = (random_kernel(&mut rng, 3), random_kernel(&mut rng, 3));
        let (gm, gn) = bases_for(&km, &kn, 1e-12).unwrap();
        let gp = PosteriorGP::new(km, kn, vec![(1, 2), (0, 0)], 1e-10, MeanModel::zeros(gm, gn)).unwrap();
        let cov = gp.covariance(&[(1, 2)]).unwrap();
        assert!(cov[(0, 0)].abs() < 1e-8);
    }

    #[test]
    fn conditioning_reduces_variance_and_ignores_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (km, kn) = (random_kernel(&mut rng, 4), random_kernel(&mut rng, 4));
        let (gm, gn) = bases_for(&km, &kn, 1e-12).unwrap();
        let t = vec![(0, 0), (1, 3), (3, 2), (2, 2)];
        let prior = PosteriorGP::new(
            km.clone(),
            kn.clone(),
            vec![],
            0.5,
            MeanModel::zeros(gm.clone(), gn.clone()),
        )
        .unwrap();
        let q: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
        let p0 = prior.covariance(&q).unwrap();
        // two different mean models (any λ, α) leave the covariance unchanged
        let data = SparseObservations::new(4, 4, t.iter().map(|&(m, n)| (m, n, 1.0 + m as f64)).collect()).unwrap();
        let mut covs = Vec::new();
        for (lambda, alpha) in [(0.1, 1.0), (2.0, 0.0)] {
            let h = Hyperparams {
                lambda,
                alpha,
                ..Default::default()
            };
            let (model, _) = meanfit::fit(&data, &gm, &gn, &h, None).unwrap();
            let gp = PosteriorGP::new(km.clone(), kn.clone(), t.clone(), 0.5, model).unwrap();
            covs.push(gp.covariance(&q).unwrap());
        }
        assert_eq!(covs[0], covs[1]);
        for i in 0..q.len() {
            assert!(covs[0][(i, i)] <= p0[(i, i)] + 1e-10);
        }
    }

    #[test]
    fn prior_sample_is_deterministic_and_respects_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let km = random_kernel(&mut rng, 5);
        let kn = random_kernel(&mut rng, 4);
        assert_eq!(sample_prior(&km, &kn, 42).unwrap(), sample_prior(&km, &kn, 42).unwrap());
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5, 3.0]);
        let rank1 = KernelMatrix::new(&v * v.transpose()).unwrap();
        let z = sample_prior(&rank1, &kn, 5).unwrap();
        assert_eq!(linalg::numerical_rank(&z, 1e-10), 1);
        for i in 0..5 {
            // each row is v_i times the same row vector
            let ratio = z.row(i) / v[i];
            assert!((ratio - z.row(0) / v[0]).amax() < 1e-10);
        }
    }

    #[test]
    fn prior_sample_has_unit_variance_with_identity_kernels() {
        let k1 = KernelMatrix::identity(1).unwrap();
        let draws: Vec<f64> = (0..10_000u64)
            .map(|s| sample_prior(&k1, &k1, s).unwrap()[(0, 0)])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        // sd of the sample variance for a standard normal is √(2/(n−1))
        let sd = (2.0 / 9999.0f64).sqrt();
        assert!((var - 1.0).abs() < 3.0 * sd, "variance {var}");
    }

    #[test]
    fn factor_gp_recovers_planted_rank_one() {
        let km = KernelMatrix::identity(5).unwrap();
        let kn = KernelMatrix::identity(4).unwrap();
        let a = [1.0, -0.5, 2.0, 0.3, 1.2];
        let b = [0.8, 1.5, -1.0, 0.4];
        let mut t = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                t.push((i, j, a[i] * b[j]));
            }
        }
        let data = SparseObservations::new(5, 4, t.clone()).unwrap();
        let fit = factor_gp_map(&data, &km, &kn, 1, 1e-8, 5, 3).unwrap();
        let mean = fit.model.mean();
        let rss: f64 = t.iter().map(|&(i, j, r)| (r - mean[(i, j)]).powi(2)).sum();
        assert!(rss <= 1e-6, "rss {rss}");
    }

    #[test]
    fn factor_gp_zero_data() {
        let k = KernelMatrix::identity(3).unwrap();
        let data = SparseObservations::new(3, 3, vec![(0, 0, 0.0), (1, 2, 0.0)]).unwrap();
        let fit = factor_gp_map(&data, &k, &k, 2, 1.0, 2, 1).unwrap();
        assert!(fit.objective < 1e-20);
        assert!(fit.model.u.amax() < 1e-10 && fit.model.v.amax() < 1e-10);
    }

    #[test]
    fn variational_identity_examples() {
        let z = DMatrix::<f64>::zeros(1, 1);
        assert_eq!(variational_trace_identity(&z, &z).unwrap(), (0.0, 0.0));
        let two = DMatrix::from_element(1, 1, 2.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let (l, r) = variational_trace_identity(&two, &two).unwrap();
        assert!((l - 4.0).abs() < 1e-15 && (r - 4.0).abs() < 1e-15);
        let (l, r) = variational_trace_identity(&two, &one).unwrap();
        assert!((l - 2.5).abs() < 1e-15 && (r - 2.0).abs() < 1e-15);
        assert!(variational_trace_identity(&DMatrix::zeros(2, 2), &DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn balanced_factorization_attains_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let (u, v) = balanced_factorization(&w);
        assert!((&u * v.transpose() - &w).amax() < 1e-12);
        let (l, r) = variational_trace_identity(&u, &v).unwrap();
        assert!((l - r).abs() < 1e-10);
    }
}
