//! Generative list-wise bipartite ranking on top of the mean model.
//!
//! Each task (row) `m` gets a target score vector `r_m = γ_m(C·x_m)`: `x_m` lives
//! on the simplex, `C·x_m` is a descending probability vector and `γ_m` places
//! it on the task's items with every positive ahead of every negative. Training
//! alternates between refitting the mean model on the targets and retargeting
//! every task against the current predictions.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelBasis;
use crate::meanfit::{self, FitReport, Hyperparams, MeanModel, SparseObservations};
use crate::par;

/// Binary labels `y ∈ {+1, −1}` on a sparse set of cells, sorted by `(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledObservations {
    n_rows: usize,
    n_cols: usize,
    triples: Vec<(usize, usize, i8)>,
}

impl LabeledObservations {
    pub fn new(n_rows: usize, n_cols: usize, mut triples: Vec<(usize, usize, i8)>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::invalid("no labels"));
        }
        for &(m, n, y) in &triples {
            if m >= n_rows || n >= n_cols {
                return Err(Error::invalid(format!(
                    "label ({m}, {n}) outside a {n_rows}x{n_cols} grid"
                )));
            }
            if y != 1 && y != -1 {
                return Err(Error::invalid(format!("label at ({m}, {n}) is {y}, expected +1 or -1")));
            }
        }
        triples.sort_unstable();
        if let Some(w) = triples.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::invalid(format!("duplicate label at ({}, {})", w[0].0, w[0].1)));
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

    pub fn triples(&self) -> &[(usize, usize, i8)] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Cells labelled `+1`.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.triples
            .iter()
            .filter(|t| t.2 == 1)
            .map(|&(m, n, _)| (m, n))
            .collect()
    }

    /// Items and labels per task, tasks in ascending row order.
    pub fn tasks(&self) -> Vec<(usize, Vec<usize>, Vec<i8>)> {
        let mut out: Vec<(usize, Vec<usize>, Vec<i8>)> = Vec::new();
        for &(m, n, y) in &self.triples {
            match out.last_mut() {
                Some(last) if last.0 == m => {
                    last.1.push(n);
                    last.2.push(y);
                }
                _ => out.push((m, vec![n], vec![y])),
            }
        }
        out
    }

    /// The subset of labels at the given positions of [`triples`](Self::triples).
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        let picked = positions
            .iter()
            .map(|&i| {
                self.triples
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("label position {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.n_rows, self.n_cols, picked)
    }
}

/// The upper-triangular map `C` with `C[i][j] = 1/(j+1)` for `j ≥ i` (0-based).
///
/// `C` maps the simplex onto the descending simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderSimplexMap {
    dim: usize,
}

impl OrderSimplexMap {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("ordered simplex dimension must be at least 1"));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `y_i = Σ_{j≥i} x_j/(j+1)` by suffix sums.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "vector length must match the map");
        let mut y = vec![0.0; self.dim];
        let mut acc = 0.0;
        for j in (0..self.dim).rev() {
            acc += x[j] / (j + 1) as f64;
            y[j] = acc;
        }
        y
    }

    /// `(Cᵀy)_j = (Σ_{i≤j} y_i)/(j+1)` by prefix sums.
    pub fn transpose_apply(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.dim, "vector length must match the map");
        let mut acc = 0.0;
        y.iter()
            .enumerate()
            .map(|(j, &v)| {
                acc += v;
                acc / (j + 1) as f64
            })
            .collect()
    }

    /// Preimage of a descending vector: `x_j = (j+1)·(y_j − y_{j+1})`.
    pub fn inverse_apply(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.dim, "vector length must match the map");
        (0..self.dim)
            .map(|j| (j + 1) as f64 * (y[j] - y.get(j + 1).copied().unwrap_or(0.0)))
            .collect()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(
            self.dim,
            self.dim,
            |i, j| if j >= i { 1.0 / (j + 1) as f64 } else { 0.0 },
        )
    }
}

/// Builds the ordered-simplex map of dimension `d`.
pub fn build_c_apply(d: usize) -> Result<OrderSimplexMap> {
    OrderSimplexMap::new(d)
}

/// `min(positives) ≥ max(negatives)`; true when either class is empty.
pub fn check_compatibility(scores: &[f64], labels: &[i8]) -> bool {
    assert_eq!(scores.len(), labels.len(), "scores and labels must have equal length");
    let mut min_pos = f64::INFINITY;
    let mut max_neg = f64::NEG_INFINITY;
    for (&s, &y) in scores.iter().zip(labels) {
        if y > 0 {
            min_pos = min_pos.min(s);
        } else {
            max_neg = max_neg.max(s);
        }
    }
    min_pos >= max_neg
}

/// Positions in descending target order: positives first, then negatives, each
/// block by `ψ` descending with ties going to the lower index.
///
/// `perm[k]` is the item that receives the `k`-th largest target.
pub fn block_sort_permutation(psi: &[f64], labels: &[i8]) -> Vec<usize> {
    assert_eq!(psi.len(), labels.len(), "scores and labels must have equal length");
    let mut perm: Vec<usize> = (0..psi.len()).collect();
    perm.sort_by(|&a, &b| {
        labels[b]
            .cmp(&labels[a])
            .then_with(|| psi[b].total_cmp(&psi[a]))
            .then_with(|| a.cmp(&b))
    });
    perm
}

/// Method for the simplex-constrained least-squares subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    /// Exponentiated gradient with backtracking; projected gradient if it stalls.
    #[default]
    ExponentiatedGradient,
    ProjectedGradient,
    /// Direct projection onto the descending simplex by isotonic regression.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    pub solver: InnerSolver,
    pub max_iter: usize,
    /// Frank–Wolfe gap at which the solve stops.
    pub tol: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            solver: InnerSolver::ExponentiatedGradient,
            max_iter: 5000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankTrainConfig {
    pub hyperparams: Hyperparams,
    pub outer_max_iter: usize,
    /// Relative change of the joint objective at which training stops.
    pub outer_tol: f64,
    pub inner: InnerConfig,
    /// Retarget tasks on the thread pool.
    pub parallel: bool,
}

impl Default for RankTrainConfig {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams::default(),
            outer_max_iter: 100,
            outer_tol: 1e-6,
            inner: InnerConfig::default(),
            parallel: true,
        }
    }
}

impl RankTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        if !(self.outer_tol > 0.0) || !(self.inner.tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if self.outer_max_iter == 0 || self.inner.max_iter == 0 {
            return Err(Error::invalid("iteration limits must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of one simplex least-squares solve.
#[derive(Debug, Clone)]
pub struct SimplexSolve {
    pub x: Vec<f64>,
    pub objective: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn ls_value(c: &OrderSimplexMap, x: &[f64], t: &[f64]) -> f64 {
    0.5 * c.apply(x).iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

fn ls_grad(c: &OrderSimplexMap, x: &[f64], t: &[f64]) -> Vec<f64> {
    let resid: Vec<f64> = c.apply(x).iter().zip(t).map(|(a, b)| a - b).collect();
    c.transpose_apply(&resid)
}

fn fw_gap(x: &[f64], g: &[f64]) -> f64 {
    let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
    x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() - gmin
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        acc += ui;
        let t = (acc - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&vi| (vi - theta).max(0.0)).collect()
}

/// Least-squares fit of a non-increasing sequence (pool adjacent violators).
pub fn isotonic_decreasing(t: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(t.len());
    for &v in t {
        let mut cur = (v, 1usize);
        while let Some(&(mean, len)) = blocks.last() {
            if mean >= cur.0 {
                break;
            }
            blocks.pop();
            let total = len + cur.1;
            cur = ((mean * len as f64 + cur.0 * cur.1 as f64) / total as f64, total);
        }
        blocks.push(cur);
    }
    blocks
        .into_iter()
        .flat_map(|(mean, len)| std::iter::repeat_n(mean, len))
        .collect()
}

/// `argmin_{x∈Δ} ½‖C·x − t‖²`.
///
/// `x0` must lie on the simplex; the returned iterate is never worse than it.
pub fn solve_simplex_ls(t: &[f64], x0: &[f64], cfg: &InnerConfig) -> SimplexSolve {
    let c = OrderSimplexMap::new(t.len()).expect("task has at least one item");
    let start_value = ls_value(&c, x0, t);
    let mut out = match cfg.solver {
        InnerSolver::Exact => exact_solve(&c, t),
        InnerSolver::ProjectedGradient => projected_gradient(&c, t, x0, cfg.max_iter, cfg.tol),
        InnerSolver::ExponentiatedGradient => {
            let eg = exponentiated_gradient(&c, t, x0, cfg.max_iter, cfg.tol);
            if eg.converged {
                eg
            } else {
                let pg = projected_gradient(&c, t, &eg.x, cfg.max_iter, cfg.tol);
                SimplexSolve {
                    iterations: eg.iterations + pg.iterations,
                    ..pg
                }
            }
        }
    };
    if out.objective > start_value {
        let g = ls_grad(&c, x0, t);
        out.gap = fw_gap(x0, &g);
        out.x = x0.to_vec();
        out.objective = start_value;
        out.converged = out.gap <= cfg.tol;
    }
    out
}

fn exact_solve(c: &OrderSimplexMap, t: &[f64]) -> SimplexSolve {
    let y = project_simplex(&isotonic_decreasing(t));
    // Clean tiny negative round-off in the preimage and renormalize.
    let mut x: Vec<f64> = c.inverse_apply(&y).into_iter().map(|v| v.max(0.0)).collect();
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    let g = ls_grad(c, &x, t);
    SimplexSolve {
        objective: ls_value(c, &x, t),
        gap: fw_gap(&x, &g),
        x,
        iterations: 1,
        converged: true,
    }
}

fn exponentiated_gradient(c: &OrderSimplexMap, t: &[f64], x0: &[f64], max_iter: usize, tol: f64) -> SimplexSolve {
    let d = t.len();
    // EG cannot leave the boundary, so start strictly inside.
    let mut x: Vec<f64> = x0.iter().map(|&v| 0.999 * v + 0.001 / d as f64).collect();
    let mut f = ls_value(c, &x, t);
    // CᵀC has entries 1/max(i,j) ≤ 1, so a unit step always satisfies the
    // ℓ1 descent condition; larger steps are tried first.
    let mut eta = 1.0;
    for it in 0..max_iter {
        let g = ls_grad(c, &x, t);
        let gap = fw_gap(&x, &g);
        if gap <= tol {
            return SimplexSolve {
                x,
                objective: f,
                gap,
                iterations: it,
                converged: true,
            };
        }
        let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
        eta *= 2.0;
        loop {
            let mut y: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| xi * (-eta * (gi - gmin)).exp())
                .collect();
            let s: f64 = y.iter().sum();
            y.iter_mut().for_each(|v| *v /= s);
            let fy = ls_value(c, &y, t);
            let lin: f64 = g.iter().zip(y.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            let l1: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
            if fy <= f + lin + 0.5 / eta * l1 * l1 || eta <= 1.0 {
                x = y;
                f = fy;
                break;
            }
            eta = (eta * 0.5).max(1.0);
        }
    }
    let g = ls_grad(c, &x, t);
    let gap = fw_gap(&x, &g);
    SimplexSolve {
        x,
        objective: f,
        gap,
        iterations: max_iter,
        converged: gap <= tol,
    }
}

fn projected_gradient(c: &OrderSimplexMap, t: &[f64], x0: &[f64], max_iter: usize, tol: f64) -> SimplexSolve {
    let mut x = x0.to_vec();
    let mut f = ls_value(c, &x, t);
    let mut lip = 1.0;
    for it in 0..max_iter {
        let g = ls_grad(c, &x, t);
        let gap = fw_gap(&x, &g);
        if gap <= tol {
            return SimplexSolve {
                x,
                objective: f,
                gap,
                iterations: it,
                converged: true,
            };
        }
        loop {
            let step: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b / lip).collect();
            let y = project_simplex(&step);
            let fy = ls_value(c, &y, t);
            let lin: f64 = g.iter().zip(y.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            let sq: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            if fy <= f + lin + 0.5 * lip * sq * (1.0 + 1e-12) {
                x = y;
                f = fy;
                lip *= 0.9;
                break;
            }
            lip *= 2.0;
        }
    }
    let g = ls_grad(c, &x, t);
    let gap = fw_gap(&x, &g);
    SimplexSolve {
        x,
        objective: f,
        gap,
        iterations: max_iter,
        converged: gap <= tol,
    }
}

/// Retargeting state of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub row: usize,
    /// Labelled items of the task, ascending.
    pub items: Vec<usize>,
    pub labels: Vec<i8>,
    pub x: Vec<f64>,
    pub perm: Vec<usize>,
    /// Target scores in item order.
    pub r: Vec<f64>,
    pub positives: usize,
    /// False for tasks with an empty class; their targets stay fixed.
    pub active: bool,
    pub inner_converged: bool,
}

impl TaskState {
    fn new(row: usize, items: Vec<usize>, labels: Vec<i8>, x: Vec<f64>) -> Self {
        let positives = labels.iter().filter(|&&y| y > 0).count();
        let active = positives > 0 && positives < labels.len();
        let zeros = vec![0.0; labels.len()];
        let perm = block_sort_permutation(&zeros, &labels);
        let mut task = Self {
            row,
            items,
            labels,
            x,
            perm,
            r: Vec::new(),
            positives,
            active,
            inner_converged: true,
        };
        if !active {
            let d = task.labels.len();
            task.x = vec![1.0 / d as f64; d];
        }
        task.refresh_targets();
        task
    }

    fn refresh_targets(&mut self) {
        let c = OrderSimplexMap::new(self.x.len()).expect("nonempty task");
        let sorted = c.apply(&self.x);
        let mut r = vec![0.0; sorted.len()];
        for (k, &item) in self.perm.iter().enumerate() {
            r[item] = sorted[k];
        }
        self.r = r;
    }

    /// `½‖r − ψ‖²` for scores given in item order.
    pub fn objective(&self, psi: &[f64]) -> f64 {
        0.5 * self.r.iter().zip(psi).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }

    pub fn is_compatible(&self) -> bool {
        check_compatibility(&self.r, &self.labels)
    }
}

/// Targets for every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingState {
    pub n_rows: usize,
    pub n_cols: usize,
    pub tasks: Vec<TaskState>,
}

impl RankingState {
    /// Uniform `x` and index-order permutations.
    pub fn initial(labels: &LabeledObservations) -> Self {
        Self::build(labels, |d| vec![1.0 / d as f64; d])
    }

    /// Random simplex `x` (uniform on the simplex) for every task.
    pub fn random(labels: &LabeledObservations, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(labels, |d| {
            let e: Vec<f64> = (0..d).map(|_| Exp1.sample(&mut rng)).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
    }

    fn build(labels: &LabeledObservations, mut init_x: impl FnMut(usize) -> Vec<f64>) -> Self {
        let tasks = labels
            .tasks()
            .into_iter()
            .map(|(row, items, ys)| {
                let x = init_x(items.len());
                TaskState::new(row, items, ys, x)
            })
            .collect();
        Self {
            n_rows: labels.n_rows(),
            n_cols: labels.n_cols(),
            tasks,
        }
    }

    /// Current targets as regression data.
    pub fn targets(&self) -> Result<SparseObservations> {
        let triples = self
            .tasks
            .iter()
            .flat_map(|t| t.items.iter().zip(&t.r).map(move |(&n, &r)| (t.row, n, r)))
            .collect();
        SparseObservations::new(self.n_rows, self.n_cols, triples)
    }

    pub fn index(&self) -> Vec<(usize, usize)> {
        self.tasks
            .iter()
            .flat_map(|t| t.items.iter().map(move |&n| (t.row, n)))
            .collect()
    }

    pub fn is_feasible(&self) -> bool {
        self.tasks.iter().all(TaskState::is_compatible)
    }

    /// Number of active tasks whose last inner solve did not converge.
    pub fn inner_failures(&self) -> usize {
        self.tasks.iter().filter(|t| t.active && !t.inner_converged).count()
    }
}

/// Block-sorts the task against `psi` (item order) and re-solves `x`.
///
/// Inactive tasks are returned unchanged.
pub fn retarget_task(psi: &[f64], task: &TaskState, cfg: &InnerConfig) -> TaskState {
    assert_eq!(psi.len(), task.items.len(), "one score per task item");
    if !task.active {
        return task.clone();
    }
    let perm = block_sort_permutation(psi, &task.labels);
    // Sorting is optimal for every descending target, so one sort and one
    // simplex solve give the joint minimizer over (x, γ).
    let permuted: Vec<f64> = perm.iter().map(|&i| psi[i]).collect();
    let solve = solve_simplex_ls(&permuted, &task.x, cfg);
    let mut next = TaskState {
        x: solve.x,
        perm,
        inner_converged: solve.converged,
        ..task.clone()
    };
    next.refresh_targets();
    next
}

/// Joint objective of the mean model and the targets, scaled by `1/σ²`:
/// `(1/σ²)·[½Σ(r − ψ)² + λ(1−α)/2·‖B‖_F² + λα·‖B‖_tr]`.
///
/// Returns `+∞` for a state with an incompatible task.
pub fn joint_objective(model: &MeanModel, state: &RankingState, h: &Hyperparams) -> Result<f64> {
    if !state.is_feasible() {
        return Ok(f64::INFINITY);
    }
    Ok(meanfit::objective(model, &state.targets()?, h)? / h.sigma2)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MeanModel,
    pub state: RankingState,
    /// Joint objective at the start and after every half-step.
    pub objective_trace: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub last_fit: Option<FitReport>,
    /// Inner solves that ended without reaching tolerance, summed over passes.
    pub inner_failures: usize,
}

/// Alternates mean fits and per-task retargeting until the relative change of
/// the joint objective drops below `outer_tol`.
pub fn train(
    labels: &LabeledObservations,
    g_m: &Arc<KernelBasis>,
    g_n: &Arc<KernelBasis>,
    cfg: &RankTrainConfig,
    init: Option<(MeanModel, RankingState)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if labels.n_rows() != g_m.rows() || labels.n_cols() != g_n.rows() {
        return Err(Error::shape("labels and bases cover different grids"));
    }
    let h = &cfg.hyperparams;
    let (mut model, mut state) = match init {
        Some((model, state)) => {
            if state.index() != labels.triples().iter().map(|&(m, n, _)| (m, n)).collect::<Vec<_>>() {
                return Err(Error::invalid("initial ranking state does not match the labels"));
            }
            (model, state)
        }
        None => (
            MeanModel::zeros(Arc::clone(g_m), Arc::clone(g_n)),
            RankingState::initial(labels),
        ),
    };
    let mut prev = joint_objective(&model, &state, h)?;
    if !prev.is_finite() {
        return Err(Error::invalid("initial ranking state is infeasible"));
    }
    let mut trace = vec![prev];
    let mut converged = false;
    let mut last_fit = None;
    let mut inner_failures = 0;
    let mut iterations = 0;
    while iterations < cfg.outer_max_iter {
        iterations += 1;
        let (next_model, report) = meanfit::fit(&state.targets()?, g_m, g_n, h, Some(&model))?;
        model = next_model;
        last_fit = Some(report);
        trace.push(joint_objective(&model, &state, h)?);

        state = retarget_all(&model, &state, &cfg.inner, cfg.parallel)?;
        inner_failures += state.inner_failures();
        let value = joint_objective(&model, &state, h)?;
        trace.push(value);

        if (prev - value).abs() <= cfg.outer_tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        prev = value;
    }
    Ok(TrainOutcome {
        model,
        state,
        objective_trace: trace,
        outer_iterations: iterations,
        converged,
        last_fit,
        inner_failures,
    })
}

/// One retargeting pass over all tasks against the model's predictions.
pub fn retarget_all(
    model: &MeanModel,
    state: &RankingState,
    cfg: &InnerConfig,
    parallel: bool,
) -> Result<RankingState> {
    let psi = meanfit::predict(model, &state.index(), true)?;
    let mut offsets = Vec::with_capacity(state.tasks.len());
    let mut acc = 0;
    for t in &state.tasks {
        offsets.push(acc);
        acc += t.items.len();
    }
    let tasks = par::map_range(state.tasks.len(), parallel, |i| {
        let t = &state.tasks[i];
        retarget_task(&psi[offsets[i]..offsets[i] + t.items.len()], t, cfg)
    });
    Ok(RankingState { tasks, ..state.clone() })
}

/// One trained point of a regularization path.
#[derive(Debug)]
pub struct RankPathPoint {
    pub alpha: f64,
    pub s: f64,
    pub lambda: f64,
    pub outcome: Result<TrainOutcome>,
}

/// Trains `λ = s·λ_max` for every `α`, walking `s` downward.
///
/// Each point warm-starts the mean model from its predecessor but restarts the
/// ranking state from the initial targets, since a state that has collapsed to
/// all ties would otherwise pin every later point at `B = 0`. `λ_max` is taken
/// at the initial targets. Distinct `α` branches run in
/// parallel when `cfg.parallel` is set.
pub fn train_path(
    labels: &LabeledObservations,
    g_m: &Arc<KernelBasis>,
    g_n: &Arc<KernelBasis>,
    cfg: &RankTrainConfig,
    alphas: &[f64],
    s_grid: &[f64],
) -> Result<Vec<RankPathPoint>> {
    if s_grid.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid("s_grid must be sorted in descending order"));
    }
    let initial = RankingState::initial(labels);
    let lmax = meanfit::lambda_max(&initial.targets()?, g_m, g_n, cfg.hyperparams.row_bias)?;
    let branches = par::map(alphas, cfg.parallel, |&alpha| {
        let mut warm: Option<MeanModel> = None;
        let mut out = Vec::with_capacity(s_grid.len());
        for &s in s_grid {
            let mut point_cfg = cfg.clone();
            point_cfg.hyperparams.alpha = alpha;
            point_cfg.hyperparams.lambda = s * lmax;
            // Nested parallelism only pays off when there is a single branch.
            point_cfg.parallel = cfg.parallel && alphas.len() == 1;
            let init = warm.take().map(|m| (m, initial.clone()));
            let outcome = train(labels, g_m, g_n, &point_cfg, init);
            if let Ok(o) = &outcome {
                warm = Some(o.model.clone());
            }
            out.push(RankPathPoint {
                alpha,
                s,
                lambda: s * lmax,
                outcome,
            });
        }
        out
    });
    Ok(branches.into_iter().flatten().collect())
}

/// Synthetic labels from a latent score matrix.
///
/// Per row the `q` largest entries of `z + ε` (`ε ~ N(0, noise_var)`, ties to the
/// lower index) are labelled `+1`, and `min(q, N − q)` of the remaining
/// entries, drawn uniformly without replacement, are labelled `−1`.
pub fn sample_labels(z: &DMatrix<f64>, q: usize, noise_var: f64, seed: u64) -> Result<LabeledObservations> {
    let (rows, cols) = z.shape();
    if q == 0 {
        return Err(Error::invalid(
            "positives per row must be at least 1; q = 0 gives no positive labels",
        ));
    }
    if q >= cols {
        return Err(Error::invalid(format!(
            "positives per row ({q}) must be below the column count ({cols})"
        )));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::invalid("noise variance must be ≥ 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut triples = Vec::with_capacity(rows * 2 * q);
    for m in 0..rows {
        let noisy: Vec<f64> = (0..cols)
            .map(|n| z[(m, n)] + if noise_var > 0.0 { noise.sample(&mut rng) } else { 0.0 })
            .collect();
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| noisy[b].total_cmp(&noisy[a]).then(a.cmp(&b)));
        let rest = &order[q..];
        triples.extend(order[..q].iter().map(|&n| (m, n, 1i8)));
        let n_neg = q.min(rest.len());
        triples.extend(
            index::sample(&mut rng, rest.len(), n_neg)
                .into_iter()
                .map(|i| (m, rest[i], -1i8)),
        );
    }
    LabeledObservations::new(rows, cols, triples)
}

/// Positives per row, for train-positive filtering at evaluation time.
pub fn positives_by_row(labels: &LabeledObservations) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (m, n) in labels.positives() {
        out.entry(m).or_default().push(n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_basis, squared_exponential_kernel};
    use rand::Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let e: Vec<f64> = (0..d).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn c_map_examples() {
        let c = build_c_apply(3).unwrap();
        assert_eq!(c.apply(&[1.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
        let u = c.apply(&[0.0, 0.0, 1.0]);
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(c.apply(&[0.5, 0.5, 0.0]), vec![0.75, 0.25, 0.0]);
        assert!(build_c_apply(0).is_err());
    }

    #[test]
    fn c_map_matches_dense_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..12 {
            let c = OrderSimplexMap::new(d).unwrap();
            let dense = c.dense();
            let x = random_simplex(&mut rng, d);
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cx = &dense * nalgebra::DVector::from_column_slice(&x);
            let cty = dense.transpose() * nalgebra::DVector::from_column_slice(&y);
            for i in 0..d {
                assert!((c.apply(&x)[i] - cx[i]).abs() < 1e-14);
                assert!((c.transpose_apply(&y)[i] - cty[i]).abs() < 1e-14);
                assert!((c.inverse_apply(&c.apply(&x))[i] - x[i]).abs() < 1e-12);
            }
            for j in 0..d {
                assert!((dense.column(j).sum() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn compatibility_examples() {
        assert!(check_compatibility(&[3.0, 1.0], &[1, -1]));
        assert!(!check_compatibility(&[1.0, 3.0], &[1, -1]));
        assert!(check_compatibility(&[2.0, 2.0], &[1, -1]));
        assert!(check_compatibility(&[5.0, -1.0], &[-1, -1]));
        assert!(check_compatibility(&[], &[]));
    }

    #[test]
    fn compatibility_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let d = rng.random_range(2..10);
            let s: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<i8> = (0..d).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
            let c = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            assert_eq!(check_compatibility(&s, &y), check_compatibility(&scaled, &y));
        }
    }

    #[test]
    fn block_sort_examples() {
        assert_eq!(block_sort_permutation(&[0.1, 0.9], &[1, 1]), vec![1, 0]);
        assert_eq!(block_sort_permutation(&[0.9, 0.1], &[-1, 1]), vec![1, 0]);
        assert_eq!(block_sort_permutation(&[0.5, 0.5, 0.5], &[1, -1, 1]), vec![0, 2, 1]);
    }

    #[test]
    fn adjacent_swaps_within_a_block_never_help() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let d = rng.random_range(2..9);
            let psi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<i8> = (0..d).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
            let mut target: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            target.sort_by(|a, b| b.total_cmp(a));
            let perm = block_sort_permutation(&psi, &y);
            let cost = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(k, &i)| (target[k] - psi[i]).powi(2)).sum() };
            let base = cost(&perm);
            for k in 0..d - 1 {
                if y[perm[k]] == y[perm[k + 1]] {
                    let mut swapped = perm.clone();
                    swapped.swap(k, k + 1);
                    assert!(cost(&swapped) >= base - 1e-12);
                }
            }
        }
    }

    #[test]
    fn isotonic_and_projection_basics() {
        assert_eq!(isotonic_decreasing(&[1.0, 2.0, 0.0]), vec![1.5, 1.5, 0.0]);
        assert_eq!(isotonic_decreasing(&[3.0, 2.0, 1.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = project_simplex(&[0.3, 0.3, 0.3]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn iterative_solvers_match_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let d = rng.random_range(1..20);
            let t: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..1.0)).collect();
            let x0 = vec![1.0 / d as f64; d];
            let exact = solve_simplex_ls(
                &t,
                &x0,
                &InnerConfig {
                    solver: InnerSolver::Exact,
                    ..Default::default()
                },
            );
            for solver in [InnerSolver::ExponentiatedGradient, InnerSolver::ProjectedGradient] {
                let s = solve_simplex_ls(
                    &t,
                    &x0,
                    &InnerConfig {
                        solver,
                        ..Default::default()
                    },
                );
                assert!(s.converged, "{solver:?} did not converge");
                assert!(
                    s.objective - exact.objective <= 1e-8,
                    "{solver:?}: {} vs {}",
                    s.objective,
                    exact.objective
                );
                assert!(exact.objective <= s.objective + 1e-12);
            }
        }
    }

    #[test]
    fn two_item_task_matches_grid_search() {
        let task = TaskState::new(0, vec![0, 1], vec![1, -1], vec![0.5, 0.5]);
        let psi = [0.0, 1.0];
        let out = retarget_task(&psi, &task, &InnerConfig::default());
        // (a, b) = (x0 + x1/2, x1/2) with x0 = 1 − x1; target a on item 0, b on item 1.
        let mut best = f64::INFINITY;
        for k in 0..=100_000 {
            let x1 = k as f64 / 100_000.0;
            let (a, b) = (1.0 - x1 / 2.0, x1 / 2.0);
            best = best.min(0.5 * ((a - 0.0).powi(2) + (b - 1.0).powi(2)));
        }
        assert!((out.objective(&psi) - best).abs() < 1e-4);
        assert!(out.is_compatible());
    }

    #[test]
    fn feasible_psi_is_a_fixed_point() {
        let c = OrderSimplexMap::new(4).unwrap();
        let x = vec![0.1, 0.4, 0.2, 0.3];
        let sorted = c.apply(&x);
        // items 2 and 0 positive, 3 and 1 negative
        let labels = vec![1, -1, 1, -1];
        let psi = vec![sorted[1], sorted[2], sorted[0], sorted[3]];
        let task = TaskState::new(0, vec![0, 1, 2, 3], labels, vec![0.25; 4]);
        let exact = InnerConfig {
            solver: InnerSolver::Exact,
            ..Default::default()
        };
        let out = retarget_task(&psi, &task, &exact);
        assert!(out.objective(&psi) < 1e-24);
        for (a, b) in out.x.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retarget_is_always_feasible_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let d = rng.random_range(2..15);
            let mut labels: Vec<i8> = (0..d).map(|_| if rng.random_bool(0.4) { 1 } else { -1 }).collect();
            labels[0] = 1;
            labels[1] = -1;
            let psi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let task = TaskState::new(3, (0..d).collect(), labels, random_simplex(&mut rng, d));
            let out = retarget_task(&psi, &task, &InnerConfig::default());
            assert!(out.is_compatible());
            assert!(out.objective(&psi) <= task.objective(&psi) + 1e-12);
            assert!((out.x.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(out.r.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn single_class_tasks_are_fixed_at_uniform() {
        let labels = LabeledObservations::new(2, 3, vec![(0, 0, 1), (0, 2, 1), (1, 1, -1)]).unwrap();
        let state = RankingState::random(&labels, 9);
        for t in &state.tasks {
            assert!(!t.active);
            let c = OrderSimplexMap::new(t.items.len()).unwrap();
            let uniform = c.apply(&vec![1.0 / t.items.len() as f64; t.items.len()]);
            let mut sorted = t.r.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(sorted, uniform);
            let out = retarget_task(&vec![3.0; t.items.len()], t, &InnerConfig::default());
            assert_eq!(&out, t);
        }
    }

    #[test]
    fn labeled_observations_validation() {
        assert!(LabeledObservations::new(2, 2, vec![]).is_err());
        assert!(LabeledObservations::new(2, 2, vec![(2, 0, 1)]).is_err());
        assert!(LabeledObservations::new(2, 2, vec![(0, 0, 0)]).is_err());
        assert!(LabeledObservations::new(2, 2, vec![(0, 0, 1), (0, 0, -1)]).is_err());
        let l = LabeledObservations::new(3, 3, vec![(2, 1, -1), (0, 2, 1), (0, 0, -1)]).unwrap();
        assert_eq!(l.tasks(), vec![(0, vec![0, 2], vec![-1, 1]), (2, vec![1], vec![-1])]);
    }

    #[test]
    fn joint_objective_examples() {
        let labels =
            LabeledObservations::new(2, 3, vec![(0, 0, 1), (0, 1, -1), (1, 1, 1), (1, 2, -1), (1, 0, -1)]).unwrap();
        let g = Arc::new(KernelBasis::identity(2));
        let gn = Arc::new(KernelBasis::identity(3));
        let model = MeanModel::zeros(g, gn);
        let state = RankingState::initial(&labels);
        let h = Hyperparams {
            sigma2: 0.5,
            row_bias: false,
            ..Default::default()
        };
        let rsq: f64 = state.tasks.iter().flat_map(|t| t.r.iter()).map(|r| r * r).sum();
        let value = joint_objective(&model, &state, &h).unwrap();
        assert!((value - rsq / (2.0 * 0.5)).abs() < 1e-15);
        let mut bad = state.clone();
        bad.tasks[0].r = vec![0.0, 1.0];
        assert_eq!(joint_objective(&model, &bad, &h).unwrap(), f64::INFINITY);
    }

    fn synthetic(rows: usize, cols: usize, seed: u64) -> (LabeledObservations, Arc<KernelBasis>, Arc<KernelBasis>) {
        let km = squared_exponential_kernel(rows, 0.3).unwrap();
        let kn = squared_exponential_kernel(cols, 0.3).unwrap();
        let z = crate::posterior::sample_prior(&km, &kn, seed).unwrap();
        let labels = sample_labels(&z, 3, 0.0, seed).unwrap();
        let gm = Arc::new(kernel_basis(&km, 1e-10).unwrap());
        let gn = Arc::new(kernel_basis(&kn, 1e-10).unwrap());
        (labels, gm, gn)
    }

    #[test]
    fn training_descends_at_every_half_step() {
        let (labels, gm, gn) = synthetic(8, 12, 6);
        let cfg = RankTrainConfig {
            hyperparams: Hyperparams {
                lambda: 0.05,
                alpha: 0.7,
                tol: 1e-9,
                ..Default::default()
            },
            outer_tol: 1e-10,
            ..Default::default()
        };
        let out = train(&labels, &gm, &gn, &cfg, None).unwrap();
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
        assert!(out.state.is_feasible());
    }

    #[test]
    fn training_result_does_not_depend_on_scheduling() {
        let (labels, gm, gn) = synthetic(6, 10, 7);
        let mut cfg = RankTrainConfig::default();
        cfg.hyperparams.lambda = 0.1;
        let a = train(&labels, &gm, &gn, &cfg, None).unwrap();
        cfg.parallel = false;
        let b = train(&labels, &gm, &gn, &cfg, None).unwrap();
        assert_eq!(a.objective_trace, b.objective_trace);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn separable_single_task_is_ranked_perfectly() {
        let labels = LabeledObservations::new(
            1,
            6,
            vec![(0, 0, 1), (0, 1, 1), (0, 2, -1), (0, 3, 1), (0, 4, -1), (0, 5, -1)],
        )
        .unwrap();
        let gm = Arc::new(KernelBasis::identity(1));
        let gn = Arc::new(KernelBasis::identity(6));
        let cfg = RankTrainConfig {
            hyperparams: Hyperparams {
                lambda: 1e-3,
                alpha: 0.0,
                row_bias: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(&labels, &gm, &gn, &cfg, None).unwrap();
        let psi = meanfit::predict(&out.model, &out.state.index(), false).unwrap();
        let (pos, neg): (Vec<_>, Vec<_>) = (0..6).partition(|&i| labels.triples()[i].2 > 0);
        for &p in &pos {
            for &n in &neg {
                assert!(psi[p] > psi[n]);
            }
        }
    }

    #[test]
    fn sample_labels_examples() {
        let z = DMatrix::from_row_slice(2, 5, &[0.1, 0.5, 0.3, 0.9, 0.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        let l = sample_labels(&z, 2, 0.0, 1).unwrap();
        let pos = l.positives();
        assert_eq!(pos, vec![(0, 1), (0, 3), (1, 0), (1, 1)]);
        assert_eq!(l.len(), 8);
        assert_eq!(
            sample_labels(&z, 2, 0.1, 5).unwrap(),
            sample_labels(&z, 2, 0.1, 5).unwrap()
        );
        assert!(sample_labels(&z, 0, 0.0, 1).is_err());
        assert!(sample_labels(&z, 5, 0.0, 1).is_err());
    }

    #[test]
    fn path_counts_points() {
        let (labels, gm, gn) = synthetic(5, 8, 8);
        let cfg = RankTrainConfig {
            outer_max_iter: 5,
            ..Default::default()
        };
        let path = train_path(&labels, &gm, &gn, &cfg, &[1.0, 0.0], &[1.0, 0.5, 0.1]).unwrap();
        assert_eq!(path.len(), 6);
        assert!(path.iter().all(|p| p.outcome.is_ok()));
    }

    #[test]
    fn path_points_match_cold_starts_after_a_collapse() {
        let (labels, gm, gn) = synthetic(10, 14, 3);
        let cfg = RankTrainConfig {
            hyperparams: Hyperparams {
                tol: 1e-11,
                max_iter: 50_000,
                ..Default::default()
            },
            outer_max_iter: 4,
            inner: InnerConfig {
                solver: InnerSolver::Exact,
                ..Default::default()
            },
            ..Default::default()
        };
        let path = train_path(&labels, &gm, &gn, &cfg, &[1.0], &[1.0, 0.01]).unwrap();
        let first = path[0].outcome.as_ref().unwrap();
        assert_eq!(first.model.b_matrix().norm(), 0.0);
        let last = &path[1];
        let warm = last.outcome.as_ref().unwrap();
        assert!(warm.model.b_matrix().norm() > 0.0);
        let mut point_cfg = cfg.clone();
        point_cfg.hyperparams.alpha = 1.0;
        point_cfg.hyperparams.lambda = last.lambda;
        let cold = train(&labels, &gm, &gn, &point_cfg, None).unwrap();
        let diff = (warm.model.b_matrix() - cold.model.b_matrix()).norm();
        assert!(diff <= 1e-6 * cold.model.b_matrix().norm(), "diff {diff}");
    }
}
