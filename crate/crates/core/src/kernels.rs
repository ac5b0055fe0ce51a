//! Graph kernels: normalized Laplacians, exponential kernels and kernel bases.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative asymmetry tolerated by [`KernelMatrix`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Most negative eigenvalue tolerated, relative to the largest.
pub const PSD_TOL: f64 = 1e-8;
/// Default relative eigenvalue floor for [`kernel_basis`].
pub const DEFAULT_EIG_FLOOR: f64 = 1e-10;

/// Weighted undirected graph over `n_nodes` nodes.
///
/// Each undirected edge is stored once with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAdjacency {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl GraphAdjacency {
    /// Builds a graph from an edge list, symmetrizing it.
    ///
    /// An edge may be listed in one or both directions; listing the same pair
    /// twice with different weights is an error.
    pub fn new(n_nodes: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        let mut canon: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, w) in edges {
            check_edge(n_nodes, i, j, w)?;
            canon.push((i.min(j), i.max(j), w));
        }
        canon.sort_by_key(|&(i, j, _)| (i, j));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(canon.len());
        for e in canon {
            match out.last() {
                Some(last) if (last.0, last.1) == (e.0, e.1) => {
                    if last.2 != e.2 {
                        return Err(Error::invalid(format!(
                            "edge ({}, {}) listed with conflicting weights {} and {}",
                            e.0, e.1, last.2, e.2
                        )));
                    }
                }
                _ => out.push(e),
            }
        }
        Ok(Self { n_nodes, edges: out })
    }

    /// A graph with no edges.
    pub fn empty(n_nodes: usize) -> Result<Self> {
        Self::new(n_nodes, std::iter::empty())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Dense symmetric adjacency matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_nodes, self.n_nodes);
        for &(i, j, w) in &self.edges {
            a[(i, j)] = w;
            a[(j, i)] = w;
        }
        a
    }
}

fn check_edge(n: usize, i: usize, j: usize, w: f64) -> Result<()> {
    if i >= n || j >= n {
        return Err(Error::invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
    }
    if i == j {
        return Err(Error::invalid(format!("self-loop on node {i}")));
    }
    if !w.is_finite() || w < 0.0 {
        return Err(Error::invalid(format!(
            "edge ({i}, {j}) has invalid weight {w}; weights must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// Symmetric positive semidefinite covariance matrix.
///
/// Construction validates symmetry and PSD-ness and keeps the eigendecomposition,
/// which [`kernel_basis`] reuses.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn new(mut entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.nrows() != entries.ncols() {
            return Err(Error::invalid(format!(
                "kernel must be square and nonempty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kernel has non-finite entries"));
        }
        let asym = linalg::relative_asymmetry(&entries);
        if asym > SYMMETRY_TOL {
            return Err(Error::invalid(format!(
                "kernel is not symmetric (relative asymmetry {asym:.3e})"
            )));
        }
        linalg::symmetrize(&mut entries);
        let (eigenvalues, eigenvectors) = linalg::sym_eigen(&entries);
        check_psd(&eigenvalues)?;
        Ok(Self {
            entries,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }
}

fn check_psd(eigenvalues: &DVector<f64>) -> Result<()> {
    let top = eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let bottom = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if bottom < -PSD_TOL * top.max(0.0) || (top <= 0.0 && bottom < 0.0) {
        return Err(Error::invalid(format!(
            "kernel is not positive semidefinite: smallest eigenvalue {bottom:.3e}, largest {top:.3e}"
        )));
    }
    Ok(())
}

/// Factor `G` (rows × dim) with `G·Gᵀ` reproducing a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBasis {
    entries: DMatrix<f64>,
}

impl KernelBasis {
    /// Wraps an arbitrary factor matrix. Any `G` defines the kernel `G·Gᵀ`.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 {
            return Err(Error::invalid("basis must have at least one row"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("basis has non-finite entries"));
        }
        Ok(Self { entries })
    }

    pub fn identity(rows: usize) -> Self {
        Self {
            entries: DMatrix::identity(rows, rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `G·Gᵀ`.
    pub fn kernel(&self) -> DMatrix<f64> {
        &self.entries * self.entries.transpose()
    }

    /// Squared operator norm `‖G‖₂²`.
    pub fn operator_norm_sq(&self) -> f64 {
        let n = linalg::spectral_norm(&self.entries);
        n * n
    }
}

/// `L = I − D^{-1/2} A D^{-1/2}`; isolated nodes get `L_ii = 1` and no off-diagonals.
pub fn normalized_laplacian(g: &GraphAdjacency) -> DMatrix<f64> {
    let n = g.n_nodes();
    let mut degree = vec![0.0f64; n];
    for &(i, j, w) in g.edges() {
        degree[i] += w;
        degree[j] += w;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut l = DMatrix::identity(n, n);
    for &(i, j, w) in g.edges() {
        let v = -w * inv_sqrt[i] * inv_sqrt[j];
        l[(i, j)] = v;
        l[(j, i)] = v;
    }
    l
}

/// `K = exp(−L)` via the symmetric eigendecomposition, plus `I` when requested.
pub fn exponential_kernel(l: &DMatrix<f64>, add_identity: bool) -> Result<KernelMatrix> {
    if l.nrows() == 0 || l.nrows() != l.ncols() {
        return Err(Error::invalid("laplacian must be square and nonempty"));
    }
    let asym = linalg::relative_asymmetry(l);
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "laplacian is not symmetric (relative asymmetry {asym:.3e})"
        )));
    }
    let mut sym = l.clone();
    linalg::symmetrize(&mut sym);
    let (lvals, vecs) = linalg::sym_eigen(&sym);
    let shift = if add_identity { 1.0 } else { 0.0 };
    // exp(−λ) reverses the order, so flip to keep eigenvalues descending.
    let n = lvals.len();
    let eigenvalues = DVector::from_fn(n, |k, _| (-lvals[n - 1 - k]).exp() + shift);
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| vecs[(r, n - 1 - c)]);
    let mut entries = &eigenvectors * DMatrix::from_diagonal(&eigenvalues) * eigenvectors.transpose();
    linalg::symmetrize(&mut entries);
    check_psd(&eigenvalues)?;
    Ok(KernelMatrix {
        entries,
        eigenvalues,
        eigenvectors,
    })
}

/// Square-root basis `G = U_kept·Λ_kept^{1/2}`.
///
/// Eigenvalues below `eig_floor·λ_max` are dropped, so `dim` tracks the
/// effective rank.
pub fn kernel_basis(k: &KernelMatrix, eig_floor: f64) -> Result<KernelBasis> {
    if !(eig_floor >= 0.0) {
        return Err(Error::invalid("eig_floor must be nonnegative"));
    }
    let vals = k.eigenvalues();
    let top = vals.iter().copied().fold(0.0f64, f64::max);
    let bottom = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if bottom < -PSD_TOL * top {
        return Err(Error::Numerical(format!(
            "kernel eigenvalue {bottom:.3e} is below the PSD tolerance (largest {top:.3e})"
        )));
    }
    let keep: Vec<usize> = (0..vals.len())
        .filter(|&i| top > 0.0 && vals[i] >= eig_floor * top && vals[i] > 0.0)
        .collect();
    let rows = k.dim();
    let vecs = k.eigenvectors();
    let entries = DMatrix::from_fn(rows, keep.len(), |r, c| {
        let i = keep[c];
        vecs[(r, i)] * vals[i].sqrt()
    });
    Ok(KernelBasis { entries })
}

/// Squared-exponential kernel over `n` evenly spaced points in `[0, 1]`.
///
/// Used for synthetic experiments where smooth, rapidly decaying spectra are
/// wanted; graph data goes through [`exponential_kernel`].
pub fn squared_exponential_kernel(n: usize, length_scale: f64) -> Result<KernelMatrix> {
    if n == 0 || !(length_scale > 0.0) {
        return Err(Error::invalid(
            "squared-exponential kernel needs n ≥ 1 and a positive length scale",
        ));
    }
    let pos = |i: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    let entries = DMatrix::from_fn(n, n, |i, j| {
        let d = (pos(i) - pos(j)) / length_scale;
        (-0.5 * d * d).exp()
    });
    KernelMatrix::new(entries)
}
