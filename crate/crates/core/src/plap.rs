//! Graph p-Laplacian approximation by full eigenvector analysis.
//!
//! The embedding objective
//!
//! ```text
//! J_E(F) = Σ_k  Σ_ij w_ij |f_i^k - f_j^k|^p / ‖f^k‖_p^p      s.t.  FᵀF = I
//! ```
//!
//! is minimized by gradient descent started from the `K` smallest
//! eigenvectors of `L = D - W`. The raw gradient is projected with
//! `G = ∂J - F (∂J)ᵀ F` to stay tangent to the orthogonality constraint, the
//! step is `α = step_factor · Σ|F| / Σ|G|` (halved while it would increase
//! `J_E`), and the result is assembled as `L^p = F diag(λ) Fᵀ` with
//! `λ_k = Σ_ij w_ij |f_i^k - f_j^k|^p / ‖f^k‖_p^p`.
//!
//! Double sums `Σ_ij` run over ordered pairs, so each undirected edge counts
//! twice. At `p = 2` this gives `λ_k = 2 s_k` for Laplacian eigenpairs
//! `(s_k, u_k)`, and with `K = n` the output is exactly `2L`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{laplacian, Graph};
use crate::linalg::{sym_eigen_ascending, symmetrize};

/// `φ_p(x) = |x|^(p-1) · sign(x)`.
#[inline]
pub fn phi_p(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.abs().powf(p - 1.0).copysign(x)
    }
}

/// Embedding dimension used when none is configured: the full spectrum up to
/// 512 nodes, 64 columns beyond.
pub fn default_embed_dim(n: usize) -> usize {
    if n <= 512 {
        n
    } else {
        n.min(64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PLapConfig {
    pub p: f64,
    /// `None` selects [`default_embed_dim`].
    pub embed_dim: Option<usize>,
    pub step_factor: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub reorth_period: usize,
    /// Stop when `‖G‖_F ≤ grad_tol ·` (magnitude of the two gradient terms).
    pub grad_tol: f64,
    pub max_halvings: usize,
}

impl Default for PLapConfig {
    fn default() -> Self {
        Self {
            p: 2.0,
            embed_dim: None,
            step_factor: 0.01,
            max_iters: 2000,
            rel_tol: 1e-6,
            reorth_period: 25,
            grad_tol: 1e-10,
            max_halvings: 20,
        }
    }
}

impl PLapConfig {
    pub fn with_p(p: f64) -> Self {
        Self {
            p,
            ..Default::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<usize> {
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(Error::invalid(format!(
                "p must be greater than 1 (φ_p and the gradient need p > 1), got {}",
                self.p
            )));
        }
        let k = self.embed_dim.unwrap_or_else(|| default_embed_dim(n));
        if k == 0 || k > n {
            return Err(Error::invalid(format!("embedding dimension {k} outside [1, {n}]")));
        }
        if !(self.step_factor > 0.0) || !(self.rel_tol > 0.0) || self.reorth_period == 0 {
            return Err(Error::invalid(
                "step_factor, rel_tol and reorth_period must be positive",
            ));
        }
        Ok(k)
    }
}

/// Undirected edge list `i < j`.
struct Edges {
    pairs: Vec<(usize, usize, f64)>,
    n: usize,
}

impl Edges {
    fn new(g: &Graph) -> Self {
        Self {
            pairs: g.edges(),
            n: g.n(),
        }
    }

    /// `(Σ_ij w_ij |f_i - f_j|^p, Σ_i |f_i|^p)` with the ordered-pair sum.
    fn ratio_terms(&self, f: &[f64], p: f64) -> (f64, f64) {
        let mut num = 0.0;
        for &(i, j, w) in &self.pairs {
            num += w * (f[i] - f[j]).abs().powf(p);
        }
        let den: f64 = f.iter().map(|v| v.abs().powf(p)).sum();
        (2.0 * num, den)
    }

    /// Column gradient and the squared norms of its two terms.
    fn column_gradient(&self, f: &[f64], p: f64) -> (Vec<f64>, f64, f64) {
        let mut acc = vec![0.0; self.n];
        let mut num = 0.0;
        for &(i, j, w) in &self.pairs {
            let d = f[i] - f[j];
            let a = d.abs().powf(p - 1.0);
            num += w * a * d.abs();
            let t = w * a.copysign(d);
            acc[i] += t;
            acc[j] -= t;
        }
        let num = 2.0 * num;
        let den: f64 = f.iter().map(|v| v.abs().powf(p)).sum();
        let ratio = num / den;
        let c = p / den;
        let mut g = Vec::with_capacity(self.n);
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..self.n {
            let t1 = c * 2.0 * acc[i];
            let t2 = c * ratio * phi_p(f[i], p);
            s1 += t1 * t1;
            s2 += t2 * t2;
            g.push(t1 - t2);
        }
        (g, s1, s2)
    }
}

fn check_vector(f: &[f64], n: usize) -> Result<()> {
    if f.len() != n {
        return Err(Error::shape(format!("vector of length {} on a {n}-node graph", f.len())));
    }
    if f.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVector("p-norm denominator vanishes".into()));
    }
    Ok(())
}

fn check_columns(f: &DMatrix<f64>, n: usize) -> Result<()> {
    if f.nrows() != n {
        return Err(Error::shape(format!("{} rows for a {n}-node graph", f.nrows())));
    }
    for (k, col) in f.column_iter().enumerate() {
        if col.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroVector(format!("column {k} is zero")));
        }
    }
    Ok(())
}

/// `F_p(f) = Σ_ij w_ij |f_i - f_j|^p / (2 ‖f‖_p^p)`.
pub fn fp_functional(f: &[f64], g: &Graph, p: f64) -> Result<f64> {
    check_vector(f, g.n())?;
    let (num, den) = Edges::new(g).ratio_terms(f, p);
    Ok(num / (2.0 * den))
}

/// Per-column ratios `Σ_ij w_ij |f_i^k - f_j^k|^p / ‖f^k‖_p^p`.
pub fn column_ratios(f: &DMatrix<f64>, g: &Graph, p: f64) -> Result<Vec<f64>> {
    check_columns(f, g.n())?;
    Ok(ratios(&Edges::new(g), f, p))
}

fn ratios(edges: &Edges, f: &DMatrix<f64>, p: f64) -> Vec<f64> {
    (0..f.ncols())
        .into_par_iter()
        .map(|k| {
            let (num, den) = edges.ratio_terms(f.column(k).as_slice(), p);
            num / den
        })
        .collect()
}

/// `J_E(F)`, the sum of the column ratios (no factor ½).
pub fn embed_objective(f: &DMatrix<f64>, g: &Graph, p: f64) -> Result<f64> {
    Ok(column_ratios(f, g, p)?.iter().sum())
}

/// Exact gradient `∂J_E/∂F`.
pub fn embed_gradient(f: &DMatrix<f64>, g: &Graph, p: f64) -> Result<DMatrix<f64>> {
    check_columns(f, g.n())?;
    Ok(gradient(&Edges::new(g), f, p).0)
}

/// Gradient plus `‖term1‖_F + ‖term2‖_F`, the scale stationarity is measured against.
fn gradient(edges: &Edges, f: &DMatrix<f64>, p: f64) -> (DMatrix<f64>, f64) {
    let cols: Vec<(Vec<f64>, f64, f64)> = (0..f.ncols())
        .into_par_iter()
        .map(|k| edges.column_gradient(f.column(k).as_slice(), p))
        .collect();
    let mut out = DMatrix::zeros(f.nrows(), f.ncols());
    let (mut s1, mut s2) = (0.0, 0.0);
    for (k, (col, a, b)) in cols.into_iter().enumerate() {
        out.column_mut(k).copy_from_slice(&col);
        s1 += a;
        s2 += b;
    }
    (out, s1.sqrt() + s2.sqrt())
}

/// `G = G_raw - F G_rawᵀ F`.
pub fn orthogonality_correct(g_raw: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g_raw.shape() != f.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} vs embedding {:?}",
            g_raw.shape(),
            f.shape()
        )));
    }
    Ok(g_raw - f * (g_raw.transpose() * f))
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Column order and
/// orientation are preserved.
pub fn orthonormalize(f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut q = f.clone();
    for k in 0..q.ncols() {
        for _ in 0..2 {
            for j in 0..k {
                let proj = q.column(j).dot(&q.column(k));
                let qj = q.column(j).clone_owned();
                q.column_mut(k).axpy(-proj, &qj, 1.0);
            }
        }
        let norm = q.column(k).norm();
        if !(norm > 1e-300) {
            return Err(Error::ZeroVector(format!(
                "column {k} became linearly dependent during re-orthonormalization"
            )));
        }
        q.column_mut(k).unscale_mut(norm);
    }
    Ok(q)
}

/// `max |FᵀF - I|`.
pub fn orthonormality_error(f: &DMatrix<f64>) -> f64 {
    let k = f.ncols();
    (f.transpose() * f - DMatrix::<f64>::identity(k, k)).amax()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Relative change of `J_E` fell below `rel_tol`.
    RelativeChange,
    /// Projected gradient vanished.
    Stationary,
    /// No halving of the step decreased `J_E`.
    NoDescent,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PLapReport {
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// `J_E` at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLapEigenSystem {
    /// `n × K`, orthonormal columns.
    pub f: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub p: f64,
}

impl PLapEigenSystem {
    /// `F diag(λ) Fᵀ`, symmetrized.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.f.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.lambda[k];
        }
        symmetrize(&(scaled * self.f.transpose()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLapMatrix {
    pub matrix: DMatrix<f64>,
    pub p: f64,
    /// Hex SHA-256 of the source graph.
    pub graph_digest: String,
    pub report: PLapReport,
}

pub fn approximate_p_laplacian(
    g: &Graph,
    cfg: &PLapConfig,
) -> Result<(PLapEigenSystem, PLapMatrix)> {
    let n = g.n();
    let k = cfg.validate(n)?;
    let p = cfg.p;
    let mut warnings = Vec::new();
    if !g.is_connected() {
        warnings.push("graph is disconnected; the Laplacian null space has dimension > 1".into());
        log::warn!("p-Laplacian on a disconnected graph ({n} nodes)");
    }

    let (spectrum, vectors) = sym_eigen_ascending(&laplacian(g));
    if p != 2.0 {
        let top = (k + 1).min(n);
        let repeated = (1..top).any(|i| {
            (spectrum[i] - spectrum[i - 1]).abs() <= 1e-9 * spectrum[i].abs().max(1.0)
        });
        if repeated {
            warnings.push(
                "repeated Laplacian eigenvalues at initialization; the starting basis is arbitrary \
                 within each eigenspace"
                    .into(),
            );
        }
    }

    let edges = Edges::new(g);
    let mut f = vectors.columns(0, k).clone_owned();
    let mut objective: f64 = ratios(&edges, &f, p).iter().sum();
    let mut trace = vec![objective];
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;

    for it in 1..=cfg.max_iters {
        let (raw, scale) = gradient(&edges, &f, p);
        let step_dir = orthogonality_correct(&raw, &f)?;
        let g_abs: f64 = step_dir.iter().map(|v| v.abs()).sum();
        if step_dir.norm() <= cfg.grad_tol * scale || g_abs == 0.0 {
            stop = StopReason::Stationary;
            break;
        }
        let f_abs: f64 = f.iter().map(|v| v.abs()).sum();
        let mut step = cfg.step_factor * f_abs / g_abs;
        let reorth = it % cfg.reorth_period == 0;

        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let mut cand = &f - &step_dir * step;
            if reorth {
                cand = orthonormalize(&cand)?;
            }
            if cand.column_iter().all(|c| c.iter().any(|&v| v != 0.0)) {
                let value: f64 = ratios(&edges, &cand, p).iter().sum();
                if value <= objective {
                    accepted = Some((cand, value));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, value)) = accepted else {
            stop = StopReason::NoDescent;
            break;
        };
        iterations = it;
        let rel = if objective > 0.0 {
            (objective - value) / objective
        } else {
            0.0
        };
        f = cand;
        objective = value;
        trace.push(value);
        if rel < cfg.rel_tol {
            stop = StopReason::RelativeChange;
            break;
        }
    }
    let converged = stop != StopReason::MaxIters;
    if !converged {
        warnings.push(format!("did not converge within {} iterations", cfg.max_iters));
        log::warn!("p-Laplacian (p = {p}) hit max_iters = {}", cfg.max_iters);
    }

    let f = orthonormalize(&f)?;
    let lambda = DVector::from_vec(ratios(&edges, &f, p));
    let system = PLapEigenSystem { f, lambda, p };
    let matrix = system.reconstruct();
    let report = PLapReport {
        iterations,
        converged,
        stop_reason: stop,
        objective_trace: trace,
        warnings,
    };
    Ok((
        system,
        PLapMatrix {
            matrix,
            p,
            graph_digest: g.digest_hex(),
            report,
        },
    ))
}
