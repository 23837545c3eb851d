//! Kernel Gram matrices for the representer expansion `f(x) = Σ_i α_i K(x_i, x)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{median, sq_dist, Bandwidth};

pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Rbf,
    Linear,
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rbf" => Ok(KernelKind::Rbf),
            "linear" => Ok(KernelKind::Linear),
            other => Err(format!("unknown kernel `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// RBF only. `Auto` is the median pairwise training distance.
    pub bandwidth: Bandwidth,
    pub jitter: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidth: Bandwidth::Auto,
            jitter: DEFAULT_JITTER,
        }
    }
}

/// A kernel with its bandwidth fixed to a number, ready for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedKernel {
    pub kind: KernelKind,
    /// `None` for the linear kernel.
    pub sigma: Option<f64>,
    pub jitter: f64,
}

impl KernelSpec {
    pub fn resolve(&self, train: &DMatrix<f64>) -> Result<ResolvedKernel> {
        if !(self.jitter >= 0.0) {
            return Err(Error::invalid(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        let sigma = match (self.kind, self.bandwidth) {
            (KernelKind::Linear, _) => None,
            (KernelKind::Rbf, Bandwidth::Fixed(s)) => {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::invalid(format!("kernel bandwidth must be > 0, got {s}")));
                }
                Some(s)
            }
            (KernelKind::Rbf, Bandwidth::Auto) => {
                let n = train.nrows();
                let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        d.push(sq_dist(train, i, train, j).sqrt());
                    }
                }
                let s = if d.is_empty() { 0.0 } else { median(&mut d) };
                if !(s > 0.0) {
                    return Err(Error::ZeroBandwidth("median pairwise training distance"));
                }
                Some(s)
            }
        };
        Ok(ResolvedKernel {
            kind: self.kind,
            sigma,
            jitter: self.jitter,
        })
    }
}

impl ResolvedKernel {
    fn eval(&self, a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
        match self.kind {
            KernelKind::Rbf => {
                let s = self.sigma.expect("rbf kernel carries a bandwidth");
                (-sq_dist(a, i, b, j) / (2.0 * s * s)).exp()
            }
            KernelKind::Linear => (0..a.ncols()).map(|c| a[(i, c)] * b[(j, c)]).sum(),
        }
    }

    /// `K_ij = K(x_i, x_j) + jitter·δ_ij`.
    pub fn gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval(x, i, x, j);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += self.jitter;
        }
        k
    }

    /// Entry `i` is `K(x_i, x)`, without jitter.
    pub fn row(&self, train: &DMatrix<f64>, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != train.ncols() {
            return Err(Error::shape(format!(
                "query has {} features, training data {}",
                x.len(),
                train.ncols()
            )));
        }
        let q = DMatrix::from_row_slice(1, x.len(), x);
        Ok(DVector::from_fn(train.nrows(), |i, _| self.eval(train, i, &q, 0)))
    }

    /// `q × n` cross-kernel between query rows and training rows.
    pub fn cross(&self, queries: &DMatrix<f64>, train: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if queries.ncols() != train.ncols() {
            return Err(Error::shape(format!(
                "queries have {} features, training data {}",
                queries.ncols(),
                train.ncols()
            )));
        }
        Ok(DMatrix::from_fn(queries.nrows(), train.nrows(), |r, i| {
            self.eval(train, i, queries, r)
        }))
    }
}

pub fn gram(features: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    Ok(spec.resolve(features)?.gram(features))
}

pub fn kernel_row(train: &DMatrix<f64>, x: &[f64], spec: &ResolvedKernel) -> Result<DVector<f64>> {
    spec.row(train, x)
}
