//! Ensemble-regularized kernel classifiers.
//!
//! Both trainers alternate two exact steps over a fused regularizer
//! `L = Σ_k μ_k^γ L_k`: with `μ` fixed, solve for the representer
//! coefficients `α` (a linear system for least squares, the dual QP for the
//! hinge loss); with `α` fixed, set `μ` by the closed-form simplex update of
//! [`crate::ensemble::update_weights`]. A single candidate reduces to plain
//! single-graph Laplacian regularization.

mod kls;
mod model;
mod multiclass;
pub mod qp;
mod svm;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::ensemble::{update_weights, weighted_smoothness, CandidateSet, EnsembleWeights};
use crate::error::{Error, Result};
use crate::kernel::ResolvedKernel;

pub use kls::{kls_objective, solve_kls_alpha, train_eplapkls};
pub use model::{ModelFile, MODEL_FORMAT, MODEL_VERSION};
pub use multiclass::{train_one_vs_rest, OvrModel};
pub use qp::{solve_box_simplex_qp, QpConfig, QpSolution};
pub use svm::{build_svm_dual, svm_bias, svm_objective, train_eplapsvm, SvmDual};

/// Ambient (`γ_A`) and intrinsic (`γ_I`) penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    pub gamma_a: f64,
    pub gamma_i: f64,
}

impl RegParams {
    pub fn new(gamma_a: f64, gamma_i: f64) -> Result<Self> {
        if !(gamma_a >= 0.0) || !(gamma_i >= 0.0) || !gamma_a.is_finite() || !gamma_i.is_finite() {
            return Err(Error::invalid(format!(
                "penalties must be finite and >= 0, got γ_A = {gamma_a}, γ_I = {gamma_i}"
            )));
        }
        if gamma_a == 0.0 && gamma_i == 0.0 {
            log::warn!("γ_A = γ_I = 0: the model is unregularized");
        }
        Ok(Self { gamma_a, gamma_i })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub outer_max_iters: usize,
    pub outer_rel_tol: f64,
    pub qp_max_iters: usize,
    pub qp_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_max_iters: 50,
            outer_rel_tol: 1e-6,
            qp_max_iters: 500,
            qp_tol: 1e-10,
        }
    }
}

impl TrainConfig {
    fn qp(&self) -> QpConfig {
        QpConfig {
            max_iters: self.qp_max_iters,
            tol: self.qp_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(alias = "kls")]
    Squared,
    #[serde(alias = "svm")]
    Hinge,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Coefficients over every training point, labeled and unlabeled.
    pub alpha: DVector<f64>,
    /// Zero for least squares.
    pub bias: f64,
    pub mu: Vec<f64>,
    pub p_values: Vec<f64>,
    pub kernel: ResolvedKernel,
    pub train_features: Arc<DMatrix<f64>>,
    pub objective_trace: Vec<f64>,
    pub loss: LossKind,
    pub params: RegParams,
    pub gamma_exp: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `score_j = Σ_i α_i K(x_i, x_j) + b`.
pub fn predict(model: &TrainedModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let cross = model.kernel.cross(x, &model.train_features)?;
    Ok(cross * &model.alpha + DVector::from_element(x.nrows(), model.bias))
}

/// Binary training problem over a fixed Gram matrix. `y` holds ±1 at labeled
/// positions and 0 elsewhere.
pub(crate) struct Problem<'a> {
    pub gram: &'a DMatrix<f64>,
    pub cands: &'a CandidateSet,
    pub y: &'a [f64],
    pub mask: &'a [bool],
}

impl Problem<'_> {
    fn check(&self) -> Result<()> {
        let n = self.gram.nrows();
        if self.gram.shape() != (n, n)
            || self.cands.n() != n
            || self.y.len() != n
            || self.mask.len() != n
        {
            return Err(Error::shape(format!(
                "gram {:?}, candidates {}, labels {}, mask {}",
                self.gram.shape(),
                self.cands.n(),
                self.y.len(),
                self.mask.len()
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::invalid("no labeled samples"));
        }
        Ok(())
    }

    fn n_labeled(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Output of one alternating run.
pub(crate) struct Fit {
    pub alpha: DVector<f64>,
    pub bias: f64,
    pub mu: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// The `μ` half-step. Returns `None` when it cannot move `μ` (one candidate, or
/// `γ_I = 0` where the objective does not depend on `μ`).
pub(crate) fn next_weights(
    prob: &Problem<'_>,
    alpha: &DVector<f64>,
    current: &EnsembleWeights,
    gamma_i: f64,
) -> Result<Option<EnsembleWeights>> {
    if prob.cands.len() == 1 || gamma_i == 0.0 {
        return Ok(None);
    }
    let r = crate::ensemble::smoothness_terms(alpha, prob.gram, prob.cands)?;
    let mu = update_weights(&r, current.gamma_exp(), gamma_i, prob.gram.nrows())?;
    // The closed form is the minimizer; guard against rounding pushing it above.
    if weighted_smoothness(&mu, &r, current.gamma_exp())
        > weighted_smoothness(current.mu(), &r, current.gamma_exp())
    {
        return Ok(None);
    }
    Ok(Some(EnsembleWeights::new(mu, current.gamma_exp())?))
}

/// `±1` targets for a binary task: `positive` maps to +1, everything else to
/// -1, unlabeled samples to 0.
pub fn binary_targets(ds: &Dataset, positive: usize) -> Vec<f64> {
    ds.labels()
        .iter()
        .zip(ds.labeled_mask())
        .map(|(&c, &m)| match (m, c == positive) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => -1.0,
        })
        .collect()
}

/// LU solve that rejects numerically singular systems.
pub(crate) fn solve_checked(a: DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let lu = a.lu();
    let u = lu.u();
    let diag = u.diagonal();
    let max = diag.amax();
    let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(max > 0.0) || min / max < 1e-15 {
        return Err(Error::Singular(format!(
            "{what}: pivot ratio {:.1e}; add kernel jitter or increase γ_A",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::Singular(format!("{what}: LU solve failed")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what}: non-finite solution")));
    }
    Ok(x)
}

fn relative_change(old: f64, new: f64) -> f64 {
    (old - new).abs() / old.abs().max(f64::MIN_POSITIVE)
}

/// Two-class dataset to (`positive` class id, targets). The larger class id is +1.
fn binary_view(train: &Dataset) -> Result<(usize, Vec<f64>)> {
    let classes = train.classes();
    if classes.len() != 2 {
        return Err(Error::invalid(format!(
            "binary trainer needs exactly 2 classes, found {}",
            classes.len()
        )));
    }
    let positive = classes[1];
    Ok((positive, binary_targets(train, positive)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_two_moons;

    #[test]
    fn targets_follow_mask() {
        let ds = make_two_moons(8, 0.0, 0).unwrap();
        let mask = vec![true, false, true, false, true, false, false, true];
        let ds = ds.with_labeled_mask(mask).unwrap();
        assert_eq!(binary_targets(&ds, 1), vec![-1., 0., -1., 0., 1., 0., 0., 1.]);
    }

    #[test]
    fn penalties_must_be_nonnegative() {
        assert!(RegParams::new(-1.0, 0.0).is_err());
        assert!(RegParams::new(0.0, f64::NAN).is_err());
        assert!(RegParams::new(0.0, 0.0).is_ok());
    }

    fn tiny_model(alpha: Vec<f64>, bias: f64) -> (TrainedModel, DMatrix<f64>) {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.5, -0.3, 2.0]);
        let kernel = crate::kernel::KernelSpec {
            jitter: 0.0,
            ..Default::default()
        }
        .resolve(&x)
        .unwrap();
        let model = TrainedModel {
            alpha: DVector::from_vec(alpha),
            bias,
            mu: vec![1.0],
            p_values: vec![2.0],
            kernel,
            train_features: Arc::new(x.clone()),
            objective_trace: vec![],
            loss: LossKind::Squared,
            params: RegParams::new(0.0, 0.0).unwrap(),
            gamma_exp: 2.0,
            iterations: 0,
            converged: true,
        };
        (model, x)
    }

    #[test]
    fn predict_cases() {
        let (m, x) = tiny_model(vec![1.0, 0.0, 0.0], 0.0);
        let s = predict(&m, &x.rows(0, 1).clone_owned()).unwrap();
        assert_eq!(s[0], 1.0);

        let (m, x) = tiny_model(vec![0.0; 3], 0.7);
        assert!(predict(&m, &x).unwrap().iter().all(|&v| v == 0.7));

        let (m, x) = tiny_model(vec![0.4, -1.2, 0.9], -0.1);
        let gram = m.kernel.gram(&x);
        let want = &gram * &m.alpha + DVector::from_element(3, -0.1);
        assert!((predict(&m, &x).unwrap() - want).amax() < 1e-10);
        assert!(predict(&m, &DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn singular_systems_are_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DMatrix::from_element(2, 1, 1.0);
        assert!(matches!(solve_checked(a, &b, "test"), Err(Error::Singular(_))));
    }
}
