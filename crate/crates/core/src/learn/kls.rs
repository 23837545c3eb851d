//! Kernel least squares on the fused regularizer.
//!
//! The `α` step solves `(JK + γ_A I + (γ_I/n²) L K) α = Y`, where `J` selects
//! labeled points and `Y` is the zero-padded label vector. That system is the
//! exact stationarity condition of
//!
//! ```text
//! (1/l) Σ_labeled (y_i - f(x_i))² + (γ_A/l) αᵀKα + (γ_I/(l n²)) αᵀK L K α
//! ```
//!
//! i.e. the squared-loss objective with both penalties divided by `l`, so the
//! recorded objective trace evaluates that objective.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{
    binary_view, next_weights, relative_change, solve_checked, Fit, LossKind, Problem, RegParams,
    TrainConfig, TrainedModel,
};
use crate::dataset::Dataset;
use crate::ensemble::{fuse, smoothness_terms, CandidateSet, EnsembleWeights};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

pub fn solve_kls_alpha(
    kmat: &DMatrix<f64>,
    lfused: &DMatrix<f64>,
    y: &[f64],
    labeled_mask: &[bool],
    params: &RegParams,
) -> Result<DVector<f64>> {
    let n = kmat.nrows();
    if kmat.shape() != (n, n) || lfused.shape() != (n, n) || y.len() != n || labeled_mask.len() != n {
        return Err(Error::shape(format!(
            "kernel {:?}, regularizer {:?}, labels {}, mask {}",
            kmat.shape(),
            lfused.shape(),
            y.len(),
            labeled_mask.len()
        )));
    }
    let nn = (n * n) as f64;
    let mut a = lfused * kmat * (params.gamma_i / nn);
    for i in 0..n {
        if labeled_mask[i] {
            let row = kmat.row(i);
            a.row_mut(i).zip_apply(&row, |x, k| *x += k);
        }
        a[(i, i)] += params.gamma_a;
    }
    let rhs = DMatrix::from_fn(n, 1, |i, _| if labeled_mask[i] { y[i] } else { 0.0 });
    let x = solve_checked(a, &rhs, "least-squares system")?;
    Ok(x.column(0).clone_owned())
}

/// `(1/l) Σ_labeled (y_i - (Kα)_i)² + γ_A αᵀKα + (γ_I/n²) αᵀK (Σ μ_k^γ L_k) K α`.
pub fn kls_objective(
    alpha: &DVector<f64>,
    weights: &EnsembleWeights,
    kmat: &DMatrix<f64>,
    cands: &CandidateSet,
    y: &[f64],
    labeled_mask: &[bool],
    params: &RegParams,
) -> Result<f64> {
    let n = kmat.nrows();
    if weights.mu().len() != cands.len() {
        return Err(Error::shape("weights and candidates differ in length"));
    }
    if y.len() != n || labeled_mask.len() != n {
        return Err(Error::shape("labels or mask length differ from n"));
    }
    let f = kmat * alpha;
    let l = labeled_mask.iter().filter(|&&m| m).count().max(1) as f64;
    let loss: f64 = (0..n)
        .filter(|&i| labeled_mask[i])
        .map(|i| (y[i] - f[i]).powi(2))
        .sum::<f64>()
        / l;
    let ambient = alpha.dot(&f);
    let r = smoothness_terms(alpha, kmat, cands)?;
    let intrinsic: f64 = weights.coefficients().iter().zip(&r).map(|(c, rk)| c * rk).sum();
    Ok(loss + params.gamma_a * ambient + params.gamma_i / (n * n) as f64 * intrinsic)
}

/// Penalties under which the `α` step is the exact minimizer of [`kls_objective`].
pub(crate) fn effective_params(params: &RegParams, l: usize) -> RegParams {
    RegParams {
        gamma_a: params.gamma_a / l as f64,
        gamma_i: params.gamma_i / l as f64,
    }
}

pub(crate) fn fit_kls(
    prob: &Problem<'_>,
    params: &RegParams,
    gamma_exp: f64,
    cfg: &TrainConfig,
) -> Result<Fit> {
    prob.check()?;
    let eff = effective_params(params, prob.n_labeled());
    let alpha_step = |w: &EnsembleWeights| -> Result<DVector<f64>> {
        let lf = fuse(prob.cands, w)?;
        solve_kls_alpha(prob.gram, &lf, prob.y, prob.mask, params)
    };
    let objective = |alpha: &DVector<f64>, w: &EnsembleWeights| {
        kls_objective(alpha, w, prob.gram, prob.cands, prob.y, prob.mask, &eff)
    };

    let mut weights = EnsembleWeights::uniform(prob.cands.len(), gamma_exp)?;
    let mut alpha = alpha_step(&weights)?;
    let mut value = objective(&alpha, &weights)?;
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.outer_max_iters {
        let Some(next) = next_weights(prob, &alpha, &weights, params.gamma_i)? else {
            converged = true;
            break;
        };
        iterations = it;
        let next_alpha = alpha_step(&next)?;
        let next_value = objective(&next_alpha, &next)?;
        let rel = relative_change(value, next_value);
        weights = next;
        alpha = next_alpha;
        value = next_value;
        trace.push(value);
        if rel < cfg.outer_rel_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("least-squares alternation stopped at {} outer iterations", cfg.outer_max_iters);
    }
    Ok(Fit {
        alpha,
        bias: 0.0,
        mu: weights.mu().to_vec(),
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Binary least-squares training; the larger class id is the positive class.
pub fn train_eplapkls(
    train: &Dataset,
    cands: &CandidateSet,
    kspec: &KernelSpec,
    params: &RegParams,
    gamma_exp: f64,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let (_, y) = binary_view(train)?;
    let kernel = kspec.resolve(train.features())?;
    let gram = kernel.gram(train.features());
    let prob = Problem {
        gram: &gram,
        cands,
        y: &y,
        mask: train.labeled_mask(),
    };
    let fit = fit_kls(&prob, params, gamma_exp, cfg)?;
    Ok(TrainedModel {
        alpha: fit.alpha,
        bias: 0.0,
        mu: fit.mu,
        p_values: cands.p_values().to_vec(),
        kernel,
        train_features: Arc::new(train.features().clone()),
        objective_trace: fit.objective_trace,
        loss: LossKind::Squared,
        params: *params,
        gamma_exp,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}
