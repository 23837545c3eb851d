//! Hinge-loss training on the fused regularizer through its dual.
//!
//! With `M = 2γ_A I + 2(γ_I/n²) L K`, the dual matrix is
//! `Q = Y J K M⁻¹ Jᵀ Y` and the primal coefficients are recovered as
//! `α = M⁻¹ Jᵀ Y β`. `J` is the `l × n` selector of labeled points and `Y`
//! the diagonal of their ±1 labels.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_box_simplex_qp, QpConfig};
use super::{
    binary_view, next_weights, relative_change, solve_checked, Fit, LossKind, Problem, RegParams,
    TrainConfig, TrainedModel,
};
use crate::dataset::Dataset;
use crate::ensemble::{fuse, smoothness_terms, CandidateSet, EnsembleWeights};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

/// Dual matrix and the linear map back to primal coefficients.
#[derive(Debug, Clone)]
pub struct SvmDual {
    pub q: DMatrix<f64>,
    /// `n × l` matrix `M⁻¹ Jᵀ Y`.
    pub recover: DMatrix<f64>,
    /// Positions of the labeled points, ascending; dual coordinate `t` belongs to `labeled[t]`.
    pub labeled: Vec<usize>,
}

impl SvmDual {
    pub fn recover_alpha(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.recover * beta
    }
}

/// `labels_l[t]` is the ±1 label of the `t`-th labeled point in index order.
pub fn build_svm_dual(
    kmat: &DMatrix<f64>,
    lfused: &DMatrix<f64>,
    labels_l: &[f64],
    labeled_mask: &[bool],
    params: &RegParams,
) -> Result<SvmDual> {
    let n = kmat.nrows();
    let labeled: Vec<usize> = (0..labeled_mask.len()).filter(|&i| labeled_mask[i]).collect();
    if kmat.shape() != (n, n) || lfused.shape() != (n, n) || labeled_mask.len() != n {
        return Err(Error::shape(format!(
            "kernel {:?}, regularizer {:?}, mask {}",
            kmat.shape(),
            lfused.shape(),
            labeled_mask.len()
        )));
    }
    if labels_l.len() != labeled.len() {
        return Err(Error::shape(format!(
            "{} labels for {} labeled points",
            labels_l.len(),
            labeled.len()
        )));
    }
    let l = labeled.len();
    let nn = (n * n) as f64;
    let mut m = lfused * kmat * (2.0 * params.gamma_i / nn);
    for i in 0..n {
        m[(i, i)] += 2.0 * params.gamma_a;
    }
    let mut rhs = DMatrix::zeros(n, l);
    for (t, &i) in labeled.iter().enumerate() {
        rhs[(i, t)] = labels_l[t];
    }
    let recover = solve_checked(m, &rhs, "hinge-loss dual system")?;
    let kx = kmat * &recover;
    let q = DMatrix::from_fn(l, l, |s, t| labels_l[s] * kx[(labeled[s], t)]);
    let q = (&q + q.transpose()) * 0.5;
    Ok(SvmDual { q, recover, labeled })
}

/// Bias from the KKT conditions. With margin support vectors
/// (`0 < β_i < C`) it is the mean of `y_i - g_i`; otherwise the midpoint of
/// the interval of biases consistent with the bound multipliers.
pub fn svm_bias(decision: &[f64], labels_l: &[f64], beta: &DVector<f64>, upper: f64) -> f64 {
    let eps = 1e-8 * upper;
    let margin: Vec<usize> = (0..beta.len())
        .filter(|&t| beta[t] > eps && beta[t] < upper - eps)
        .collect();
    if !margin.is_empty() {
        return margin.iter().map(|&t| labels_l[t] - decision[t]).sum::<f64>() / margin.len() as f64;
    }
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for t in 0..beta.len() {
        let y = labels_l[t];
        let bound = y - decision[t];
        let at_zero = beta[t] <= eps;
        // at zero: y(g + b) >= 1; at the box: y(g + b) <= 1
        if (y > 0.0) == at_zero {
            lo = lo.max(bound);
        } else {
            hi = hi.min(bound);
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

/// Hinge objective `(1/l) Σ (1 - y_i f(x_i))_+ + γ_A αᵀKα + (γ_I/n²) αᵀK L K α`
/// with `f = Kα + b`.
#[allow(clippy::too_many_arguments)]
pub fn svm_objective(
    alpha: &DVector<f64>,
    bias: f64,
    weights: &EnsembleWeights,
    kmat: &DMatrix<f64>,
    cands: &CandidateSet,
    y: &[f64],
    labeled_mask: &[bool],
    params: &RegParams,
) -> Result<f64> {
    let n = kmat.nrows();
    if y.len() != n || labeled_mask.len() != n || weights.mu().len() != cands.len() {
        return Err(Error::shape("labels, mask or weights do not match the problem"));
    }
    let f = kmat * alpha;
    let l = labeled_mask.iter().filter(|&&m| m).count().max(1) as f64;
    let hinge: f64 = (0..n)
        .filter(|&i| labeled_mask[i])
        .map(|i| (1.0 - y[i] * (f[i] + bias)).max(0.0))
        .sum::<f64>()
        / l;
    let r = smoothness_terms(alpha, kmat, cands)?;
    let intrinsic: f64 = weights.coefficients().iter().zip(&r).map(|(c, rk)| c * rk).sum();
    Ok(hinge + params.gamma_a * alpha.dot(&f) + params.gamma_i / (n * n) as f64 * intrinsic)
}

struct AlphaStep {
    alpha: DVector<f64>,
    bias: f64,
}

fn solve_alpha(
    prob: &Problem<'_>,
    weights: &EnsembleWeights,
    params: &RegParams,
    qp: &QpConfig,
) -> Result<AlphaStep> {
    let labels_l: Vec<f64> = (0..prob.y.len()).filter(|&i| prob.mask[i]).map(|i| prob.y[i]).collect();
    let upper = 1.0 / labels_l.len() as f64;
    let lf = fuse(prob.cands, weights)?;
    let dual = build_svm_dual(prob.gram, &lf, &labels_l, prob.mask, params)?;
    let sol = solve_box_simplex_qp(&dual.q, &labels_l, upper, qp)?;
    if !sol.converged {
        log::warn!("dual QP stopped after {} iterations", sol.iterations);
    }
    let alpha = dual.recover_alpha(&sol.beta);
    let g = prob.gram * &alpha;
    let decision: Vec<f64> = dual.labeled.iter().map(|&i| g[i]).collect();
    let bias = svm_bias(&decision, &labels_l, &sol.beta, upper);
    Ok(AlphaStep { alpha, bias })
}

pub(crate) fn fit_svm(
    prob: &Problem<'_>,
    params: &RegParams,
    gamma_exp: f64,
    cfg: &TrainConfig,
) -> Result<Fit> {
    prob.check()?;
    let labeled_y = prob.y.iter().zip(prob.mask).filter(|(_, &m)| m).map(|(v, _)| *v);
    let (pos, neg) = labeled_y.fold((0, 0), |(p, q), v| if v > 0.0 { (p + 1, q) } else { (p, q + 1) });
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("hinge-loss training needs labeled samples of both classes"));
    }
    let qp = cfg.qp();
    let objective = |alpha: &DVector<f64>, b: f64, w: &EnsembleWeights| {
        svm_objective(alpha, b, w, prob.gram, prob.cands, prob.y, prob.mask, params)
    };

    let mut weights = EnsembleWeights::uniform(prob.cands.len(), gamma_exp)?;
    let mut step = solve_alpha(prob, &weights, params, &qp)?;
    let mut value = objective(&step.alpha, step.bias, &weights)?;
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.outer_max_iters {
        let Some(next) = next_weights(prob, &step.alpha, &weights, params.gamma_i)? else {
            converged = true;
            break;
        };
        iterations = it;
        let kept = objective(&step.alpha, step.bias, &next)?;
        let cand = solve_alpha(prob, &next, params, &qp)?;
        let cand_value = objective(&cand.alpha, cand.bias, &next)?;
        // An inexact dual solve may not improve on the previous α under the new μ.
        let next_value = if cand_value <= kept {
            step = cand;
            cand_value
        } else {
            kept
        };
        let rel = relative_change(value, next_value);
        weights = next;
        value = next_value;
        trace.push(value);
        if rel < cfg.outer_rel_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("hinge-loss alternation stopped at {} outer iterations", cfg.outer_max_iters);
    }
    Ok(Fit {
        alpha: step.alpha,
        bias: step.bias,
        mu: weights.mu().to_vec(),
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Binary hinge-loss training; the larger class id is the positive class.
pub fn train_eplapsvm(
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
    let fit = fit_svm(&prob, params, gamma_exp, cfg)?;
    Ok(TrainedModel {
        alpha: fit.alpha,
        bias: fit.bias,
        mu: fit.mu,
        p_values: cands.p_values().to_vec(),
        kernel,
        train_features: Arc::new(train.features().clone()),
        objective_trace: fit.objective_trace,
        loss: LossKind::Hinge,
        params: *params,
        gamma_exp,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelKind;
    use crate::learn::predict;
    use crate::linalg::{min_eigenvalue, Bandwidth};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn identity_kernel_dual_without_manifold_term() {
        let n = 5;
        let k = DMatrix::identity(n, n);
        let l = DMatrix::zeros(n, n);
        let mask = [true, false, true, true, false];
        let y = [1.0, -1.0, -1.0];
        let p = RegParams::new(0.25, 0.0).unwrap();
        let d = build_svm_dual(&k, &l, &y, &mask, &p).unwrap();
        for s in 0..3 {
            for t in 0..3 {
                assert!((d.q[(s, t)] - if s == t { 1.0 / (2.0 * 0.25) } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dual_matches_naive_composition() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let n = 7;
        let k = random_psd(n, &mut r) + DMatrix::identity(n, n) * 0.1;
        let lm = random_psd(n, &mut r);
        let mask = [true, true, false, true, false, true, false];
        let y = [1.0, -1.0, -1.0, 1.0];
        let p = RegParams::new(0.3, 2.0).unwrap();
        let d = build_svm_dual(&k, &lm, &y, &mask, &p).unwrap();
        assert!((&d.q - d.q.transpose()).amax() < 1e-10);
        assert!(min_eigenvalue(&d.q) >= -1e-8);

        // Y J K M⁻¹ Jᵀ Y with explicit factor matrices and an inverse.
        let lidx = [0, 1, 3, 5];
        let mut j = DMatrix::zeros(4, n);
        for (t, &i) in lidx.iter().enumerate() {
            j[(t, i)] = 1.0;
        }
        let yd = DMatrix::from_diagonal(&DVector::from_vec(y.to_vec()));
        let m = DMatrix::identity(n, n) * (2.0 * 0.3) + &lm * &k * (2.0 * 2.0 / 49.0);
        let minv = m.try_inverse().unwrap();
        let want = &yd * &j * &k * &minv * j.transpose() * &yd;
        assert!((&d.q - &want).amax() < 1e-8 * want.amax().max(1.0));
        let beta = DVector::from_vec(vec![0.1, 0.2, 0.05, 0.15]);
        let alpha_want = &minv * j.transpose() * &yd * &beta;
        assert!((d.recover_alpha(&beta) - alpha_want).amax() < 1e-10);
    }

    #[test]
    fn symmetric_pair_has_zero_bias() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -1.0, -0.5]);
        let ds = Dataset::new(x, vec![1, 0], vec![true, true], vec!["a".into(), "b".into()]).unwrap();
        let c = CandidateSet::new(vec![DMatrix::zeros(2, 2)], vec![2.0]).unwrap();
        let spec = KernelSpec {
            kind: KernelKind::Linear,
            bandwidth: Bandwidth::Auto,
            jitter: 0.0,
        };
        let p = RegParams::new(0.1, 0.0).unwrap();
        let m = train_eplapsvm(&ds, &c, &spec, &p, 2.0, &TrainConfig::default()).unwrap();
        assert!(m.bias.abs() < 1e-9);
        let s = predict(&m, &DMatrix::zeros(1, 2)).unwrap();
        assert!(s[0].abs() < 1e-9);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let ds = Dataset::new(x, vec![0, 0, 1], vec![true, true, false], vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        let c = CandidateSet::new(vec![DMatrix::zeros(3, 3)], vec![2.0]).unwrap();
        let p = RegParams::new(0.1, 0.0).unwrap();
        assert!(train_eplapsvm(&ds, &c, &KernelSpec::default(), &p, 2.0, &TrainConfig::default()).is_err());
    }

    #[test]
    fn bias_fallback_midpoint() {
        // No margin vectors: one point at zero (y=+1, g=2 -> b >= -1),
        // one at the box (y=-1, g=0.5 -> b >= -1.5), one at zero (y=-1, g=-3 -> b <= 2).
        let beta = DVector::from_vec(vec![0.0, 0.5, 0.0]);
        let b = svm_bias(&[2.0, 0.5, -3.0], &[1.0, -1.0, -1.0], &beta, 0.5);
        assert!((b - 0.5).abs() < 1e-15);
    }
}
