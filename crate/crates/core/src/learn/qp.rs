//! Dual SVM quadratic program
//!
//! ```text
//! max Σβ_i - ½ βᵀQβ   s.t.  Σ β_i y_i = 0,  0 ≤ β_i ≤ C
//! ```
//!
//! solved by a primal-dual interior-point method. The interior solution is
//! projected onto the feasible polytope, then the face it identifies is solved
//! exactly; the polished point is kept when it is at least as good.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpConfig {
    pub max_iters: usize,
    /// Relative tolerance on the primal, dual and complementarity residuals.
    pub tol: f64,
}

impl Default for QpConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn dual_objective(q: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
    beta.sum() - 0.5 * beta.dot(&(q * beta))
}

/// Euclidean projection of `z` onto `{β : yᵀβ = 0, 0 ≤ β ≤ upper}` for `y ∈ {±1}^l`.
pub fn project(z: &DVector<f64>, y: &[f64], upper: f64) -> DVector<f64> {
    let clip = |nu: f64| DVector::from_fn(z.len(), |i, _| (z[i] - nu * y[i]).clamp(0.0, upper));
    let residual = |b: &DVector<f64>| b.iter().zip(y).map(|(v, s)| v * s).sum::<f64>();
    let span = z.amax() + upper + 1.0;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(&clip(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut nu = 0.5 * (lo + hi);
    let mut beta = clip(nu);
    // Polish on the linear piece: h'(ν) = -|free set|.
    let free = beta.iter().filter(|&&b| b > 0.0 && b < upper).count();
    if free > 0 {
        nu += residual(&beta) / free as f64;
        let polished = clip(nu);
        if residual(&polished).abs() <= residual(&beta).abs() {
            beta = polished;
        }
    }
    beta
}

pub fn solve_box_simplex_qp(q: &DMatrix<f64>, y: &[f64], upper: f64, cfg: &QpConfig) -> Result<QpSolution> {
    let l = y.len();
    if q.shape() != (l, l) {
        return Err(Error::shape(format!("Q is {:?} for {l} labels", q.shape())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::invalid("dual labels must be ±1"));
    }
    if !(upper > 0.0) {
        return Err(Error::invalid(format!("box bound must be > 0, got {upper}")));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("dual matrix has non-finite entries"));
    }
    if l == 0 {
        return Ok(QpSolution {
            beta: DVector::zeros(0),
            objective: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let ipm = interior_point(q, y, upper, cfg);
    let mut beta = project(&ipm.beta, y, upper);
    let mut value = dual_objective(q, &beta);
    if let Some(exact) = polish(q, y, upper, &ipm) {
        let v = dual_objective(q, &exact);
        if v >= value {
            beta = exact;
            value = v;
        }
    }
    Ok(QpSolution {
        beta,
        objective: value,
        iterations: ipm.iterations,
        converged: ipm.converged,
    })
}

struct Ipm {
    beta: DVector<f64>,
    /// Multipliers of `β ≥ 0` and `β ≤ C`.
    z: DVector<f64>,
    w: DVector<f64>,
    iterations: usize,
    converged: bool,
}

/// Mehrotra predictor-corrector on `min ½βᵀQβ - 1ᵀβ`.
fn interior_point(q: &DMatrix<f64>, y: &[f64], c: f64, cfg: &QpConfig) -> Ipm {
    let l = y.len();
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::from_element(l, 0.5 * c);
    let scale = (q * &beta).amax().max(1.0);
    let mut z = DVector::from_element(l, scale);
    let mut w = DVector::from_element(l, scale);
    let mut nu = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    let frac = |x: &DVector<f64>, dx: &DVector<f64>| {
        x.iter()
            .zip(dx.iter())
            .filter(|(_, d)| **d < 0.0)
            .fold(1.0f64, |a, (v, d)| a.min(-v / d))
    };

    for it in 0..cfg.max_iters.min(500) {
        let t = beta.map(|b| c - b);
        let qb = q * &beta;
        let rd = &qb - DVector::from_element(l, 1.0) - &yv * nu - &z + &w;
        let rp = yv.dot(&beta);
        let mu = (beta.dot(&z) + t.dot(&w)) / (2 * l) as f64;
        let f = 0.5 * beta.dot(&qb) - beta.sum();
        // The gap is measured against |f| itself: solutions can be tiny when Q is large.
        if rd.amax() <= cfg.tol * (1.0 + qb.amax())
            && rp.abs() <= cfg.tol * c
            && 2.0 * l as f64 * mu <= cfg.tol * f.abs().max(cfg.tol * c * l as f64)
        {
            converged = true;
            break;
        }
        iterations = it + 1;

        let mut kkt = DMatrix::zeros(l + 1, l + 1);
        kkt.view_mut((0, 0), (l, l)).copy_from(q);
        for i in 0..l {
            kkt[(i, i)] += z[i] / beta[i] + w[i] / t[i];
            kkt[(i, l)] = -y[i];
            kkt[(l, i)] = y[i];
        }
        let lu = kkt.lu();
        let solve = |tau1: &DVector<f64>, tau2: &DVector<f64>| {
            let mut rhs = DVector::zeros(l + 1);
            for i in 0..l {
                rhs[i] = -rd[i] + tau1[i] / beta[i] - z[i] - tau2[i] / t[i] + w[i];
            }
            rhs[l] = -rp;
            let sol = lu.solve(&rhs)?;
            let db = sol.rows(0, l).clone_owned();
            let dz = DVector::from_fn(l, |i, _| (tau1[i] - beta[i] * z[i] - z[i] * db[i]) / beta[i]);
            let dw = DVector::from_fn(l, |i, _| (tau2[i] - t[i] * w[i] + w[i] * db[i]) / t[i]);
            Some((db, sol[l], dz, dw))
        };
        let zero = DVector::zeros(l);
        let Some((db_a, _, dz_a, dw_a)) = solve(&zero, &zero) else { break };
        let step = |db: &DVector<f64>, dz: &DVector<f64>, dw: &DVector<f64>| {
            frac(&beta, db).min(frac(&t, &(-db))).min(frac(&z, dz)).min(frac(&w, dw))
        };
        let a_aff = step(&db_a, &dz_a, &dw_a);
        let mu_aff = ((&beta + &db_a * a_aff).dot(&(&z + &dz_a * a_aff))
            + (&t - &db_a * a_aff).dot(&(&w + &dw_a * a_aff)))
            / (2 * l) as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
        let tau1 = DVector::from_fn(l, |i, _| sigma * mu - db_a[i] * dz_a[i]);
        let tau2 = DVector::from_fn(l, |i, _| sigma * mu + db_a[i] * dw_a[i]);
        let Some((db, dnu, dz, dw)) = solve(&tau1, &tau2) else { break };
        let a = (0.995 * step(&db, &dz, &dw)).min(1.0);
        beta += &db * a;
        z += &dz * a;
        w += &dw * a;
        nu += dnu * a;
        // keep strictly interior despite rounding
        for i in 0..l {
            beta[i] = beta[i].clamp(f64::MIN_POSITIVE, c * (1.0 - f64::EPSILON));
        }
    }
    Ipm {
        beta,
        z,
        w,
        iterations,
        converged,
    }
}

/// Solves the equality-constrained problem on the face the interior point
/// identifies, giving exact bound values for the active coordinates.
fn polish(q: &DMatrix<f64>, y: &[f64], c: f64, ipm: &Ipm) -> Option<DVector<f64>> {
    let l = y.len();
    let mut beta = DVector::zeros(l);
    let mut free = Vec::new();
    // Compare slack and multiplier in units of C and of the gradient.
    let g = 1.0 + (q * &ipm.beta).amax();
    for i in 0..l {
        let (b, t) = (ipm.beta[i] / c, (c - ipm.beta[i]) / c);
        if b < ipm.z[i] / g && b < t {
            beta[i] = 0.0;
        } else if t < ipm.w[i] / g && t < b {
            beta[i] = c;
        } else {
            free.push(i);
        }
    }
    let fixed_sum: f64 = (0..l).map(|i| y[i] * beta[i]).sum();
    if free.is_empty() {
        return (fixed_sum.abs() <= 1e-12 * c).then_some(beta);
    }
    let m = free.len();
    let mut a = DMatrix::zeros(m + 1, m + 1);
    let mut rhs = DVector::zeros(m + 1);
    for (s, &i) in free.iter().enumerate() {
        for (t, &j) in free.iter().enumerate() {
            a[(s, t)] = q[(i, j)];
        }
        a[(s, m)] = -y[i];
        a[(m, s)] = y[i];
        rhs[s] = 1.0 - (0..l).map(|j| q[(i, j)] * beta[j]).sum::<f64>();
    }
    rhs[m] = -fixed_sum;
    let sol = a.lu().solve(&rhs)?;
    for (s, &i) in free.iter().enumerate() {
        let v = sol[s];
        if !v.is_finite() || v < -1e-12 * c || v > c * (1.0 + 1e-12) {
            return None;
        }
        beta[i] = v.clamp(0.0, c);
    }
    Some(beta)
}
