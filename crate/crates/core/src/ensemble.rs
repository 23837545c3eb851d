//! Fusion of candidate regularizers `L = Σ_k μ_k^γ L_k` and the closed-form
//! simplex update of `μ`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for the smoothness terms entering the weight update.
pub const SMOOTHNESS_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// Immutable set of symmetric `n × n` candidate matrices.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    matrices: Arc<Vec<DMatrix<f64>>>,
    p_values: Vec<f64>,
}

impl CandidateSet {
    pub fn new(matrices: Vec<DMatrix<f64>>, p_values: Vec<f64>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::invalid("candidate set is empty"));
        }
        if p_values.len() != matrices.len() {
            return Err(Error::shape(format!(
                "{} matrices but {} p values",
                matrices.len(),
                p_values.len()
            )));
        }
        let n = matrices[0].nrows();
        for (k, m) in matrices.iter().enumerate() {
            if m.shape() != (n, n) {
                return Err(Error::shape(format!(
                    "candidate {k} is {:?}, expected {n}×{n}",
                    m.shape()
                )));
            }
        }
        Ok(Self {
            matrices: Arc::new(matrices),
            p_values,
        })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn n(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn p_values(&self) -> &[f64] {
        &self.p_values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    mu: Vec<f64>,
    gamma_exp: f64,
}

impl EnsembleWeights {
    pub fn new(mu: Vec<f64>, gamma_exp: f64) -> Result<Self> {
        if !(gamma_exp > 1.0) || !gamma_exp.is_finite() {
            return Err(Error::invalid(format!(
                "relaxation exponent must be > 1, got {gamma_exp}"
            )));
        }
        check_simplex(&mu)?;
        Ok(Self { mu, gamma_exp })
    }

    pub fn uniform(m: usize, gamma_exp: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("uniform weights over zero candidates"));
        }
        Self::new(vec![1.0 / m as f64; m], gamma_exp)
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn gamma_exp(&self) -> f64 {
        self.gamma_exp
    }

    /// Fusion coefficients `μ_k^γ`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.mu.iter().map(|m| m.powf(self.gamma_exp)).collect()
    }
}

fn check_simplex(mu: &[f64]) -> Result<()> {
    if mu.is_empty() {
        return Err(Error::invalid("weight vector is empty"));
    }
    if mu.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::invalid(format!("weights must be nonnegative, got {mu:?}")));
    }
    let sum: f64 = mu.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `Σ_k c_k L_k` for arbitrary coefficients.
pub fn combine(cands: &CandidateSet, coeffs: &[f64]) -> Result<DMatrix<f64>> {
    if coeffs.len() != cands.len() {
        return Err(Error::shape(format!(
            "{} coefficients for {} candidates",
            coeffs.len(),
            cands.len()
        )));
    }
    let n = cands.n();
    let mut out = DMatrix::zeros(n, n);
    for (m, &c) in cands.matrices().iter().zip(coeffs) {
        out += m * c;
    }
    Ok(out)
}

/// `L = Σ_k μ_k^γ L_k`.
pub fn fuse(cands: &CandidateSet, w: &EnsembleWeights) -> Result<DMatrix<f64>> {
    combine(cands, &w.coefficients())
}

/// `r_k = αᵀ K L_k K α`.
pub fn smoothness_terms(alpha: &DVector<f64>, kmat: &DMatrix<f64>, cands: &CandidateSet) -> Result<Vec<f64>> {
    let n = cands.n();
    if alpha.len() != n || kmat.shape() != (n, n) {
        return Err(Error::shape(format!(
            "alpha of length {}, kernel {:?}, candidates {n}×{n}",
            alpha.len(),
            kmat.shape()
        )));
    }
    let v = kmat * alpha;
    Ok(cands.matrices().iter().map(|l| v.dot(&(l * &v))).collect())
}

/// Closed-form minimizer of `Σ_k μ_k^γ r_k` over the simplex,
/// `μ_k ∝ (n² / (γ_I r_k))^(1/(γ-1))`, evaluated in log space.
pub fn update_weights(r: &[f64], gamma_exp: f64, gamma_i: f64, n: usize) -> Result<Vec<f64>> {
    if r.is_empty() {
        return Err(Error::invalid("no smoothness terms"));
    }
    if !(gamma_exp > 1.0) || !gamma_exp.is_finite() {
        return Err(Error::invalid(format!(
            "relaxation exponent must be > 1, got {gamma_exp}"
        )));
    }
    if !(gamma_i > 0.0) || n == 0 {
        return Err(Error::invalid(format!(
            "weight update needs γ_I > 0 and n > 0, got γ_I = {gamma_i}, n = {n}"
        )));
    }
    let expo = 1.0 / (gamma_exp - 1.0);
    let base = 2.0 * (n as f64).ln() - gamma_i.ln();
    let logs: Vec<f64> = r
        .iter()
        .map(|&rk| expo * (base - rk.max(SMOOTHNESS_FLOOR).ln()))
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// `Σ_k μ_k^γ r_k`, the part of the objective the weight update minimizes.
pub fn weighted_smoothness(mu: &[f64], r: &[f64], gamma_exp: f64) -> f64 {
    mu.iter().zip(r).map(|(m, rk)| m.powf(gamma_exp) * rk).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a + a.transpose()
    }

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn single_candidate_fuses_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = random_sym(4, &mut rng);
        let c = CandidateSet::new(vec![l.clone()], vec![2.0]).unwrap();
        let w = EnsembleWeights::uniform(1, 2.0).unwrap();
        assert_eq!(fuse(&c, &w).unwrap(), l);
    }

    #[test]
    fn identical_pair_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_sym(4, &mut rng);
        let c = CandidateSet::new(vec![l.clone(), l.clone()], vec![2.0, 2.5]).unwrap();
        let w = EnsembleWeights::new(vec![0.5, 0.5], 2.0).unwrap();
        assert!((fuse(&c, &w).unwrap() - l * 0.5).amax() < 1e-15);
    }

    #[test]
    fn convex_combination_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mats: Vec<_> = (0..3).map(|_| random_sym(5, &mut rng)).collect();
        let c = CandidateSet::new(mats.clone(), vec![2.0, 2.4, 2.8]).unwrap();
        let mu = [0.2, 0.5, 0.3];
        let got = combine(&c, &mu).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += mu[k] * mats[k][(i, j)];
                }
                assert!((got[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(CandidateSet::new(vec![], vec![]).is_err());
        assert!(CandidateSet::new(vec![DMatrix::zeros(2, 2), DMatrix::zeros(3, 3)], vec![2.0, 2.0]).is_err());
        assert!(EnsembleWeights::new(vec![0.5, 0.6], 2.0).is_err());
        assert!(EnsembleWeights::new(vec![1.5, -0.5], 2.0).is_err());
        assert!(EnsembleWeights::new(vec![1.0], 1.0).is_err());
        let c = CandidateSet::new(vec![DMatrix::zeros(2, 2)], vec![2.0]).unwrap();
        assert!(combine(&c, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn smoothness_terms_cases() {
        let l = DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]);
        let c = CandidateSet::new(vec![l.clone(), l * 3.0], vec![2.0, 2.5]).unwrap();
        let k = DMatrix::identity(2, 2);
        let r = smoothness_terms(&DVector::from_vec(vec![1.0, -1.0]), &k, &c).unwrap();
        assert_eq!(r, vec![4.0, 12.0]);
        let zero = smoothness_terms(&DVector::zeros(2), &k, &c).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(smoothness_terms(&DVector::zeros(3), &k, &c).is_err());
    }

    #[test]
    fn smoothness_terms_match_naive_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let mats: Vec<_> = (0..2).map(|_| random_sym(n, &mut rng)).collect();
        let kmat = random_psd(n, &mut rng);
        let alpha = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let c = CandidateSet::new(mats.clone(), vec![2.0, 3.0]).unwrap();
        let got = smoothness_terms(&alpha, &kmat, &c).unwrap();
        for (k, l) in mats.iter().enumerate() {
            let mut want = 0.0;
            for a in 0..n {
                for b in 0..n {
                    for c2 in 0..n {
                        for d in 0..n {
                            want += alpha[a] * kmat[(a, b)] * l[(b, c2)] * kmat[(c2, d)] * alpha[d];
                        }
                    }
                }
            }
            assert!((got[k] - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn weight_update_cases() {
        let mu = update_weights(&[0.7, 0.7], 2.0, 1.0, 10).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-15 && (mu[1] - 0.5).abs() < 1e-15);
        let mu = update_weights(&[1.0, 4.0], 2.0, 0.3, 50).unwrap();
        assert!((mu[0] - 0.8).abs() < 1e-14 && (mu[1] - 0.2).abs() < 1e-14);
        let mu = update_weights(&[0.0, 0.0, 0.0], 3.0, 1.0, 5).unwrap();
        assert!(mu.iter().all(|&m| (m - 1.0 / 3.0).abs() < 1e-15));
        assert!(update_weights(&[1.0], 1.0, 1.0, 5).is_err());
        assert!(update_weights(&[1.0], 2.0, 0.0, 5).is_err());
    }

    #[test]
    fn weight_update_matches_printed_formula() {
        let r = [0.3, 1.7, 0.05];
        let (gamma, gi, n) = (1.5, 0.01, 40usize);
        let terms: Vec<f64> = r
            .iter()
            .map(|rk| ((n * n) as f64 / (gi * rk)).powf(1.0 / (gamma - 1.0)))
            .collect();
        let total: f64 = terms.iter().sum();
        let got = update_weights(&r, gamma, gi, n).unwrap();
        for k in 0..3 {
            assert!((got[k] - terms[k] / total).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weight_update_on_simplex_and_scale_free(
            r in proptest::collection::vec(1e-6f64..1e3, 1..6),
            gamma in 1.1f64..6.0,
            s in 1e-3f64..1e3,
        ) {
            let mu = update_weights(&r, gamma, 0.5, 30).unwrap();
            let sum: f64 = mu.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(mu.iter().all(|&m| m >= 0.0));
            let scaled: Vec<f64> = r.iter().map(|v| v * s).collect();
            let mu2 = update_weights(&scaled, gamma, 0.5, 30).unwrap();
            for (a, b) in mu.iter().zip(&mu2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn psd_candidates_fuse_to_psd(seed in 0u64..500, a in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mats: Vec<_> = (0..2).map(|_| random_psd(5, &mut rng)).collect();
            let c = CandidateSet::new(mats, vec![2.0, 2.8]).unwrap();
            let w = EnsembleWeights::new(vec![a, 1.0 - a], 2.0).unwrap();
            let l = fuse(&c, &w).unwrap();
            prop_assert!((&l - l.transpose()).amax() < 1e-12);
            prop_assert!(min_eigenvalue(&l) >= -1e-8);
        }
    }
}
