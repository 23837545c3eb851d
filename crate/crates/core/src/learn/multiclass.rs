use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::kls::fit_kls;
use super::svm::fit_svm;
use super::{binary_targets, LossKind, Problem, RegParams, TrainConfig, TrainedModel};
use crate::dataset::Dataset;
use crate::ensemble::CandidateSet;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

/// One binary model per class (that class +1, the rest -1).
#[derive(Debug, Clone)]
pub struct OvrModel {
    pub classes: Vec<usize>,
    pub models: Vec<TrainedModel>,
}

impl OvrModel {
    /// `q × classes` score matrix.
    pub fn scores(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let first = self
            .models
            .first()
            .ok_or_else(|| Error::invalid("empty one-vs-rest model"))?;
        // All tasks share features and kernel, so one cross-kernel serves every model.
        let cross = first.kernel.cross(x, &first.train_features)?;
        let mut out = DMatrix::zeros(x.nrows(), self.models.len());
        for (c, m) in self.models.iter().enumerate() {
            let col = &cross * &m.alpha;
            for r in 0..x.nrows() {
                out[(r, c)] = col[r] + m.bias;
            }
        }
        Ok(out)
    }

    /// Argmax class per row; ties go to the earlier class.
    pub fn decide(&self, scores: &DMatrix<f64>) -> Vec<usize> {
        (0..scores.nrows())
            .map(|r| {
                let mut best = 0;
                for c in 1..scores.ncols() {
                    if scores[(r, c)] > scores[(r, best)] {
                        best = c;
                    }
                }
                self.classes[best]
            })
            .collect()
    }

    pub fn predict_labels(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(self.decide(&self.scores(x)?))
    }
}

/// Trains every class against the rest over one shared Gram matrix and
/// candidate set. Tasks run in parallel.
pub fn train_one_vs_rest(
    train: &Dataset,
    cands: &CandidateSet,
    kspec: &KernelSpec,
    params: &RegParams,
    gamma_exp: f64,
    cfg: &TrainConfig,
    loss: LossKind,
) -> Result<OvrModel> {
    let classes = train.classes();
    if classes.len() < 2 {
        return Err(Error::invalid(format!(
            "one-vs-rest needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    for &c in &classes {
        let labeled = train
            .labels()
            .iter()
            .zip(train.labeled_mask())
            .any(|(&l, &m)| m && l == c);
        if !labeled {
            return Err(Error::NoLabeledSamples(c));
        }
    }
    if cands.n() != train.len() {
        return Err(Error::shape(format!(
            "candidates are {}×{0}, training set has {} samples",
            cands.n(),
            train.len()
        )));
    }
    let kernel = kspec.resolve(train.features())?;
    let gram = kernel.gram(train.features());
    let features = Arc::new(train.features().clone());

    let models = classes
        .par_iter()
        .map(|&c| {
            let y = binary_targets(train, c);
            let prob = Problem {
                gram: &gram,
                cands,
                y: &y,
                mask: train.labeled_mask(),
            };
            let fit = match loss {
                LossKind::Squared => fit_kls(&prob, params, gamma_exp, cfg)?,
                LossKind::Hinge => fit_svm(&prob, params, gamma_exp, cfg)?,
            };
            Ok(TrainedModel {
                alpha: fit.alpha,
                bias: fit.bias,
                mu: fit.mu,
                p_values: cands.p_values().to_vec(),
                kernel,
                train_features: Arc::clone(&features),
                objective_trace: fit.objective_trace,
                loss,
                params: *params,
                gamma_exp,
                iterations: fit.iterations,
                converged: fit.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OvrModel { classes, models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_blobs, make_two_moons, mask_labels};
    use crate::graph::{build_knn_graph, laplacian, GraphSpec};
    use crate::learn::{predict, train_eplapkls};

    fn laplacian_candidates(ds: &Dataset) -> CandidateSet {
        let g = build_knn_graph(ds.features(), &GraphSpec { k_neighbors: 6, ..Default::default() }).unwrap();
        CandidateSet::new(vec![laplacian(&g)], vec![2.0]).unwrap()
    }

    #[test]
    fn two_class_ovr_agrees_with_binary() {
        let ds = make_two_moons(40, 0.1, 1).unwrap();
        let ds = mask_labels(&ds, 0.2, 3).unwrap();
        let c = laplacian_candidates(&ds);
        let p = RegParams::new(1e-3, 0.5).unwrap();
        let cfg = TrainConfig::default();
        let ovr = train_one_vs_rest(&ds, &c, &KernelSpec::default(), &p, 2.0, &cfg, LossKind::Squared).unwrap();
        let bin = train_eplapkls(&ds, &c, &KernelSpec::default(), &p, 2.0, &cfg).unwrap();
        let scores = ovr.scores(ds.features()).unwrap();
        let b = predict(&bin, ds.features()).unwrap();
        let decided = ovr.decide(&scores);
        for r in 0..ds.len() {
            assert!((scores[(r, 0)] + scores[(r, 1)]).abs() < 1e-9);
            assert!((scores[(r, 1)] - b[r]).abs() < 1e-9);
            assert_eq!(decided[r], if b[r] > 0.0 { 1 } else { 0 });
        }
    }

    #[test]
    fn separable_blobs_recover_training_labels() {
        let centers = vec![vec![0.0, 0.0], vec![4.0, 0.0], vec![0.0, 4.0]];
        let ds = make_blobs(&centers, 15, 0.4, 2).unwrap();
        let ds = mask_labels(&ds, 0.2, 1).unwrap();
        let c = laplacian_candidates(&ds);
        let p = RegParams::new(1e-3, 1.0).unwrap();
        for loss in [LossKind::Squared, LossKind::Hinge] {
            let ovr = train_one_vs_rest(&ds, &c, &KernelSpec::default(), &p, 2.0, &TrainConfig::default(), loss)
                .unwrap();
            assert_eq!(ovr.models.len(), 3);
            assert_eq!(ovr.predict_labels(ds.features()).unwrap(), ds.labels());
        }
    }

    #[test]
    fn class_without_labels_is_rejected() {
        let centers = vec![vec![0.0], vec![5.0]];
        let ds = make_blobs(&centers, 5, 0.3, 0).unwrap();
        let mask: Vec<bool> = ds.labels().iter().map(|&c| c == 0).collect();
        let ds = ds.with_labeled_mask(mask).unwrap();
        let c = laplacian_candidates(&ds);
        let p = RegParams::new(1e-3, 1.0).unwrap();
        let err = train_one_vs_rest(&ds, &c, &KernelSpec::default(), &p, 2.0, &TrainConfig::default(), LossKind::Squared)
            .unwrap_err();
        assert!(matches!(err, Error::NoLabeledSamples(1)));
    }

    #[test]
    fn protocol_shape_21_classes() {
        let centers: Vec<Vec<f64>> = (0..21).map(|c| vec![(c % 7) as f64 * 3.0, (c / 7) as f64 * 3.0]).collect();
        let ds = make_blobs(&centers, 10, 0.3, 4).unwrap();
        let ds = mask_labels(&ds, 0.5, 2).unwrap();
        let c = laplacian_candidates(&ds);
        let p = RegParams::new(1e-3, 0.1).unwrap();
        let ovr = train_one_vs_rest(&ds, &c, &KernelSpec::default(), &p, 2.0, &TrainConfig::default(), LossKind::Squared)
            .unwrap();
        assert_eq!(ovr.models.len(), 21);
        assert!(ovr.models.iter().all(|m| m.alpha.len() == ds.len()));
    }
}
