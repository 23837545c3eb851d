//! JSON model container.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LossKind, OvrModel, RegParams, TrainedModel};
use crate::error::{Error, Result};
use crate::kernel::ResolvedKernel;

pub const MODEL_FORMAT: &str = "eplap-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub class: usize,
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub mu: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub loss: LossKind,
    pub kernel: ResolvedKernel,
    pub params: RegParams,
    pub gamma_exp: f64,
    pub p_values: Vec<f64>,
    /// Hex SHA-256 over the feature matrix shape and row-major bits.
    pub feature_digest: String,
    pub n_train: usize,
    pub dim: usize,
    /// Row-major training features.
    pub train_features: Vec<f64>,
    pub models: Vec<ModelEntry>,
}

pub fn feature_digest(x: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            h.update(x[(i, j)].to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl ModelFile {
    pub fn from_ovr(model: &OvrModel) -> Result<Self> {
        let first = model
            .models
            .first()
            .ok_or_else(|| Error::invalid("empty model"))?;
        let x = &first.train_features;
        let mut rows = Vec::with_capacity(x.len());
        for i in 0..x.nrows() {
            rows.extend(x.row(i).iter());
        }
        Ok(Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            loss: first.loss,
            kernel: first.kernel,
            params: first.params,
            gamma_exp: first.gamma_exp,
            p_values: first.p_values.clone(),
            feature_digest: feature_digest(x),
            n_train: x.nrows(),
            dim: x.ncols(),
            train_features: rows,
            models: model
                .classes
                .iter()
                .zip(&model.models)
                .map(|(&class, m)| ModelEntry {
                    class,
                    alpha: m.alpha.iter().copied().collect(),
                    bias: m.bias,
                    mu: m.mu.clone(),
                    objective_trace: m.objective_trace.clone(),
                    iterations: m.iterations,
                    converged: m.converged,
                })
                .collect(),
        })
    }

    pub fn into_ovr(self) -> Result<OvrModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model file {} v{}",
                self.format, self.version
            )));
        }
        if self.train_features.len() != self.n_train * self.dim {
            return Err(Error::shape("stored features do not match n_train × dim"));
        }
        let x = DMatrix::from_row_slice(self.n_train, self.dim, &self.train_features);
        if feature_digest(&x) != self.feature_digest {
            return Err(Error::invalid("training-feature digest mismatch"));
        }
        let x = Arc::new(x);
        let mut classes = Vec::new();
        let mut models = Vec::new();
        for e in self.models {
            if e.alpha.len() != self.n_train {
                return Err(Error::shape(format!("class {} has {} coefficients", e.class, e.alpha.len())));
            }
            classes.push(e.class);
            models.push(TrainedModel {
                alpha: DVector::from_vec(e.alpha),
                bias: e.bias,
                mu: e.mu,
                p_values: self.p_values.clone(),
                kernel: self.kernel,
                train_features: Arc::clone(&x),
                objective_trace: e.objective_trace,
                loss: self.loss,
                params: self.params,
                gamma_exp: self.gamma_exp,
                iterations: e.iterations,
                converged: e.converged,
            });
        }
        Ok(OvrModel { classes, models })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
