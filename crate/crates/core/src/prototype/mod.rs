//! Modality-specific momentum prototypes, cosine class scores, and the
//! gated multimodal fusion on top of them.

mod gate;
mod imprint;

pub use gate::{
    fuse_scores, gate_forward, gate_loss_and_grad, train_gates, Dense, GammaActivation, GateOutput,
    GateParams, GateSample, GateTraining, Mlp, DEFAULT_HIDDEN,
};
pub use imprint::{
    imprint_prototypes, imprint_session, ImprintConfig, ImprintReport, PrototypeImprint,
    SupportScene,
};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_MOMENTUM: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrototypeError {
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("category `{0}` is already registered")]
    CategoryCollision(String),
    #[error("category `{0}` has no prototype yet")]
    Uninitialized(String),
    #[error("momentum must lie in [0, 1), got {0}")]
    InvalidMomentum(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {0} has zero or non-finite norm")]
    ZeroNormRow(usize),
    #[error("support set is empty")]
    EmptySupport,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, trace: Vec<f64> },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
}

/// Which session introduced a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "session")]
pub enum CategoryRole {
    Base,
    Novel(usize),
}

/// How the very first update of a prototype is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FirstUpdate {
    /// Copy the mean feature.
    #[default]
    Imprint,
    /// Blend with the zero vector like any later update.
    ZeroEma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrototype {
    pub name: String,
    pub role: CategoryRole,
    pub proto3d: Vec<f64>,
    pub proto2d: Vec<f64>,
    pub updates: usize,
}

impl CategoryPrototype {
    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }
}

/// Per-category 3D and 2D prototypes with a fixed EMA momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub version: u32,
    pub momentum: f64,
    pub first_update: FirstUpdate,
    pub dim3d: usize,
    pub dim2d: usize,
    pub categories: Vec<CategoryPrototype>,
}

impl PrototypeStore {
    pub fn new(dim3d: usize, dim2d: usize, momentum: f64) -> Result<Self, PrototypeError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(PrototypeError::InvalidMomentum(momentum));
        }
        Ok(Self {
            version: STORE_VERSION,
            momentum,
            first_update: FirstUpdate::Imprint,
            dim3d,
            dim2d,
            categories: Vec::new(),
        })
    }

    pub fn with_first_update(mut self, rule: FirstUpdate) -> Self {
        self.first_update = rule;
        self
    }

    pub fn register(&mut self, name: &str, role: CategoryRole) -> Result<(), PrototypeError> {
        if self.get(name).is_some() {
            return Err(PrototypeError::CategoryCollision(name.to_string()));
        }
        self.categories.push(CategoryPrototype {
            name: name.to_string(),
            role,
            proto3d: vec![0.0; self.dim3d],
            proto2d: vec![0.0; self.dim2d],
            updates: 0,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CategoryPrototype> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn names_with_role(&self, pred: impl Fn(CategoryRole) -> bool) -> Vec<String> {
        self.categories
            .iter()
            .filter(|c| pred(c.role))
            .map(|c| c.name.clone())
            .collect()
    }

    /// EMA update of both modality prototypes of `name`.
    pub fn update_prototype(
        &mut self,
        name: &str,
        mean3d: &[f64],
        mean2d: &[f64],
    ) -> Result<(), PrototypeError> {
        let (d3, d2, mu, rule) = (self.dim3d, self.dim2d, self.momentum, self.first_update);
        if mean3d.len() != d3 || mean2d.len() != d2 {
            return Err(PrototypeError::DimensionMismatch(format!(
                "got ({}, {}), store holds ({d3}, {d2})",
                mean3d.len(),
                mean2d.len()
            )));
        }
        let entry = self
            .categories
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| PrototypeError::UnknownCategory(name.to_string()))?;
        let imprint = entry.updates == 0 && rule == FirstUpdate::Imprint;
        for (proto, mean) in [(&mut entry.proto3d, mean3d), (&mut entry.proto2d, mean2d)] {
            for (t, f) in proto.iter_mut().zip(mean) {
                *t = if imprint {
                    *f
                } else {
                    mu * *t + (1.0 - mu) * f
                };
            }
        }
        entry.updates += 1;
        Ok(())
    }

    /// Stacks prototypes of `names` into (C × L, C × K) matrices.
    pub fn matrices(&self, names: &[String]) -> Result<(Array2<f64>, Array2<f64>), PrototypeError> {
        let mut p3 = Array2::zeros((names.len(), self.dim3d));
        let mut p2 = Array2::zeros((names.len(), self.dim2d));
        for (i, n) in names.iter().enumerate() {
            let c = self
                .get(n)
                .ok_or_else(|| PrototypeError::UnknownCategory(n.clone()))?;
            if !c.is_initialized() {
                return Err(PrototypeError::Uninitialized(n.clone()));
            }
            p3.row_mut(i).assign(&ndarray::ArrayView1::from(&c.proto3d));
            p2.row_mut(i).assign(&ndarray::ArrayView1::from(&c.proto2d));
        }
        Ok((p3, p2))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("store serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn row_normalized(m: ArrayView2<f64>) -> Result<Array2<f64>, PrototypeError> {
    let mut out = m.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(PrototypeError::ZeroNormRow(i));
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

/// Cosine similarity of every feature row against every prototype row.
pub fn class_scores(
    feats: ArrayView2<f64>,
    protos: ArrayView2<f64>,
) -> Result<Array2<f64>, PrototypeError> {
    if feats.ncols() != protos.ncols() {
        return Err(PrototypeError::DimensionMismatch(format!(
            "features have {} columns, prototypes {}",
            feats.ncols(),
            protos.ncols()
        )));
    }
    let f = row_normalized(feats)?;
    let p = row_normalized(protos)?;
    Ok(f.dot(&p.t()).mapv(|s| s.clamp(-1.0, 1.0)))
}

/// Row-major score blocks for one batch of proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBlock {
    pub s3d: Array2<f64>,
    pub s2d: Array2<f64>,
    pub fused: Array2<f64>,
}
