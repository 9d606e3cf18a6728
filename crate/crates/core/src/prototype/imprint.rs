use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{train_gates, GateParams, GateSample, PrototypeError, PrototypeStore};
use crate::assignment::{assign_centers, Target, DEFAULT_TOP_K};
use crate::geometry::Box3;

/// One few-shot support scene: per-point locations and features plus the
/// annotated novel instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportScene {
    pub id: String,
    pub locations: Vec<Vector3<f64>>,
    pub f3d: Array2<f64>,
    pub f2d: Array2<f64>,
    pub annotations: Vec<(Box3, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImprintConfig {
    pub top_k: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Re-initialize the gates before training instead of continuing from
    /// the previous session's weights.
    pub reinit_gates: bool,
}

impl Default for ImprintConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            epochs: 200,
            lr: 0.01,
            reinit_gates: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImprintReport {
    /// Categories that received at least one prototype update, with the
    /// number of scenes that contributed.
    pub imprinted: Vec<(String, usize)>,
    /// Categories for which no scene produced a positive location.
    pub without_positives: Vec<String>,
    pub gate_samples: usize,
    pub loss_trace: Vec<f64>,
}

fn usable(row: ndarray::ArrayView1<f64>) -> bool {
    let n2 = row.dot(&row);
    n2.is_finite() && n2 > 0.0
}

/// Outcome of the prototype half of imprinting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeImprint {
    pub imprinted: Vec<(String, usize)>,
    pub without_positives: Vec<String>,
    /// Classes that received at least one update, in `classes` order.
    pub trained: Vec<String>,
    /// One sample per positive location, labeled by index into `trained`.
    pub samples: Vec<GateSample>,
}

/// Updates the prototypes of `classes` from the support scenes. Each scene
/// contributes the mean feature of its positive locations, scenes taken in
/// input order.
pub fn imprint_prototypes(
    support: &[SupportScene],
    classes: &[String],
    store: &mut PrototypeStore,
    top_k: usize,
) -> Result<PrototypeImprint, PrototypeError> {
    for c in classes {
        if store.get(c).is_none() {
            return Err(PrototypeError::UnknownCategory(c.clone()));
        }
    }

    // Positive location indices per scene per class.
    let positives: Vec<Vec<Vec<usize>>> = support
        .iter()
        .map(|scene| {
            let targets: Vec<Target> = scene
                .annotations
                .iter()
                .map(|(b, name)| Target {
                    bbox: *b,
                    category: classes.iter().position(|c| c == name).map(|i| i as u32),
                })
                .collect();
            let result = assign_centers(&scene.locations, &targets, top_k);
            (0..classes.len())
                .map(|ci| {
                    result
                        .entries
                        .iter()
                        .enumerate()
                        .filter(|(i, e)| {
                            e.is_some_and(|a| a.category == Some(ci as u32))
                                && usable(scene.f3d.row(*i))
                                && usable(scene.f2d.row(*i))
                        })
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut out = PrototypeImprint::default();
    let mut raw = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let mut scenes_used = 0;
        for (scene, pos) in support.iter().zip(&positives) {
            let idx = &pos[ci];
            if idx.is_empty() {
                continue;
            }
            let inv = 1.0 / idx.len() as f64;
            let mut m3 = vec![0.0; store.dim3d];
            let mut m2 = vec![0.0; store.dim2d];
            for &i in idx {
                m3.iter_mut()
                    .zip(scene.f3d.row(i))
                    .for_each(|(a, v)| *a += v * inv);
                m2.iter_mut()
                    .zip(scene.f2d.row(i))
                    .for_each(|(a, v)| *a += v * inv);
                raw.push((ci, scene.f3d.row(i).to_vec(), scene.f2d.row(i).to_vec()));
            }
            store.update_prototype(class, &m3, &m2)?;
            scenes_used += 1;
        }
        if scenes_used == 0 {
            log::warn!("category `{class}` has no positive support locations");
            out.without_positives.push(class.clone());
        } else {
            out.imprinted.push((class.clone(), scenes_used));
            out.trained.push(class.clone());
        }
    }

    // Labels index into `trained`, which skips classes without positives.
    out.samples = raw
        .into_iter()
        .map(|(ci, f3d, f2d)| GateSample {
            f3d,
            f2d,
            label: out.trained.iter().position(|c| *c == classes[ci]),
        })
        .collect();
    Ok(out)
}

/// Imprints prototypes of `classes` and then trains the gates on the
/// positive locations.
pub fn imprint_session(
    support: &[SupportScene],
    classes: &[String],
    store: &mut PrototypeStore,
    gates: &mut GateParams,
    cfg: &ImprintConfig,
) -> Result<ImprintReport, PrototypeError> {
    if support.is_empty() || classes.is_empty() {
        return Err(PrototypeError::EmptySupport);
    }
    let imprint = imprint_prototypes(support, classes, store, cfg.top_k)?;
    if imprint.trained.is_empty() {
        return Err(PrototypeError::EmptySupport);
    }
    if cfg.reinit_gates {
        *gates = gates.reinitialized();
    }
    gates.add_classes(classes);
    let training = train_gates(
        &imprint.samples,
        gates,
        store,
        &imprint.trained,
        cfg.epochs,
        cfg.lr,
    )?;
    *gates = training.params;
    Ok(ImprintReport {
        imprinted: imprint.imprinted,
        without_positives: imprint.without_positives,
        gate_samples: imprint.samples.len(),
        loss_trace: training.trace,
    })
}
