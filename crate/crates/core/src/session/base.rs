use nalgebra::Vector3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::geometry::{Box3, IouMode};
use crate::losses::{
    aux_total, bce_dice_objectness, cosine_alignment_loss, weighted_diou_regression, LossError,
    LossReport,
};
use crate::prototype::{
    imprint_prototypes, CategoryRole, PrototypeImprint, PrototypeStore, SupportScene,
};
use crate::synth::Proposal;
use crate::vlm::{mine_unknown_objects, MiningConfig, MiningResult, PseudoObject, VlmFrame};
use crate::weighting::{combined_weights, WeightConfig, WeightField};

/// Mass-weighted IoU of pseudo boxes against the true unknown objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoIou {
    /// Mass = sum of combined weights of the box's members.
    pub weighted: f64,
    /// Mass = member count.
    pub unweighted: f64,
    pub weighted_mass: f64,
    pub unweighted_mass: f64,
    /// Best IoU of every pseudo box against any unknown object.
    pub per_box: Vec<f64>,
}

pub fn pseudo_label_iou(
    objects: &[PseudoObject],
    weighted: &WeightField,
    unweighted: &WeightField,
    unknown_gt: &[Box3],
    mode: IouMode,
) -> PseudoIou {
    let per_box: Vec<f64> = objects
        .iter()
        .map(|o| {
            unknown_gt
                .iter()
                .map(|g| mode.iou(&o.bbox, g))
                .fold(0.0, f64::max)
        })
        .collect();
    let pooled = |field: &WeightField| {
        let (mut num, mut mass) = (0.0, 0.0);
        for (j, iou) in per_box.iter().enumerate() {
            let m: f64 = field.entries_for(j).iter().map(|e| e.weight).sum();
            num += m * iou;
            mass += m;
        }
        (num, mass)
    };
    let (wn, wm) = pooled(weighted);
    let (un, um) = pooled(unweighted);
    let ratio = |n: f64, m: f64| if m > 0.0 { n / m } else { 0.0 };
    PseudoIou {
        weighted: ratio(wn, wm),
        unweighted: ratio(un, um),
        weighted_mass: wm,
        unweighted_mass: um,
        per_box,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSceneArtifacts {
    pub scene: String,
    pub mining: MiningResult,
    pub weights: WeightField,
    /// `None` when no pseudo box has usable members.
    pub losses: Option<LossReport>,
    pub pseudo_iou: PseudoIou,
}

/// Auxiliary losses of one scene, averaged over pseudo boxes. Each member
/// point's predicted box is the covering proposal with the nearest center,
/// or the pseudo box moved onto the point when nothing covers it.
fn scene_losses(
    points: &[Vector3<f64>],
    aligned: &Array2<f64>,
    objects: &[PseudoObject],
    field: &WeightField,
    proposals: &[Proposal],
) -> Result<Option<LossReport>, SessionError> {
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    let (mut feat, mut reg, mut boxes) = (0.0, 0.0, 0usize);
    for (j, obj) in objects.iter().enumerate() {
        let entries = field.entries_for(j);
        if entries.is_empty() {
            continue;
        }
        let weights: Vec<f64> = entries.iter().map(|e| e.weight).collect();
        let z = entries.len() as f64;
        let rows: Vec<Vec<f64>> = entries
            .iter()
            .map(|e| aligned.row(e.point).to_vec())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        feat += cosine_alignment_loss(&refs, &obj.feature, &weights, z)
            .map_err(|e| SessionError::Invalid(e.to_string()))?;

        let mut preds = Vec::with_capacity(entries.len());
        for e in entries {
            let p = points[e.point];
            let covering = proposals
                .iter()
                .filter(|q| q.bbox.contains(&p))
                .min_by(|a, b| {
                    (a.bbox.center() - p)
                        .norm()
                        .total_cmp(&(b.bbox.center() - p).norm())
                });
            pred.push(covering.map_or(0.0, |q| q.objectness));
            target.push(e.weight);
            preds.push(match covering {
                Some(q) => q.bbox,
                None => Box3::new(p, obj.bbox.size(), obj.bbox.yaw())?,
            });
        }
        reg += weighted_diou_regression(&preds, &obj.bbox, &weights, z)
            .map_err(|e| SessionError::Invalid(e.to_string()))?;
        boxes += 1;
    }
    let region = vec![true; pred.len()];
    match bce_dice_objectness(&pred, &target, &region) {
        Ok(obj) => {
            let n = boxes as f64;
            Ok(Some(aux_total(obj, feat / n, reg / n, pred.len(), boxes)))
        }
        Err(LossError::EmptyRegion) => Ok(None),
        Err(e) => Err(SessionError::Invalid(e.to_string())),
    }
}

/// Mines, weights and scores one base-session scene.
#[allow(clippy::too_many_arguments)]
pub fn run_base_scene(
    scene_id: &str,
    points: &[Vector3<f64>],
    aligned: &Array2<f64>,
    frames: &[VlmFrame],
    proposals: &[Proposal],
    base_gt: &[Box3],
    unknown_gt: &[Box3],
    mining: &MiningConfig,
    weighting: &WeightConfig,
    iou_mode: IouMode,
) -> Result<BaseSceneArtifacts, SessionError> {
    let mined = mine_unknown_objects(frames, base_gt, mining)?;
    let boxes: Vec<Box3> = mined.objects.iter().map(|o| o.bbox).collect();
    let weights = combined_weights(points, &boxes, aligned, weighting)?;
    let flat = combined_weights(points, &boxes, aligned, &WeightConfig::unweighted())?;
    let pseudo_iou = pseudo_label_iou(&mined.objects, &weights, &flat, unknown_gt, iou_mode);
    let losses = scene_losses(points, aligned, &mined.objects, &weights, proposals)?;
    Ok(BaseSceneArtifacts {
        scene: scene_id.to_string(),
        mining: mined,
        weights,
        losses,
        pseudo_iou,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseSessionSummary {
    pub scenes: usize,
    pub failures: Vec<String>,
    pub pseudo_objects: usize,
    pub skipped_masks: usize,
    pub merged_away: usize,
    pub suppressed_by_gt: usize,
    /// Mean over scenes that produced losses.
    pub mean_losses: Option<LossReport>,
    /// Mass-pooled over all scenes.
    pub pseudo_iou_weighted: f64,
    pub pseudo_iou_unweighted: f64,
    /// Base categories whose prototypes could not be imprinted.
    pub missing_base_prototypes: Vec<String>,
}

impl BaseSessionSummary {
    pub fn from_scenes(results: &[Result<BaseSceneArtifacts, String>]) -> Self {
        let mut s = BaseSessionSummary {
            scenes: results.len(),
            ..Default::default()
        };
        let (mut wn, mut wm, mut un, mut um) = (0.0, 0.0, 0.0, 0.0);
        let mut sum = LossReport::default();
        let mut with_losses = 0usize;
        for r in results {
            let a = match r {
                Ok(a) => a,
                Err(e) => {
                    s.failures.push(e.clone());
                    continue;
                }
            };
            s.pseudo_objects += a.mining.objects.len();
            s.skipped_masks += a.mining.skipped.len();
            s.merged_away += a.mining.merged_away;
            s.suppressed_by_gt += a.mining.suppressed_by_gt;
            wn += a.pseudo_iou.weighted * a.pseudo_iou.weighted_mass;
            wm += a.pseudo_iou.weighted_mass;
            un += a.pseudo_iou.unweighted * a.pseudo_iou.unweighted_mass;
            um += a.pseudo_iou.unweighted_mass;
            if let Some(l) = a.losses {
                sum.obj += l.obj;
                sum.feat += l.feat;
                sum.reg += l.reg;
                sum.points += l.points;
                sum.boxes += l.boxes;
                with_losses += 1;
            }
        }
        if with_losses > 0 {
            let n = with_losses as f64;
            s.mean_losses = Some(aux_total(
                sum.obj / n,
                sum.feat / n,
                sum.reg / n,
                sum.points,
                sum.boxes,
            ));
        }
        s.pseudo_iou_weighted = if wm > 0.0 { wn / wm } else { 0.0 };
        s.pseudo_iou_unweighted = if um > 0.0 { un / um } else { 0.0 };
        s
    }
}

/// Registers the base categories and imprints them from annotated base
/// scenes. No gate training happens for base categories.
pub fn imprint_base_prototypes(
    store: &mut PrototypeStore,
    scenes: &[SupportScene],
    base: &[String],
    top_k: usize,
) -> Result<PrototypeImprint, SessionError> {
    for b in base {
        if store.get(b).is_none() {
            store.register(b, CategoryRole::Base)?;
        }
    }
    Ok(imprint_prototypes(scenes, base, store, top_k)?)
}
