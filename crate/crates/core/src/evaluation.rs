//! Detection matching, average precision and Base / Novel / All mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box3, IouMode};

pub const DEFAULT_IOU_THRESH: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision needs at least one ground-truth box")]
    ZeroGroundTruth,
    #[error("base and novel category sets are both empty")]
    EmptySplit,
    #[error("ground-truth category `{0}` is not covered by the split")]
    UncoveredCategory(String),
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Box3,
}

/// Score-descending order with the input index as tie-break.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching of one category in one scene. Returns TP flags aligned
/// with the input order of `dets`.
pub fn match_detections(
    dets: &[(Box3, f64)],
    gts: &[Box3],
    iou_thresh: f64,
    mode: IouMode,
) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut consumed = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in ranked(&scores) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !consumed[*g])
            .map(|(g, gt)| (g, mode.iou(&dets[i].0, gt)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= iou_thresh {
                consumed[g] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// AP from TP/FP flags already in global score order.
pub fn average_precision(
    flags: &[bool],
    n_gt: usize,
    interp: Interpolation,
) -> Result<f64, EvalError> {
    if n_gt == 0 {
        return Err(EvalError::ZeroGroundTruth);
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope: best precision at this recall or beyond.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = match interp {
        Interpolation::AllPoint => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                area += (r - prev) * p;
                prev = *r;
            }
            area
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .position(|r| *r >= t - 1e-12)
                        .map_or(0.0, |i| precision[i])
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Ok(ap.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub iou_mode: IouMode,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: DEFAULT_IOU_THRESH,
            iou_mode: IouMode::AxisAligned,
            interpolation: Interpolation::AllPoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    pub role: SplitRole,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMeta {
    pub label: String,
    pub session: usize,
    pub way: usize,
    pub shot: usize,
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ProtocolMeta,
    pub iou_thresh: f64,
    pub per_category: Vec<CategoryAp>,
    pub base_map: Option<f64>,
    pub novel_map: Option<f64>,
    pub all_map: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-category AP over every scene, with the flags of all scenes merged
/// into one ranking.
pub fn category_ap(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    let mut by_scene: BTreeMap<&str, (Vec<usize>, Vec<Box3>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_scene.entry(&d.scene).or_default().0.push(i);
    }
    for g in gts {
        by_scene.entry(&g.scene).or_default().1.push(g.bbox);
    }
    let mut flags = vec![false; dets.len()];
    for (idx, scene_gts) in by_scene.values() {
        let local: Vec<(Box3, f64)> = idx.iter().map(|&i| (dets[i].bbox, dets[i].score)).collect();
        let f = match_detections(&local, scene_gts, cfg.iou_thresh, cfg.iou_mode);
        for (&i, v) in idx.iter().zip(f) {
            flags[i] = v;
        }
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let ordered: Vec<bool> = ranked(&scores).into_iter().map(|i| flags[i]).collect();
    average_precision(&ordered, gts.len(), cfg.interpolation)
}

pub fn map_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    base: &[String],
    novel: &[String],
    cfg: &EvalConfig,
    meta: ProtocolMeta,
) -> Result<MetricsReport, EvalError> {
    if !(cfg.iou_thresh > 0.0 && cfg.iou_thresh < 1.0) {
        return Err(EvalError::InvalidThreshold(cfg.iou_thresh));
    }
    if base.is_empty() && novel.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let known: BTreeSet<&str> = base.iter().chain(novel).map(String::as_str).collect();
    if let Some(g) = gts.iter().find(|g| !known.contains(g.category.as_str())) {
        return Err(EvalError::UncoveredCategory(g.category.clone()));
    }
    let ignored = dets
        .iter()
        .filter(|d| !known.contains(d.category.as_str()))
        .count();
    if ignored > 0 {
        log::warn!("{ignored} detections belong to categories outside the split and are ignored");
    }

    let cats: Vec<(&String, SplitRole)> = base
        .iter()
        .map(|c| (c, SplitRole::Base))
        .chain(novel.iter().map(|c| (c, SplitRole::Novel)))
        .collect();
    let per_category = cats
        .par_iter()
        .map(|(c, role)| {
            let d: Vec<&Detection> = dets.iter().filter(|d| &d.category == *c).collect();
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| &g.category == *c).collect();
            let ap = if g.is_empty() {
                log::warn!("category `{c}` has no ground truth and is excluded from the means");
                None
            } else {
                Some(category_ap(&d, &g, cfg)?)
            };
            Ok(CategoryAp {
                category: (*c).clone(),
                role: *role,
                ap,
                n_gt: g.len(),
                n_det: d.len(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let of = |role: Option<SplitRole>| {
        mean(
            per_category
                .iter()
                .filter(|c| role.is_none_or(|r| c.role == r))
                .filter_map(|c| c.ap),
        )
    };
    Ok(MetricsReport {
        meta,
        iou_thresh: cfg.iou_thresh,
        base_map: of(Some(SplitRole::Base)),
        novel_map: of(Some(SplitRole::Novel)),
        all_map: of(None),
        per_category,
    })
}

/// Greedy per-class NMS; returns kept indices in score order.
pub fn nms(boxes: &[Box3], scores: &[f64], iou_thresh: f64, mode: IouMode) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in ranked(scores) {
        if keep
            .iter()
            .all(|&k| mode.iou(&boxes[k], &boxes[i]) <= iou_thresh)
        {
            keep.push(i);
        }
    }
    keep
}

/// NMS within every (scene, category) group; survivors keep input order.
pub fn nms_detections(dets: &[Detection], iou_thresh: f64, mode: IouMode) -> Vec<Detection> {
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((&d.scene, &d.category)).or_default().push(i);
    }
    let mut kept = vec![false; dets.len()];
    for idx in groups.values() {
        let boxes: Vec<Box3> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        for k in nms(&boxes, &scores, iou_thresh, mode) {
            kept[idx[k]] = true;
        }
    }
    dets.iter()
        .zip(kept)
        .filter(|(_, k)| *k)
        .map(|(d, _)| d.clone())
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| EvalError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (i, it) in items.iter().enumerate() {
        serde_json::to_writer(&mut w, it).map_err(|source| EvalError::Json {
            line: i + 1,
            source,
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
