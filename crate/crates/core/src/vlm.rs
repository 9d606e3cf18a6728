//! Ingestion of externally produced VLM frame outputs and 2D→3D
//! pseudo-object mining.
//!
//! A frame carries a depth map, a pinhole camera with a camera-to-world
//! pose, `J` binary instance masks and either a dense `K`-channel feature
//! map or one precomputed `K`-vector per mask. Masks are lifted through
//! depth into world space, a box is fitted per mask, and instance features
//! are mean-pooled. Per-frame candidates are then merged across frames and
//! filtered against base annotations.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fi3d::{Block, Container, ContainerError};
use crate::geometry::{fit_box, intersection_volume, iou3d, Box3, FitMode, GeometryError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("format error: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("camera pose rotation is not orthonormal (error {0:.3e})")]
    NonOrthonormalPose(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("mask {mask}: only {valid} pixels with valid depth, need {required}")]
    InsufficientDepth {
        mask: usize,
        valid: usize,
        required: usize,
    },
    #[error("mask {0} is empty")]
    EmptyMask(usize),
    #[error("mask index {index} out of range ({count} masks)")]
    MaskIndex { index: usize, count: usize },
    #[error("mask {mask}: fitted box is only {extent:.2e} m thick")]
    DegenerateFit { mask: usize, extent: f64 },
    #[error("mask {0}: pooled feature is not finite or has zero norm")]
    DegenerateFeature(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ContainerError> for IngestError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io(io) => IngestError::Io(io),
            other => IngestError::Format(other.to_string()),
        }
    }
}

/// Pinhole intrinsics plus a camera-to-world rigid transform.
///
/// Camera frame convention: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Matrix4<f64>,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: Matrix4<f64>,
    ) -> Result<Self, IngestError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(IngestError::InvalidIntrinsics(format!(
                "fx={} fy={} cx={} cy={}",
                self.fx, self.fy, self.cx, self.cy
            )));
        }
        let r = self.rotation();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = (r.determinant() - 1.0).abs();
        let row = self.pose.fixed_view::<1, 4>(3, 0);
        let bottom = (row[0].abs() + row[1].abs() + row[2].abs() + (row[3] - 1.0).abs()).max(0.0);
        let err = ortho.max(det).max(bottom);
        if !err.is_finite() || err > 1e-6 || !self.pose.iter().all(|v| v.is_finite()) {
            return Err(IngestError::NonOrthonormalPose(err));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Back-projects pixel `(u, v)` (column, row) at depth `d` to world.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        let cam = Vector3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d);
        self.rotation() * cam + self.translation()
    }
}

/// Per-mask 2D instance feature source.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameFeatures {
    /// `K × H × W`, channel-major.
    Dense { k: usize, data: Vec<f32> },
    /// `J × K`.
    PerMask { k: usize, data: Vec<f32> },
}

impl FrameFeatures {
    pub fn dim(&self) -> usize {
        match self {
            FrameFeatures::Dense { k, .. } | FrameFeatures::PerMask { k, .. } => *k,
        }
    }
}

/// One frame of VLM output.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmFrame {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `H × W` meters; 0 marks invalid depth.
    pub depth: Vec<f32>,
    pub camera: CameraModel,
    /// `J × H × W`, nonzero = inside.
    pub masks: Vec<u8>,
    pub mask_count: usize,
    pub features: FrameFeatures,
}

impl VlmFrame {
    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    pub fn mask(&self, j: usize) -> Result<&[u8], IngestError> {
        if j >= self.mask_count {
            return Err(IngestError::MaskIndex {
                index: j,
                count: self.mask_count,
            });
        }
        let n = self.height * self.width;
        Ok(&self.masks[j * n..(j + 1) * n])
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let n = self.height * self.width;
        if self.depth.len() != n {
            return Err(IngestError::ShapeMismatch(format!(
                "depth has {} values for {}x{}",
                self.depth.len(),
                self.height,
                self.width
            )));
        }
        if self.masks.len() != self.mask_count * n {
            return Err(IngestError::ShapeMismatch(format!(
                "masks have {} values for {} x {}x{}",
                self.masks.len(),
                self.mask_count,
                self.height,
                self.width
            )));
        }
        match &self.features {
            FrameFeatures::Dense { k, data } => {
                if *k == 0 || data.len() != k * n {
                    return Err(IngestError::ShapeMismatch(format!(
                        "feature map has {} values for K={k} over {}x{}",
                        data.len(),
                        self.height,
                        self.width
                    )));
                }
            }
            FrameFeatures::PerMask { k, data } => {
                if *k == 0 || data.len() != k * self.mask_count {
                    return Err(IngestError::ShapeMismatch(format!(
                        "mask features have {} values for J={} K={k}",
                        data.len(),
                        self.mask_count
                    )));
                }
            }
        }
        self.camera.validate()
    }

    pub fn from_container(id: impl Into<String>, c: &Container) -> Result<Self, IngestError> {
        let depth_block = c.require("depth")?;
        let depth = depth_block.as_f32(2)?.to_vec();
        let hw = depth_block.dims_usize();
        let (height, width) = (hw[0], hw[1]);

        let intr = c.require("intrinsics")?.as_f32(1)?;
        if intr.len() != 4 {
            return Err(IngestError::ShapeMismatch(format!(
                "intrinsics has {} values, expected 4",
                intr.len()
            )));
        }
        let pose_block = c.require("pose")?;
        let pose_raw = pose_block.as_f32(2)?;
        if pose_block.dims != [4, 4] {
            return Err(IngestError::ShapeMismatch(format!(
                "pose dims {:?}, expected [4, 4]",
                pose_block.dims
            )));
        }
        let pose = Matrix4::from_row_iterator(pose_raw.iter().map(|&v| v as f64));
        let camera = CameraModel {
            fx: intr[0] as f64,
            fy: intr[1] as f64,
            cx: intr[2] as f64,
            cy: intr[3] as f64,
            pose,
        };

        let mask_block = c.require("masks")?;
        let masks = mask_block.as_u8(3)?.to_vec();
        let md = mask_block.dims_usize();
        if md[1] != height || md[2] != width {
            return Err(IngestError::ShapeMismatch(format!(
                "masks are {}x{}, depth is {height}x{width}",
                md[1], md[2]
            )));
        }
        let mask_count = md[0];

        let features = if let Some(b) = c.get("featmap") {
            let data = b.as_f32(3)?.to_vec();
            let d = b.dims_usize();
            if d[1] != height || d[2] != width {
                return Err(IngestError::ShapeMismatch(format!(
                    "feature map is {}x{}, depth is {height}x{width}",
                    d[1], d[2]
                )));
            }
            FrameFeatures::Dense { k: d[0], data }
        } else if let Some(b) = c.get("maskfeat") {
            let data = b.as_f32(2)?.to_vec();
            let d = b.dims_usize();
            if d[0] != mask_count {
                return Err(IngestError::ShapeMismatch(format!(
                    "{} mask features for {mask_count} masks",
                    d[0]
                )));
            }
            FrameFeatures::PerMask { k: d[1], data }
        } else {
            return Err(IngestError::Format(
                "frame needs a `featmap` or `maskfeat` block".into(),
            ));
        };

        let frame = VlmFrame {
            id: id.into(),
            height,
            width,
            depth,
            camera,
            masks,
            mask_count,
            features,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn to_container(&self) -> Container {
        let (h, w) = (self.height, self.width);
        let cam = &self.camera;
        let pose: Vec<f32> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| cam.pose[(r, c)] as f32)
            .collect();
        let mut c = Container::new();
        c.push(Block::f32("depth", &[h, w], self.depth.clone()))
            .push(Block::f32(
                "intrinsics",
                &[4],
                vec![cam.fx as f32, cam.fy as f32, cam.cx as f32, cam.cy as f32],
            ))
            .push(Block::f32("pose", &[4, 4], pose))
            .push(Block::u8(
                "masks",
                &[self.mask_count, h, w],
                self.masks.clone(),
            ));
        match &self.features {
            FrameFeatures::Dense { k, data } => {
                c.push(Block::f32("featmap", &[*k, h, w], data.clone()));
            }
            FrameFeatures::PerMask { k, data } => {
                c.push(Block::f32("maskfeat", &[self.mask_count, *k], data.clone()));
            }
        }
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IngestError> {
        self.to_container().save(path)?;
        Ok(())
    }
}

/// Reads and validates one FI3D frame; the file stem becomes the frame id.
pub fn load_vlm_frame(path: impl AsRef<Path>) -> Result<VlmFrame, IngestError> {
    let path = path.as_ref();
    let container = Container::load(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VlmFrame::from_container(id, &container)
}

/// World-space points of mask `j` with valid depth.
pub fn lift_mask(
    frame: &VlmFrame,
    j: usize,
    min_points: usize,
) -> Result<Vec<Vector3<f64>>, IngestError> {
    let mask = frame.mask(j)?;
    let w = frame.width;
    let points: Vec<Vector3<f64>> = mask
        .iter()
        .enumerate()
        .filter(|(i, &m)| m != 0 && frame.depth[*i] > 0.0)
        .map(|(i, _)| {
            let (v, u) = (i / w, i % w);
            frame
                .camera
                .unproject(u as f64, v as f64, frame.depth[i] as f64)
        })
        .collect();
    if points.len() < min_points.max(1) {
        return Err(IngestError::InsufficientDepth {
            mask: j,
            valid: points.len(),
            required: min_points.max(1),
        });
    }
    Ok(points)
}

/// Mean of the feature vectors under mask `j`, or the precomputed vector.
pub fn pool_instance_feature(frame: &VlmFrame, j: usize) -> Result<Vec<f64>, IngestError> {
    let mask = frame.mask(j)?;
    match &frame.features {
        FrameFeatures::PerMask { k, data } => {
            if !mask.iter().any(|&m| m != 0) {
                return Err(IngestError::EmptyMask(j));
            }
            Ok(data[j * k..(j + 1) * k].iter().map(|&v| v as f64).collect())
        }
        FrameFeatures::Dense { k, data } => {
            let n = frame.height * frame.width;
            let pixels: Vec<usize> = (0..n).filter(|&i| mask[i] != 0).collect();
            if pixels.is_empty() {
                return Err(IngestError::EmptyMask(j));
            }
            let inv = 1.0 / pixels.len() as f64;
            Ok((0..*k)
                .map(|c| {
                    let channel = &data[c * n..(c + 1) * n];
                    pixels.iter().map(|&i| channel[i] as f64).sum::<f64>() * inv
                })
                .collect())
        }
    }
}

/// Mining knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub min_points: usize,
    /// Cross-frame merge threshold; `None` disables merging.
    pub merge_iou: Option<f64>,
    /// Also merge two boxes when the smaller one lies at least this
    /// fraction inside the other.
    pub merge_containment: Option<f64>,
    /// Masks whose fitted box is thinner than this on any axis are skipped.
    /// A camera that only sees a top face yields such a flat box.
    pub min_extent: f64,
    /// Drop pseudo boxes overlapping base annotations above this IoU;
    /// `None` disables suppression.
    pub gt_suppress_iou: Option<f64>,
    pub fit_mode: FitMode,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            min_points: 20,
            merge_iou: Some(0.5),
            merge_containment: Some(0.7),
            min_extent: 0.01,
            gt_suppress_iou: Some(0.25),
            fit_mode: FitMode::AxisAligned,
        }
    }
}

/// A mined unknown object: fitted box plus pooled instance feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoObject {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub feature: Vec<f64>,
    pub support_count: usize,
    pub source_frame: String,
    /// Frames of every merged member, keeper first.
    pub merged_frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedMask {
    pub frame: String,
    pub mask: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningResult {
    pub objects: Vec<PseudoObject>,
    pub skipped: Vec<SkippedMask>,
    pub merged_away: usize,
    pub suppressed_by_gt: usize,
}

struct Candidate {
    frame_index: usize,
    mask_index: usize,
    frame_id: String,
    bbox: Box3,
    feature: Vec<f64>,
    points: Vec<Vector3<f64>>,
}

/// Fitted box, mask feature and lifted points of one mask.
type FittedMask = (Box3, Vec<f64>, Vec<Vector3<f64>>);

fn candidate_for(frame: &VlmFrame, j: usize, cfg: &MiningConfig) -> Result<FittedMask, IngestError> {
    let points = lift_mask(frame, j, cfg.min_points)?;
    let bbox = fit_box(&points, cfg.fit_mode)?;
    let extent = bbox.size().min();
    if extent < cfg.min_extent {
        return Err(IngestError::DegenerateFit { mask: j, extent });
    }
    let feature = pool_instance_feature(frame, j)?;
    let norm2: f64 = feature.iter().map(|v| v * v).sum();
    if !norm2.is_finite() || norm2 == 0.0 {
        return Err(IngestError::DegenerateFeature(j));
    }
    Ok((bbox, feature, points))
}

/// Lifts, fits and pools every mask, merges across frames, and removes
/// pseudo boxes that duplicate base annotations.
pub fn mine_unknown_objects(
    frames: &[VlmFrame],
    base_gt: &[Box3],
    cfg: &MiningConfig,
) -> Result<MiningResult, IngestError> {
    if let Some(first) = frames.first() {
        let k = first.feature_dim();
        if let Some(bad) = frames.iter().find(|f| f.feature_dim() != k) {
            return Err(IngestError::ShapeMismatch(format!(
                "frame `{}` has K={} but `{}` has K={k}",
                bad.id,
                bad.feature_dim(),
                first.id
            )));
        }
    }

    let per_frame: Vec<(Vec<Candidate>, Vec<SkippedMask>)> = frames
        .par_iter()
        .enumerate()
        .map(|(fi, frame)| {
            let mut cands = Vec::new();
            let mut skipped = Vec::new();
            for j in 0..frame.mask_count {
                match candidate_for(frame, j, cfg) {
                    Ok((bbox, feature, points)) => cands.push(Candidate {
                        frame_index: fi,
                        mask_index: j,
                        frame_id: frame.id.clone(),
                        bbox,
                        feature,
                        points,
                    }),
                    Err(e) => skipped.push(SkippedMask {
                        frame: frame.id.clone(),
                        mask: j,
                        reason: e.to_string(),
                    }),
                }
            }
            (cands, skipped)
        })
        .collect();

    let mut result = MiningResult::default();
    let mut cands = Vec::new();
    for (c, s) in per_frame {
        cands.extend(c);
        result.skipped.extend(s);
    }

    cands.sort_by(|a, b| {
        b.points
            .len()
            .cmp(&a.points.len())
            .then(a.frame_index.cmp(&b.frame_index))
            .then(a.mask_index.cmp(&b.mask_index))
    });

    let mut absorbed = vec![false; cands.len()];
    for i in 0..cands.len() {
        if absorbed[i] {
            continue;
        }
        let mut members = vec![i];
        if cfg.merge_iou.is_some() || cfg.merge_containment.is_some() {
            // Candidates are tested against the refit of the growing cluster,
            // so a partial keeper still collects the other views.
            let mut keep = cands[i].bbox;
            let mut grown = true;
            while grown {
                grown = false;
                for j in i + 1..cands.len() {
                    if absorbed[j] {
                        continue;
                    }
                    let other = &cands[j].bbox;
                    let by_iou = cfg.merge_iou.is_some_and(|t| iou3d(&keep, other) > t);
                    let by_containment = cfg.merge_containment.is_some_and(|t| {
                        intersection_volume(&keep, other) / keep.volume().min(other.volume()) >= t
                    });
                    if by_iou || by_containment {
                        absorbed[j] = true;
                        members.push(j);
                        let pts: Vec<Vector3<f64>> = members
                            .iter()
                            .flat_map(|&m| cands[m].points.iter().copied())
                            .collect();
                        keep = fit_box(&pts, cfg.fit_mode)?;
                        grown = true;
                    }
                }
            }
        }
        result.merged_away += members.len() - 1;
        result.objects.push(merge_members(&cands, &members, cfg)?);
    }

    if let Some(t) = cfg.gt_suppress_iou {
        let before = result.objects.len();
        result
            .objects
            .retain(|o| base_gt.iter().all(|g| iou3d(&o.bbox, g) <= t));
        result.suppressed_by_gt = before - result.objects.len();
    }
    Ok(result)
}

fn merge_members(
    cands: &[Candidate],
    members: &[usize],
    cfg: &MiningConfig,
) -> Result<PseudoObject, IngestError> {
    let keeper = &cands[members[0]];
    let merged_frames = members.iter().map(|&m| cands[m].frame_id.clone()).collect();
    if members.len() == 1 {
        return Ok(PseudoObject {
            bbox: keeper.bbox,
            feature: keeper.feature.clone(),
            support_count: keeper.points.len(),
            source_frame: keeper.frame_id.clone(),
            merged_frames,
        });
    }
    let k = keeper.feature.len();
    let mut feature = vec![0.0; k];
    let mut support = 0usize;
    let mut points = Vec::new();
    for &m in members {
        let c = &cands[m];
        let s = c.points.len();
        support += s;
        for (acc, v) in feature.iter_mut().zip(&c.feature) {
            *acc += s as f64 * v;
        }
        points.extend_from_slice(&c.points);
    }
    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(IngestError::DegenerateFeature(keeper.mask_index));
    }
    feature.iter_mut().for_each(|v| *v /= norm);
    Ok(PseudoObject {
        bbox: fit_box(&points, cfg.fit_mode)?,
        feature,
        support_count: support,
        source_frame: keeper.frame_id.clone(),
        merged_frames,
    })
}
