//! Deterministic synthetic rooms and oracle stand-ins for the frozen
//! backbone: per-point features, class-agnostic proposals and rendered
//! VLM frames.
//!
//! Every random draw comes from ChaCha8 seeded with the caller's seed, one
//! stream per role, so a `(config, seed)` pair fixes the output bit for bit
//! on every platform.

mod render;

pub use render::{camera_poses, look_at, render_frames, RenderConfig, RenderedFrame};

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fi3d::{Block, Container, ContainerError};
use crate::geometry::{box_corners_bev, convex_intersection_area, Box3, GeometryError};

/// RNG stream ids.
pub(crate) mod streams {
    pub const PLACEMENT: u64 = 1;
    pub const FEATURES: u64 = 2;
    pub const DETECTOR: u64 = 3;
    pub const RENDER: u64 = 4;
    pub const EMBEDDING: u64 = 5;
    pub const SUPPORT: u64 = 6;
    pub const GATES: u64 = 7;
    pub const SCENES: u64 = 8;
    pub const SESSIONS: u64 = 9;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gauss<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("could not place a `{category}` box after {attempts} attempts")]
    PlacementFailure { category: String, attempts: usize },
    #[error("scene container: {0}")]
    Format(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    /// Inclusive instance-count range per scene.
    pub count: [usize; 2],
}

impl CategorySpec {
    pub fn with_defaults(name: &str) -> Self {
        Self {
            name: name.to_string(),
            size_min: [0.5, 0.5, 0.5],
            size_max: [1.3, 1.3, 1.5],
            count: [0, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Room extents; the floor spans `[0, x] × [0, y]` at height 0.
    pub room: [f64; 3],
    pub categories: Vec<CategorySpec>,
    pub points_per_object: usize,
    pub floor_points: usize,
    pub dim3d: usize,
    pub dim2d: usize,
    pub feature_noise: f64,
    /// Std of the per-axis center and size jitter of oracle proposals.
    pub detector_jitter: f64,
    /// Expected false-positive proposals per scene.
    pub clutter_rate: f64,
    /// Minimum horizontal gap between placed boxes.
    pub clearance: f64,
    pub max_attempts: usize,
    pub random_yaw: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            room: [8.0, 8.0, 3.0],
            categories: Vec::new(),
            points_per_object: 256,
            floor_points: 256,
            dim3d: 32,
            dim2d: 32,
            feature_noise: 0.0,
            detector_jitter: 0.0,
            clutter_rate: 0.0,
            clearance: 0.15,
            max_attempts: 2000,
            random_yaw: false,
        }
    }
}

impl WorldConfig {
    pub fn with_categories(names: &[String]) -> Self {
        Self {
            categories: names
                .iter()
                .map(|n| CategorySpec::with_defaults(n))
                .collect(),
            ..Self::default()
        }
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !self.room.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return bad(format!("room extents {:?}", self.room));
        }
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        if self.dim3d == 0 || self.dim2d == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if self.categories.len() > self.dim3d.min(self.dim2d) {
            return bad(format!(
                "{} categories do not fit orthonormal embeddings of dim ({}, {})",
                self.categories.len(),
                self.dim3d,
                self.dim2d
            ));
        }
        if self.points_per_object == 0 {
            return bad("points_per_object must be positive".into());
        }
        for v in [
            self.feature_noise,
            self.detector_jitter,
            self.clutter_rate,
            self.clearance,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!(
                    "noise, clutter and clearance must be non-negative, got {v}"
                ));
            }
        }
        for c in &self.categories {
            let sizes_ok = (0..3).all(|k| c.size_min[k] > 0.0 && c.size_min[k] <= c.size_max[k]);
            if !sizes_ok || c.size_max[2] > self.room[2] || c.count[0] > c.count[1] {
                return bad(format!(
                    "category `{}` has invalid size or count range",
                    c.name
                ));
            }
        }
        let mut names = self.category_names();
        names.sort();
        names.dedup();
        if names.len() != self.categories.len() {
            return bad("duplicate category names".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f32; 3]>,
    pub boxes: Vec<Box3>,
    /// Index into the world's category list, one per box.
    pub labels: Vec<u32>,
}

fn footprints_touch(a: &Box3, b: &Box3) -> bool {
    convex_intersection_area(&box_corners_bev(a), &box_corners_bev(b)) > 0.0
}

fn label_color(label: u32) -> [f32; 3] {
    let h = label.wrapping_mul(2654435761);
    [
        (h & 0xff) as f32 / 255.0,
        ((h >> 8) & 0xff) as f32 / 255.0,
        ((h >> 16) & 0xff) as f32 / 255.0,
    ]
}

/// Uniform point on the five visible faces (all but the bottom),
/// area-weighted.
fn surface_point<R: Rng>(b: &Box3, rng: &mut R) -> Vector3<f64> {
    let s = b.size();
    let areas = [s.x * s.y, s.y * s.z, s.y * s.z, s.x * s.z, s.x * s.z];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let (u, v): (f64, f64) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let h = s * 0.5;
    let local = match face {
        0 => Vector3::new(u * s.x, v * s.y, h.z),
        1 => Vector3::new(h.x, u * s.y, v * s.z),
        2 => Vector3::new(-h.x, u * s.y, v * s.z),
        3 => Vector3::new(u * s.x, h.y, v * s.z),
        _ => Vector3::new(u * s.x, -h.y, v * s.z),
    };
    let (sn, cs) = b.yaw().sin_cos();
    b.center()
        + Vector3::new(
            cs * local.x - sn * local.y,
            sn * local.x + cs * local.y,
            local.z,
        )
}

/// Places non-overlapping boxes on the floor and samples their surfaces
/// plus floor clutter outside every footprint.
pub fn generate_scene(cfg: &WorldConfig, seed: u64) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = rng_for(seed, streams::PLACEMENT);
    let [rx, ry, _] = cfg.room;

    let mut requests = Vec::new();
    for (ci, c) in cfg.categories.iter().enumerate() {
        let n = rng.random_range(c.count[0]..=c.count[1]);
        for _ in 0..n {
            let size = Vector3::from_fn(|k, _| rng.random_range(c.size_min[k]..=c.size_max[k]));
            requests.push((ci, size));
        }
    }

    let mut boxes: Vec<Box3> = Vec::new();
    let mut labels = Vec::new();
    for (ci, size) in requests {
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let yaw = if cfg.random_yaw {
                rng.random_range(-PI..PI)
            } else {
                0.0
            };
            let (sn, cs) = yaw.sin_cos();
            let half = Vector2::new(
                0.5 * (size.x * cs.abs() + size.y * sn.abs()),
                0.5 * (size.x * sn.abs() + size.y * cs.abs()),
            );
            if 2.0 * half.x >= rx || 2.0 * half.y >= ry {
                continue;
            }
            let cx = rng.random_range(half.x..rx - half.x);
            let cy = rng.random_range(half.y..ry - half.y);
            let cand = Box3::new(Vector3::new(cx, cy, 0.5 * size.z), size, yaw)?;
            let padded = cand.inflated(0.5 * cfg.clearance)?;
            if boxes.iter().all(|b| !footprints_touch(&padded, b)) {
                placed = Some(cand);
                break;
            }
        }
        let b = placed.ok_or_else(|| SynthError::PlacementFailure {
            category: cfg.categories[ci].name.clone(),
            attempts: cfg.max_attempts,
        })?;
        boxes.push(b);
        labels.push(ci as u32);
    }

    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (b, &l) in boxes.iter().zip(&labels) {
        for _ in 0..cfg.points_per_object {
            points.push(surface_point(b, &mut rng));
            colors.push(label_color(l));
        }
    }
    let guards: Vec<Box3> = boxes
        .iter()
        .map(|b| b.inflated(1e-3))
        .collect::<Result<_, _>>()?;
    let mut added = 0;
    for _ in 0..cfg.floor_points * 20 {
        if added == cfg.floor_points {
            break;
        }
        let p = Vector3::new(rng.random_range(0.0..rx), rng.random_range(0.0..ry), 0.0);
        if guards.iter().any(|g| g.contains(&p)) {
            continue;
        }
        points.push(p);
        colors.push([0.5, 0.5, 0.5]);
        added += 1;
    }

    Ok(Scene {
        id: format!("scene{seed:08}"),
        points,
        colors,
        boxes,
        labels,
    })
}

/// Orthonormal per-category embeddings, one basis per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// `C × L`.
    pub e3d: Array2<f64>,
    /// `C × K`.
    pub e2d: Array2<f64>,
}

fn orthonormal_rows<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((n, dim));
    let mut i = 0;
    while i < n {
        let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng, 1.0)).collect();
        for r in 0..i {
            let dot: f64 = v.iter().zip(out.row(r)).map(|(a, b)| a * b).sum();
            v.iter_mut()
                .zip(out.row(r))
                .for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        out.row_mut(i)
            .iter_mut()
            .zip(&v)
            .for_each(|(o, x)| *o = x / norm);
        i += 1;
    }
    out
}

impl Embeddings {
    pub fn new(cfg: &WorldConfig, seed: u64) -> Result<Self, SynthError> {
        cfg.validate()?;
        let mut rng = rng_for(seed, streams::EMBEDDING);
        let n = cfg.categories.len();
        let e3d = orthonormal_rows(n, cfg.dim3d, &mut rng);
        let e2d = orthonormal_rows(n, cfg.dim2d, &mut rng);
        Ok(Self { e3d, e2d })
    }
}

/// Per-point oracle features.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFeatures {
    pub f3d: Array2<f64>,
    pub f2d: Array2<f64>,
    /// Index of the GT box the point lies in.
    pub owner: Vec<Option<usize>>,
    /// Both rows have nonzero norm; zero rows are never normalized.
    pub valid: Vec<bool>,
}

pub fn oracle_features(
    scene: &Scene,
    cfg: &WorldConfig,
    emb: &Embeddings,
    seed: u64,
) -> OracleFeatures {
    let mut rng = rng_for(seed, streams::FEATURES);
    let n = scene.points.len();
    let mut f3d = Array2::zeros((n, cfg.dim3d));
    let mut f2d = Array2::zeros((n, cfg.dim2d));
    let mut owner = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for (i, p) in scene.points.iter().enumerate() {
        let o = scene.boxes.iter().position(|b| b.contains(p));
        for (mat, base) in [(&mut f3d, &emb.e3d), (&mut f2d, &emb.e2d)] {
            let mut row = mat.row_mut(i);
            for (k, v) in row.iter_mut().enumerate() {
                let clean = o.map_or(0.0, |b| base[(scene.labels[b] as usize, k)]);
                *v = clean + gauss(&mut rng, cfg.feature_noise);
            }
        }
        let nz = |m: &Array2<f64>| m.row(i).iter().any(|v| *v != 0.0);
        valid.push(nz(&f3d) && nz(&f2d));
        owner.push(o);
    }
    OracleFeatures {
        f3d,
        f2d,
        owner,
        valid,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub objectness: f64,
    /// GT box the proposal was derived from; `None` for clutter.
    pub source: Option<usize>,
}

const MIN_PROPOSAL_SIZE: f64 = 0.05;

/// One jittered proposal per GT box plus free-space clutter boxes.
pub fn oracle_detector(
    scene: &Scene,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<Vec<Proposal>, SynthError> {
    let mut rng = rng_for(seed, streams::DETECTOR);
    let j = cfg.detector_jitter;
    let mut out = Vec::with_capacity(scene.boxes.len());
    for (gi, b) in scene.boxes.iter().enumerate() {
        let dc = Vector3::from_fn(|_, _| gauss(&mut rng, j));
        let ds = Vector3::from_fn(|_, _| gauss(&mut rng, j));
        let size = (b.size() + ds).map(|v| v.max(MIN_PROPOSAL_SIZE));
        let mag = (dc.norm_squared() + ds.norm_squared()).sqrt();
        out.push(Proposal {
            bbox: Box3::new(b.center() + dc, size, b.yaw())?,
            objectness: (-mag).exp(),
            source: Some(gi),
        });
    }

    let whole = cfg.clutter_rate.floor() as usize;
    let frac = cfg.clutter_rate - whole as f64;
    let extra = usize::from(frac > 0.0 && rng.random::<f64>() < frac);
    let [rx, ry, rz] = cfg.room;
    for _ in 0..whole + extra {
        for _ in 0..100 {
            let size = Vector3::new(
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0f64).min(rz),
            );
            let c = Vector3::new(
                rng.random_range(0.5 * size.x..rx - 0.5 * size.x),
                rng.random_range(0.5 * size.y..ry - 0.5 * size.y),
                0.5 * size.z,
            );
            let cand = Box3::new(c, size, 0.0)?;
            if scene.boxes.iter().all(|b| !footprints_touch(&cand, b)) {
                out.push(Proposal {
                    bbox: cand,
                    objectness: rng.random_range(0.1..0.6),
                    source: None,
                });
                break;
            }
        }
    }
    Ok(out)
}

fn f32_matrix(m: &Array2<f64>) -> Vec<f32> {
    m.iter().map(|&v| v as f32).collect()
}

/// Exports `points` (N×6), `gt_boxes` (G×7), `gt_labels` (G) and, when
/// given, the oracle features as `feat3d` / `feat2d`.
pub fn scene_to_container(scene: &Scene, feats: Option<&OracleFeatures>) -> Container {
    let n = scene.points.len();
    let points: Vec<f32> = scene
        .points
        .iter()
        .zip(&scene.colors)
        .flat_map(|(p, c)| [p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]])
        .collect();
    let boxes: Vec<f32> = scene
        .boxes
        .iter()
        .flat_map(|b| b.to_array().map(|v| v as f32))
        .collect();
    let mut c = Container::new();
    c.push(Block::f32("points", &[n, 6], points))
        .push(Block::f32("gt_boxes", &[scene.boxes.len(), 7], boxes))
        .push(Block::u32(
            "gt_labels",
            &[scene.labels.len()],
            scene.labels.clone(),
        ));
    if let Some(f) = feats {
        c.push(Block::f32(
            "feat3d",
            &[n, f.f3d.ncols()],
            f32_matrix(&f.f3d),
        ))
        .push(Block::f32(
            "feat2d",
            &[n, f.f2d.ncols()],
            f32_matrix(&f.f2d),
        ));
    }
    c
}

/// A scene read back from a container, with features when present.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub scene: Scene,
    pub f3d: Option<Array2<f64>>,
    pub f2d: Option<Array2<f64>>,
}

pub fn scene_from_container(id: &str, c: &Container) -> Result<LoadedScene, SynthError> {
    let pb = c.require("points")?;
    let raw = pb.as_f32(2)?;
    let d = pb.dims_usize();
    if d[1] != 6 {
        return Err(SynthError::Format(format!(
            "points block is {d:?}, expected N×6"
        )));
    }
    let n = d[0];
    let points = raw
        .chunks_exact(6)
        .map(|r| Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64))
        .collect();
    let colors = raw.chunks_exact(6).map(|r| [r[3], r[4], r[5]]).collect();

    let bb = c.require("gt_boxes")?;
    if bb.dims_usize().get(1) != Some(&7) {
        return Err(SynthError::Format(format!(
            "gt_boxes block is {:?}, expected G×7",
            bb.dims
        )));
    }
    let boxes = bb
        .as_f32(2)?
        .chunks_exact(7)
        .map(|r| {
            let a: [f64; 7] = std::array::from_fn(|k| r[k] as f64);
            Box3::from_array(a)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let labels = c.require("gt_labels")?.as_u32(1)?.to_vec();
    if labels.len() != boxes.len() {
        return Err(SynthError::Format(format!(
            "{} labels for {} boxes",
            labels.len(),
            boxes.len()
        )));
    }
    let matrix = |name: &str| -> Result<Option<Array2<f64>>, SynthError> {
        let Some(b) = c.get(name) else {
            return Ok(None);
        };
        let data = b.as_f32(2)?;
        let d = b.dims_usize();
        if d[0] != n {
            return Err(SynthError::Format(format!(
                "{name} has {} rows for {n} points",
                d[0]
            )));
        }
        let m = Array2::from_shape_vec((d[0], d[1]), data.iter().map(|&v| v as f64).collect())
            .map_err(|e| SynthError::Format(e.to_string()))?;
        Ok(Some(m))
    };
    Ok(LoadedScene {
        f3d: matrix("feat3d")?,
        f2d: matrix("feat2d")?,
        scene: Scene {
            id: id.to_string(),
            points,
            colors,
            boxes,
            labels,
        },
    })
}
