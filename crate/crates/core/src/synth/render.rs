use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gauss, rng_for, streams, Embeddings, Scene, SynthError, WorldConfig};
use crate::geometry::Box3;
use crate::vlm::{CameraModel, FrameFeatures, VlmFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_height: f64,
    /// Horizontal distance of each camera from its room corner.
    pub inset: f64,
    /// Height of the point every camera looks at (room center).
    pub look_height: f64,
    /// Probability of dropping each mask pixel.
    pub mask_dropout: f64,
    /// Probability that a mask is fused with the next visible one.
    pub mask_merge_prob: f64,
    pub min_mask_pixels: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            focal: 64.0,
            camera_height: 2.6,
            inset: 0.2,
            look_height: 0.4,
            mask_dropout: 0.0,
            mask_merge_prob: 0.0,
            min_mask_pixels: 1,
        }
    }
}

/// Camera-to-world pose looking from `eye` at `target` with world z up;
/// camera axes are x right, y down, z forward.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Matrix4<f64> {
    let fwd = (target - eye).normalize();
    let right = fwd.cross(&Vector3::z()).normalize();
    let down = fwd.cross(&right);
    let r = Matrix3::from_columns(&[right, down, fwd]);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
    m
}

/// One camera per room corner, all aimed at the room center.
pub fn camera_poses(world: &WorldConfig, rc: &RenderConfig) -> Vec<Matrix4<f64>> {
    let [rx, ry, _] = world.room;
    let target = Vector3::new(0.5 * rx, 0.5 * ry, rc.look_height);
    let (lo_x, hi_x, lo_y, hi_y) = (rc.inset, rx - rc.inset, rc.inset, ry - rc.inset);
    [(lo_x, lo_y), (hi_x, lo_y), (hi_x, hi_y), (lo_x, hi_y)]
        .iter()
        .map(|&(x, y)| look_at(Vector3::new(x, y, rc.camera_height), target))
        .collect()
}

/// Entry distance of the ray into the box, if it hits in front of the
/// origin.
fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &Box3) -> Option<f64> {
    let o = b.to_local(origin);
    let (s, c) = b.yaw().sin_cos();
    let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
    let h = b.size() * 0.5;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let a = (-h[k] - o[k]) / d[k];
        let b = (h[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub frame: VlmFrame,
    /// GT box indices behind each mask, in mask order.
    pub mask_objects: Vec<Vec<usize>>,
}

/// Ray-casts depth and instance masks from every corner camera. Mask
/// features are the mean 2D embedding of the objects under the mask plus
/// Gaussian noise of the world's feature noise.
pub fn render_frames(
    scene: &Scene,
    world: &WorldConfig,
    emb: &Embeddings,
    rc: &RenderConfig,
    seed: u64,
) -> Result<Vec<RenderedFrame>, SynthError> {
    let (w, h) = (rc.width, rc.height);
    let (cx, cy) = ((w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5);
    let [rx, ry, _] = world.room;
    let k = world.dim2d;
    let mut out = Vec::new();
    for (ci, pose) in camera_poses(world, rc).into_iter().enumerate() {
        let mut rng = rng_for(seed, streams::RENDER * 16 + ci as u64);
        let camera = CameraModel::new(rc.focal, rc.focal, cx, cy, pose)
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        let rot = camera.rotation();
        let eye = camera.translation();

        let mut depth = vec![0f32; w * h];
        let mut hit = vec![usize::MAX; w * h];
        for v in 0..h {
            for u in 0..w {
                let dir =
                    rot * Vector3::new((u as f64 - cx) / rc.focal, (v as f64 - cy) / rc.focal, 1.0);
                let mut best: Option<(f64, usize)> = None;
                for (bi, b) in scene.boxes.iter().enumerate() {
                    if let Some(t) = ray_box(&eye, &dir, b) {
                        if best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, bi));
                        }
                    }
                }
                if dir.z < 0.0 {
                    let t = -eye.z / dir.z;
                    let p = eye + dir * t;
                    let on_floor = (0.0..=rx).contains(&p.x) && (0.0..=ry).contains(&p.y);
                    if on_floor && best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, usize::MAX));
                    }
                }
                if let Some((t, bi)) = best {
                    depth[v * w + u] = t as f32;
                    hit[v * w + u] = bi;
                }
            }
        }

        let visible: Vec<usize> = (0..scene.boxes.len())
            .filter(|bi| hit.iter().filter(|&&x| x == *bi).count() >= rc.min_mask_pixels.max(1))
            .collect();
        // A merged mask fuses an object with its nearest still-unmerged
        // visible neighbour.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut taken = vec![false; visible.len()];
        for i in 0..visible.len() {
            if taken[i] {
                continue;
            }
            taken[i] = true;
            let c = scene.boxes[visible[i]].center();
            let nearest = (i + 1..visible.len())
                .filter(|&j| !taken[j])
                .min_by(|&a, &b| {
                    let da = (scene.boxes[visible[a]].center() - c).norm();
                    let db = (scene.boxes[visible[b]].center() - c).norm();
                    da.total_cmp(&db)
                });
            match nearest {
                Some(j) if rc.mask_merge_prob > 0.0 && rng.random::<f64>() < rc.mask_merge_prob => {
                    taken[j] = true;
                    groups.push(vec![visible[i], visible[j]]);
                }
                _ => groups.push(vec![visible[i]]),
            }
        }

        let n = w * h;
        let mut masks = vec![0u8; groups.len() * n];
        let mut feats = Vec::with_capacity(groups.len() * k);
        for (j, g) in groups.iter().enumerate() {
            for (p, &x) in hit.iter().enumerate() {
                if g.contains(&x) {
                    let keep = rc.mask_dropout <= 0.0 || rng.random::<f64>() >= rc.mask_dropout;
                    masks[j * n + p] = keep as u8;
                }
            }
            for c in 0..k {
                let mean = g
                    .iter()
                    .map(|&bi| emb.e2d[(scene.labels[bi] as usize, c)])
                    .sum::<f64>()
                    / g.len() as f64;
                feats.push((mean + gauss(&mut rng, world.feature_noise)) as f32);
            }
        }

        let frame = VlmFrame {
            id: format!("{}_cam{ci}", scene.id),
            height: h,
            width: w,
            depth,
            camera,
            masks,
            mask_count: groups.len(),
            features: FrameFeatures::PerMask { k, data: feats },
        };
        out.push(RenderedFrame {
            frame,
            mask_objects: groups,
        });
    }
    Ok(out)
}
