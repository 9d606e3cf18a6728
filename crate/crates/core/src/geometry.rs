//! Exact 3D box arithmetic: rotated IoU, DIoU, box fitting and containment.
//!
//! Boxes rotate about the vertical (z) axis only. Bird's-eye-view (BEV)
//! footprints are convex CCW polygons and intersections are computed with
//! Sutherland-Hodgman clipping.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clip results with less area than this (m²) are treated as empty.
pub const SLIVER_AREA: f64 = 1e-12;

/// Minimum fitted extent per axis (m).
pub const SIZE_FLOOR: f64 = 1e-6;

/// Slack applied to closed containment tests (m).
pub const CONTAINMENT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box size must be positive and finite on every axis, got {0:?}")]
    InvalidSize([f64; 3]),
    #[error("box parameters must be finite")]
    NonFinite,
    #[error("cannot fit a box to an empty point set")]
    EmptyInput,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
}

/// A 7-parameter box: center, extents `(w, l, h)` along the box-local
/// x/y/z axes, and a yaw about +z in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct Box3 {
    center: Vector3<f64>,
    size: Vector3<f64>,
    yaw: f64,
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

impl Box3 {
    pub fn new(center: Vector3<f64>, size: Vector3<f64>, yaw: f64) -> Result<Self, GeometryError> {
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if !size.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(GeometryError::InvalidSize([size.x, size.y, size.z]));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        })
    }

    /// Axis-aligned box from its min/max corners.
    pub fn from_bounds(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new((min + max) * 0.5, max - min, 0.0)
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self, GeometryError> {
        Self::new(
            Vector3::new(a[0], a[1], a[2]),
            Vector3::new(a[3], a[4], a[5]),
            a[6],
        )
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.size.x,
            self.size.y,
            self.size.z,
            self.yaw,
        ]
    }

    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    pub fn size(&self) -> Vector3<f64> {
        self.size
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    pub fn bottom(&self) -> f64 {
        self.center.z - 0.5 * self.size.z
    }

    pub fn top(&self) -> f64 {
        self.center.z + 0.5 * self.size.z
    }

    /// Same box with the yaw dropped.
    pub fn axis_aligned(&self) -> Box3 {
        Box3 { yaw: 0.0, ..*self }
    }

    /// Same box with every extent grown by `2 * margin`.
    pub fn inflated(&self, margin: f64) -> Result<Box3, GeometryError> {
        Box3::new(self.center, self.size.add_scalar(2.0 * margin), self.yaw)
    }

    /// Expresses a world point in the box frame (origin at center).
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center;
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let q = self.to_local(p);
        let h = self.size * 0.5;
        q.x.abs() <= h.x + CONTAINMENT_EPS
            && q.y.abs() <= h.y + CONTAINMENT_EPS
            && q.z.abs() <= h.z + CONTAINMENT_EPS
    }

    /// The eight corners in world coordinates, bottom face first.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let bev = box_corners_bev(self);
        let (lo, hi) = (self.bottom(), self.top());
        let v = &bev.vertices;
        [
            Vector3::new(v[0].x, v[0].y, lo),
            Vector3::new(v[1].x, v[1].y, lo),
            Vector3::new(v[2].x, v[2].y, lo),
            Vector3::new(v[3].x, v[3].y, lo),
            Vector3::new(v[0].x, v[0].y, hi),
            Vector3::new(v[1].x, v[1].y, hi),
            Vector3::new(v[2].x, v[2].y, hi),
            Vector3::new(v[3].x, v[3].y, hi),
        ]
    }
}

impl TryFrom<[f64; 7]> for Box3 {
    type Error = GeometryError;

    fn try_from(a: [f64; 7]) -> Result<Self, Self::Error> {
        Box3::from_array(a)
    }
}

impl From<Box3> for [f64; 7] {
    fn from(b: Box3) -> Self {
        b.to_array()
    }
}

/// Convex polygon in the ground plane, vertices counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPolygon {
    pub vertices: Vec<Vector2<f64>>,
}

impl BevPolygon {
    /// Shoelace signed area; positive for CCW order.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }
}

fn shoelace(v: &[Vector2<f64>]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..v.len() {
        let a = v[i];
        let b = v[(i + 1) % v.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Footprint of the yaw-rotated box as four CCW vertices.
pub fn box_corners_bev(b: &Box3) -> BevPolygon {
    let (s, c) = b.yaw.sin_cos();
    let hw = 0.5 * b.size.x;
    let hl = 0.5 * b.size.y;
    let local = [(hw, hl), (-hw, hl), (-hw, -hl), (hw, -hl)];
    let vertices = local
        .iter()
        .map(|&(x, y)| Vector2::new(b.center.x + c * x - s * y, b.center.y + s * x + c * y))
        .collect();
    BevPolygon { vertices }
}

/// Clips `subject` against the convex CCW polygon `clip`.
fn sutherland_hodgman(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = b - a;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_side = cross2(edge, cur - a);
            let prev_side = cross2(edge, prev - a);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(segment_line_intersection(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(segment_line_intersection(prev, cur, prev_side, cur_side));
            }
        }
    }
    output
}

fn segment_line_intersection(
    p: Vector2<f64>,
    q: Vector2<f64>,
    p_side: f64,
    q_side: f64,
) -> Vector2<f64> {
    let t = p_side / (p_side - q_side);
    p + (q - p) * t
}

/// Area of the intersection of two convex CCW polygons.
pub fn convex_intersection_area(a: &BevPolygon, b: &BevPolygon) -> f64 {
    let clipped = sutherland_hodgman(&a.vertices, &b.vertices);
    let area = shoelace(&clipped).abs();
    if area < SLIVER_AREA {
        0.0
    } else {
        area
    }
}

fn vertical_overlap(a: &Box3, b: &Box3) -> f64 {
    (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0)
}

/// Volume of the intersection of two yawed boxes.
pub fn intersection_volume(a: &Box3, b: &Box3) -> f64 {
    let dz = vertical_overlap(a, b);
    if dz <= 0.0 {
        return 0.0;
    }
    convex_intersection_area(&box_corners_bev(a), &box_corners_bev(b)) * dz
}

/// Rotated 3D IoU.
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// IoU of the two boxes with their yaws ignored.
pub fn iou3d_axis_aligned(a: &Box3, b: &Box3) -> f64 {
    let (ha, hb) = (a.size * 0.5, b.size * 0.5);
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = (a.center[k] - ha[k]).max(b.center[k] - hb[k]);
        let hi = (a.center[k] + ha[k]).min(b.center[k] + hb[k]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Which IoU definition a matcher uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    #[default]
    Yawed,
    AxisAligned,
}

impl IouMode {
    pub fn iou(self, a: &Box3, b: &Box3) -> f64 {
        match self {
            IouMode::Yawed => iou3d(a, b),
            IouMode::AxisAligned => iou3d_axis_aligned(a, b),
        }
    }
}

/// Distance-IoU: IoU minus squared center distance over the squared
/// diagonal of the smallest world-axis-aligned box enclosing both.
pub fn diou3d(pred: &Box3, target: &Box3) -> f64 {
    let iou = iou3d(pred, target);
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for c in pred.corners().iter().chain(target.corners().iter()) {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    let diag2 = (hi - lo).norm_squared();
    let dist2 = (pred.center - target.center).norm_squared();
    iou - dist2 / diag2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    #[default]
    AxisAligned,
    MinAreaYaw,
}

/// Applies the extent floor; more than one vanishing axis means the
/// points collapse to a line or a point.
fn floor_extents(ext: Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let vanishing = ext.iter().filter(|e| **e < SIZE_FLOOR).count();
    if vanishing > 1 {
        return Err(GeometryError::DegenerateGeometry(
            "points collapse to a line or a single point",
        ));
    }
    Ok(ext.map(|e| e.max(SIZE_FLOOR)))
}

/// Fits a box over a point set.
pub fn fit_box(points: &[Vector3<f64>], mode: FitMode) -> Result<Box3, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let (zmin, zmax) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.z), hi.max(p.z))
        });
    match mode {
        FitMode::AxisAligned => {
            let mut lo = points[0];
            let mut hi = points[0];
            for p in points {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            let size = floor_extents(hi - lo)?;
            Box3::new((lo + hi) * 0.5, size, 0.0)
        }
        FitMode::MinAreaYaw => {
            let bev: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new(p.x, p.y)).collect();
            let hull = convex_hull(&bev);
            if hull.len() < 3 {
                return Err(GeometryError::DegenerateGeometry(
                    "collinear bird's-eye-view hull",
                ));
            }
            let rect = min_area_rect(&hull);
            let size = floor_extents(Vector3::new(rect.width, rect.length, zmax - zmin))?;
            Box3::new(
                Vector3::new(rect.center.x, rect.center.y, 0.5 * (zmin + zmax)),
                size,
                rect.yaw,
            )
        }
    }
}

/// Andrew's monotone chain; CCW, collinear points dropped.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if cross2(b - a, p - a) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle of a convex polygon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedRect {
    pub center: Vector2<f64>,
    /// Extent along the rectangle's local x axis.
    pub width: f64,
    /// Extent along the rectangle's local y axis.
    pub length: f64,
    /// In `[-π/4, π/4)`.
    pub yaw: f64,
}

impl RotatedRect {
    pub fn area(&self) -> f64 {
        self.width * self.length
    }
}

/// Rotating calipers over hull edges: the optimal rectangle has one side
/// collinear with some hull edge.
pub fn min_area_rect(hull: &[Vector2<f64>]) -> RotatedRect {
    let n = hull.len();
    let mut best: Option<(f64, RotatedRect)> = None;
    for i in 0..n {
        let e = hull[(i + 1) % n] - hull[i];
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let u = e / len;
        let v = Vector2::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in hull {
            let pu = p.dot(&u);
            let pv = p.dot(&v);
            umin = umin.min(pu);
            umax = umax.max(pu);
            vmin = vmin.min(pv);
            vmax = vmax.max(pv);
        }
        let area = (umax - umin) * (vmax - vmin);
        let better = match &best {
            None => true,
            Some((a, _)) => area < *a * (1.0 - 1e-12),
        };
        if better {
            let center = u * (0.5 * (umin + umax)) + v * (0.5 * (vmin + vmax));
            let rect = canonical_rect(center, umax - umin, vmax - vmin, u.y.atan2(u.x));
            best = Some((area, rect));
        }
    }
    best.map(|(_, r)| r)
        .expect("hull has at least one non-degenerate edge")
}

/// Reduces a rectangle's angle into `[-π/4, π/4)`, swapping extents per
/// quarter turn.
fn canonical_rect(
    center: Vector2<f64>,
    mut width: f64,
    mut length: f64,
    mut yaw: f64,
) -> RotatedRect {
    while yaw >= FRAC_PI_4 {
        yaw -= FRAC_PI_2;
        std::mem::swap(&mut width, &mut length);
    }
    while yaw < -FRAC_PI_4 {
        yaw += FRAC_PI_2;
        std::mem::swap(&mut width, &mut length);
    }
    RotatedRect {
        center,
        width,
        length,
        yaw,
    }
}

/// Closed containment mask of `points` in `b`.
pub fn points_in_box(points: &[Vector3<f64>], b: &Box3) -> Vec<bool> {
    points.iter().map(|p| b.contains(p)).collect()
}
