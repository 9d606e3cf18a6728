//! Confidence weights for mined pseudo boxes.
//!
//! Each point inside a pseudo box gets a Gaussian spatial weight around the
//! box center; each box gets a semantic-consistency weight equal to the
//! norm of the mean unit-normalized aligned feature of its member points.
//! The soft target of a (point, box) pair is the product of the two.

use nalgebra::Vector3;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Box3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("box has no member features")]
    EmptyBox,
    #[error("feature {0} has zero or non-finite norm")]
    ZeroNormFeature(usize),
    #[error("aligned features have {rows} rows for {points} points")]
    RowMismatch { rows: usize, points: usize },
}

/// How the point-to-center offset is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Euclidean distance in meters.
    #[default]
    Raw,
    /// Box-frame offset divided by the half-extent on each axis.
    BoxNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    pub sigma: f64,
    pub distance: DistanceMode,
    /// Use the spatial factor; off means a constant 1.
    pub use_point: bool,
    /// Use the consistency factor; off means a constant 1.
    pub use_box: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            distance: DistanceMode::Raw,
            use_point: true,
            use_box: true,
        }
    }
}

impl WeightConfig {
    pub fn unweighted() -> Self {
        Self {
            use_point: false,
            use_box: false,
            ..Self::default()
        }
    }
}

fn check_sigma(sigma: f64) -> Result<(), WeightError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(WeightError::InvalidSigma(sigma))
    }
}

/// `exp(-‖p - c‖² / (2σ²))`.
pub fn point_weight(p: &Vector3<f64>, c: &Vector3<f64>, sigma: f64) -> Result<f64, WeightError> {
    check_sigma(sigma)?;
    Ok((-(p - c).norm_squared() / (2.0 * sigma * sigma)).exp())
}

fn point_weight_in(p: &Vector3<f64>, b: &Box3, sigma: f64, mode: DistanceMode) -> f64 {
    let d2 = match mode {
        DistanceMode::Raw => (p - b.center()).norm_squared(),
        DistanceMode::BoxNormalized => {
            let q = b.to_local(p);
            let h = b.size() * 0.5;
            q.component_div(&h).norm_squared()
        }
    };
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n.is_finite() && n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// Norm of the mean of the unit-normalized features.
pub fn box_weight<'a, I>(features: I) -> Result<f64, WeightError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for (i, f) in features.into_iter().enumerate() {
        let u = unit(f).ok_or(WeightError::ZeroNormFeature(i))?;
        if sum.is_empty() {
            sum = u;
        } else {
            sum.iter_mut().zip(&u).for_each(|(s, x)| *s += x);
        }
        count += 1;
    }
    if count == 0 {
        return Err(WeightError::EmptyBox);
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt() / count as f64;
    Ok(norm.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub point: usize,
    #[serde(rename = "box")]
    pub box_index: usize,
    pub point_weight: f64,
    /// `box_weight × point_weight`.
    pub weight: f64,
}

/// Sparse per-(point, box) soft targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightField {
    pub sigma: f64,
    /// Sorted by box, then point.
    pub entries: Vec<WeightEntry>,
    /// `None` for boxes dropped for lack of usable member points.
    pub box_weights: Vec<Option<f64>>,
    pub dropped_boxes: usize,
    /// In-box points skipped because their aligned feature has zero norm.
    pub zero_norm_members: usize,
}

impl WeightField {
    pub fn get(&self, point: usize, box_index: usize) -> Option<f64> {
        self.entries
            .binary_search_by(|e| (e.box_index, e.point).cmp(&(box_index, point)))
            .ok()
            .map(|i| self.entries[i].weight)
    }

    pub fn entries_for(&self, box_index: usize) -> &[WeightEntry] {
        let lo = self.entries.partition_point(|e| e.box_index < box_index);
        let hi = self.entries.partition_point(|e| e.box_index <= box_index);
        &self.entries[lo..hi]
    }
}

/// Computes every (point, box) weight for the given pseudo boxes.
pub fn combined_weights(
    points: &[Vector3<f64>],
    boxes: &[Box3],
    aligned: &Array2<f64>,
    cfg: &WeightConfig,
) -> Result<WeightField, WeightError> {
    check_sigma(cfg.sigma)?;
    if aligned.nrows() != points.len() {
        return Err(WeightError::RowMismatch {
            rows: aligned.nrows(),
            points: points.len(),
        });
    }
    let usable: Vec<bool> = aligned
        .rows()
        .into_iter()
        .map(|r| {
            let n2: f64 = r.iter().map(|x| x * x).sum();
            n2.is_finite() && n2 > 0.0
        })
        .collect();

    let per_box: Vec<(Option<f64>, Vec<WeightEntry>, usize)> = boxes
        .par_iter()
        .enumerate()
        .map(|(j, b)| {
            let inside: Vec<usize> = (0..points.len())
                .filter(|&e| b.contains(&points[e]))
                .collect();
            let members: Vec<usize> = inside.iter().copied().filter(|&e| usable[e]).collect();
            let zero_norm = inside.len() - members.len();
            let rows: Vec<Vec<f64>> = members.iter().map(|&e| aligned.row(e).to_vec()).collect();
            let wbox = match box_weight(rows.iter().map(|r| r.as_slice())) {
                Ok(w) => w,
                Err(_) => return (None, Vec::new(), zero_norm),
            };
            let wbox = if cfg.use_box { wbox } else { 1.0 };
            let entries = members
                .iter()
                .map(|&e| {
                    let wp = if cfg.use_point {
                        point_weight_in(&points[e], b, cfg.sigma, cfg.distance)
                    } else {
                        1.0
                    };
                    WeightEntry {
                        point: e,
                        box_index: j,
                        point_weight: wp,
                        weight: wbox * wp,
                    }
                })
                .collect();
            (Some(wbox), entries, zero_norm)
        })
        .collect();

    let mut field = WeightField {
        sigma: cfg.sigma,
        entries: Vec::new(),
        box_weights: Vec::with_capacity(boxes.len()),
        dropped_boxes: 0,
        zero_norm_members: 0,
    };
    for (wbox, entries, zero_norm) in per_box {
        if wbox.is_none() {
            field.dropped_boxes += 1;
        }
        field.box_weights.push(wbox);
        field.entries.extend(entries);
        field.zero_norm_members += zero_norm;
    }
    Ok(field)
}
