//! Center-based positive-sample selection.
//!
//! Every box nominates the `k` interior locations nearest its center. A
//! location nominated by several boxes goes to the one whose center is
//! nearest; ties fall to the smaller volume, then the lower box index.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Box3;

pub const DEFAULT_TOP_K: usize = 6;

/// A box to assign locations to, optionally labeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub bbox: Box3,
    pub category: Option<u32>,
}

impl Target {
    pub fn unlabeled(bbox: Box3) -> Self {
        Self {
            bbox,
            category: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub box_index: usize,
    pub category: Option<u32>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// One entry per location.
    pub entries: Vec<Option<Assignment>>,
    /// Boxes with no interior location at all.
    pub empty_boxes: Vec<usize>,
}

impl AssignmentResult {
    /// Location indices assigned to `box_index`, ascending.
    pub fn positives_of(&self, box_index: usize) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.filter(|a| a.box_index == box_index).map(|_| i))
            .collect()
    }

    pub fn positive_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }
}

fn better(a: &Assignment, b: &Assignment, targets: &[Target]) -> bool {
    a.distance
        .total_cmp(&b.distance)
        .then(
            targets[a.box_index]
                .bbox
                .volume()
                .total_cmp(&targets[b.box_index].bbox.volume()),
        )
        .then(a.box_index.cmp(&b.box_index))
        .is_lt()
}

pub fn assign_centers(
    locations: &[Vector3<f64>],
    targets: &[Target],
    k: usize,
) -> AssignmentResult {
    let k = k.max(1);
    let nominations: Vec<Vec<(usize, f64)>> = targets
        .par_iter()
        .map(|t| {
            let c = t.bbox.center();
            let mut cands: Vec<(usize, f64)> = locations
                .iter()
                .enumerate()
                .filter(|(_, p)| t.bbox.contains(p))
                .map(|(i, p)| (i, (p - c).norm()))
                .collect();
            cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            cands.truncate(k);
            cands
        })
        .collect();

    let mut entries: Vec<Option<Assignment>> = vec![None; locations.len()];
    let mut empty_boxes = Vec::new();
    for (j, noms) in nominations.iter().enumerate() {
        if noms.is_empty() {
            empty_boxes.push(j);
        }
        for &(i, distance) in noms {
            let cand = Assignment {
                box_index: j,
                category: targets[j].category,
                distance,
            };
            match &entries[i] {
                Some(cur) if !better(&cand, cur, targets) => {}
                _ => entries[i] = Some(cand),
            }
        }
    }
    AssignmentResult {
        entries,
        empty_boxes,
    }
}
