//! Session bookkeeping: split presets, checkpointable state, few-shot
//! support sampling and incremental sessions. The simulated end-to-end
//! protocol lives in `protocol`.

mod base;
mod protocol;

pub use base::{
    imprint_base_prototypes, pseudo_label_iou, run_base_scene, BaseSceneArtifacts,
    BaseSessionSummary, PseudoIou,
};
pub use protocol::{
    classify_proposals, detections_digest, report_csv, run_protocol, Classifier, ImprintSummary,
    ProtocolReport, SessionRecord, SimConfig, SplitSpec, REPORT_VERSION,
};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::EvalError;
use crate::geometry::{GeometryError, IouMode};
use crate::prototype::{
    imprint_session, CategoryRole, GateParams, ImprintConfig, ImprintReport, PrototypeError,
    PrototypeStore, SupportScene,
};
use crate::synth::{rng_for, streams, SynthError};
use crate::vlm::IngestError;
use crate::weighting::WeightError;

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("category `{category}` has {available} eligible scenes, {needed} needed")]
    InsufficientSupport {
        category: String,
        needed: usize,
        available: usize,
    },
    #[error("category `{0}` already belongs to an earlier session")]
    CategoryCollision(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("frozen state changed during the session ({0})")]
    FrozenStateChanged(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const SCANNET_CATEGORIES: [&str; 18] = [
    "bathtub",
    "bed",
    "bookshelf",
    "cabinet",
    "chair",
    "counter",
    "curtain",
    "desk",
    "door",
    "garbagebin",
    "picture",
    "refrigerator",
    "showercurtain",
    "sink",
    "sofa",
    "table",
    "toilet",
    "window",
];

pub const SUNRGBD_CATEGORIES: [&str; 10] = [
    "bathtub",
    "bed",
    "bookshelf",
    "chair",
    "desk",
    "dresser",
    "night_stand",
    "sofa",
    "table",
    "toilet",
];

pub const PRESET_NAMES: [&str; 6] = [
    "scannet-1way",
    "scannet-9way",
    "scannet-seq",
    "sunrgbd-1way",
    "sunrgbd-5way",
    "sunrgbd-seq",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    #[default]
    Batch,
    Sequential,
}

impl std::str::FromStr for ProtocolMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(ProtocolMode::Batch),
            "sequential" => Ok(ProtocolMode::Sequential),
            other => Err(format!("expected `batch` or `sequential`, got `{other}`")),
        }
    }
}

/// A named base / novel split. `tasks` holds one category list per
/// incremental session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPreset {
    pub name: String,
    pub base: Vec<String>,
    pub tasks: Vec<Vec<String>>,
    pub iou_mode: IouMode,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl ProtocolPreset {
    pub fn by_name(name: &str) -> Result<Self, SessionError> {
        let (all, iou_mode): (&[&str], IouMode) = if name.starts_with("scannet") {
            (&SCANNET_CATEGORIES, IouMode::AxisAligned)
        } else if name.starts_with("sunrgbd") {
            (&SUNRGBD_CATEGORIES, IouMode::Yawed)
        } else {
            return Err(SessionError::UnknownPreset(name.into()));
        };
        let n_base = match name {
            "scannet-1way" => 17,
            "scannet-9way" | "scannet-seq" => 9,
            "sunrgbd-1way" => 9,
            "sunrgbd-5way" | "sunrgbd-seq" => 5,
            _ => return Err(SessionError::UnknownPreset(name.into())),
        };
        let base = names(&all[..n_base]);
        let rest = &all[n_base..];
        let tasks = match name {
            "scannet-seq" => rest.chunks(3).map(names).collect(),
            "sunrgbd-seq" => vec![names(&rest[..3]), names(&rest[3..])],
            _ => vec![names(rest)],
        };
        Ok(Self {
            name: name.into(),
            base,
            tasks,
            iou_mode,
        })
    }

    /// All categories: base first, then tasks in order.
    pub fn categories(&self) -> Vec<String> {
        self.base
            .iter()
            .chain(self.tasks.iter().flatten())
            .cloned()
            .collect()
    }

    pub fn novel(&self) -> Vec<String> {
        self.tasks.iter().flatten().cloned().collect()
    }

    /// Sessions under `mode`: one merged task in batch mode.
    pub fn sessions(&self, mode: ProtocolMode) -> Vec<Vec<String>> {
        match mode {
            ProtocolMode::Batch => vec![self.novel()],
            ProtocolMode::Sequential => self.tasks.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let all = self.categories();
        let unique: BTreeSet<&String> = all.iter().collect();
        if unique.len() != all.len() {
            return Err(SessionError::Invalid(format!(
                "split `{}` repeats a category",
                self.name
            )));
        }
        if self.tasks.iter().any(|t| t.is_empty()) {
            return Err(SessionError::Invalid(format!(
                "split `{}` has an empty task",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolInfo {
    pub way: usize,
    pub shot: usize,
    pub mode: ProtocolMode,
}

/// Everything carried from one session to the next. Raw scenes of earlier
/// sessions are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub version: u32,
    pub t: usize,
    pub base: Vec<String>,
    pub novel: Vec<Vec<String>>,
    pub store: PrototypeStore,
    pub gates: GateParams,
    pub protocol: ProtocolInfo,
    pub seed: u64,
}

impl SessionState {
    pub fn new(
        base: Vec<String>,
        store: PrototypeStore,
        gates: GateParams,
        protocol: ProtocolInfo,
        seed: u64,
    ) -> Result<Self, SessionError> {
        let mut seen = BTreeSet::new();
        for b in &base {
            if !seen.insert(b) {
                return Err(SessionError::CategoryCollision(b.clone()));
            }
            if store.get(b).is_some_and(|c| c.role != CategoryRole::Base) {
                return Err(SessionError::Invalid(format!(
                    "`{b}` is registered as novel"
                )));
            }
        }
        Ok(Self {
            version: STATE_VERSION,
            t: 0,
            base,
            novel: Vec::new(),
            store,
            gates,
            protocol,
            seed,
        })
    }

    /// Cumulative category space, base first then sessions in order.
    pub fn all_categories(&self) -> Vec<String> {
        self.base
            .iter()
            .chain(self.novel.iter().flatten())
            .cloned()
            .collect()
    }

    pub fn novel_categories(&self) -> Vec<String> {
        self.novel.iter().flatten().cloned().collect()
    }

    /// Hash of every prototype outside `changing`.
    pub fn frozen_hash(&self, changing: &[String]) -> String {
        let mut h = Sha256::new();
        for c in self
            .store
            .categories
            .iter()
            .filter(|c| !changing.contains(&c.name))
        {
            h.update(serde_json::to_vec(c).expect("prototype serializes"));
        }
        hex::encode(h.finalize())
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("state serializes"),
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SessionError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let s: SessionState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.version != STATE_VERSION {
            return Err(SessionError::Invalid(format!(
                "state version {} is not supported",
                s.version
            )));
        }
        Ok(s)
    }
}

/// One annotated example: instance `instance` of scene `scene`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPick {
    pub scene: usize,
    pub instance: usize,
}

/// Draws `k` scene-instance pairs per category from `k` distinct scenes.
/// `scene_labels[s]` lists the category of every instance in scene `s`.
/// Picks come back sorted by scene index.
pub fn sample_support(
    scene_labels: &[Vec<String>],
    categories: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<(String, Vec<SupportPick>)>, SessionError> {
    use rand::Rng;
    if k == 0 {
        return Err(SessionError::Invalid("shot count must be positive".into()));
    }
    let mut out = Vec::with_capacity(categories.len());
    for (ci, c) in categories.iter().enumerate() {
        let mut rng = rng_for(seed, streams::SUPPORT << 32 | ci as u64);
        let mut eligible: Vec<usize> = (0..scene_labels.len())
            .filter(|&s| scene_labels[s].contains(c))
            .collect();
        if eligible.len() < k {
            return Err(SessionError::InsufficientSupport {
                category: c.clone(),
                needed: k,
                available: eligible.len(),
            });
        }
        eligible.shuffle(&mut rng);
        eligible.truncate(k);
        eligible.sort_unstable();
        let picks = eligible
            .into_iter()
            .map(|s| {
                let inst: Vec<usize> = (0..scene_labels[s].len())
                    .filter(|&i| scene_labels[s][i] == *c)
                    .collect();
                SupportPick {
                    scene: s,
                    instance: inst[rng.random_range(0..inst.len())],
                }
            })
            .collect();
        out.push((c.clone(), picks));
    }
    Ok(out)
}

/// Registers `classes` as session `t + 1`, imprints them from the support
/// scenes and trains the gates. Base prototypes and earlier sessions'
/// prototypes are checked to be unchanged.
pub fn run_incremental_session(
    state: &SessionState,
    support: &[SupportScene],
    classes: &[String],
    cfg: &ImprintConfig,
) -> Result<(SessionState, ImprintReport), SessionError> {
    if classes.is_empty() || support.is_empty() {
        return Err(SessionError::InsufficientSupport {
            category: classes.first().cloned().unwrap_or_default(),
            needed: 1,
            available: 0,
        });
    }
    let existing = state.all_categories();
    let mut seen = BTreeSet::new();
    for c in classes {
        if existing.contains(c) || !seen.insert(c) {
            return Err(SessionError::CategoryCollision(c.clone()));
        }
    }
    let mut next = state.clone();
    let frozen_before = state.frozen_hash(classes);
    for c in classes {
        next.store.register(c, CategoryRole::Novel(state.t + 1))?;
    }
    let report = imprint_session(support, classes, &mut next.store, &mut next.gates, cfg)?;
    let frozen_after = next.frozen_hash(classes);
    if frozen_before != frozen_after {
        return Err(SessionError::FrozenStateChanged(format!(
            "{frozen_before} -> {frozen_after}"
        )));
    }
    next.t += 1;
    next.novel.push(classes.to_vec());
    Ok((next, report))
}
