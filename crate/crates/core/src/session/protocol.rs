//! Synthetic end-to-end runs: base session, incremental sessions and
//! evaluation after each of them.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::base::{
    imprint_base_prototypes, run_base_scene, BaseSceneArtifacts, BaseSessionSummary,
};
use super::{
    run_incremental_session, sample_support, ProtocolInfo, ProtocolMode, ProtocolPreset,
    SessionError, SessionState,
};
use crate::evaluation::{
    map_report, Detection, EvalConfig, GroundTruth, MetricsReport, ProtocolMeta,
};
use crate::geometry::{Box3, IouMode};
use crate::prototype::{
    class_scores, fuse_scores, gate_forward, GammaActivation, GateParams, ImprintConfig,
    ImprintReport, PrototypeError, PrototypeStore, SupportScene,
};
use crate::synth::{
    generate_scene, oracle_detector, oracle_features, render_frames, rng_for, streams, Embeddings,
    OracleFeatures, Proposal, RenderConfig, Scene, WorldConfig,
};
use crate::vlm::MiningConfig;
use crate::weighting::WeightConfig;

pub const REPORT_VERSION: u32 = 1;

/// A named preset, or an inline base / task split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Preset(String),
    Custom(ProtocolPreset),
}

impl SplitSpec {
    pub fn resolve(&self) -> Result<ProtocolPreset, SessionError> {
        let p = match self {
            SplitSpec::Preset(name) => ProtocolPreset::by_name(name)?,
            SplitSpec::Custom(p) => p.clone(),
        };
        p.validate()?;
        if p.base.is_empty() {
            return Err(SessionError::Invalid(format!(
                "split `{}` has no base categories",
                p.name
            )));
        }
        Ok(p)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        SplitSpec::Custom(ProtocolPreset {
            name: "synthetic-3way".into(),
            base: s(&["bed", "chair", "sofa"]),
            tasks: vec![s(&["desk", "table", "toilet"])],
            iou_mode: IouMode::AxisAligned,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub split: SplitSpec,
    /// An empty category list is filled from the split with default sizes.
    pub world: WorldConfig,
    pub render: RenderConfig,
    pub mining: MiningConfig,
    pub weighting: WeightConfig,
    pub imprint: ImprintConfig,
    /// `None` takes the split's IoU mode with default thresholds.
    pub eval: Option<EvalConfig>,
    pub shot: usize,
    pub train_scenes: usize,
    pub support_scenes: usize,
    pub test_scenes: usize,
    pub momentum: f64,
    pub hidden_width: usize,
    pub gamma_activation: GammaActivation,
    /// Detections whose raw fused score falls below this are dropped.
    pub score_floor: f64,
    /// Mine and weight pseudo objects in the training scenes.
    pub run_base_mining: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            world: WorldConfig::default(),
            render: RenderConfig::default(),
            mining: MiningConfig::default(),
            weighting: WeightConfig::default(),
            imprint: ImprintConfig::default(),
            eval: None,
            shot: 5,
            train_scenes: 8,
            support_scenes: 24,
            test_scenes: 8,
            momentum: 0.999,
            hidden_width: 64,
            gamma_activation: GammaActivation::Sigmoid,
            score_floor: 0.0,
            run_base_mining: true,
        }
    }
}

impl SimConfig {
    fn world_for(&self, split: &ProtocolPreset) -> Result<WorldConfig, SessionError> {
        let world = if self.world.categories.is_empty() {
            WorldConfig {
                categories: WorldConfig::with_categories(&split.categories()).categories,
                ..self.world.clone()
            }
        } else {
            self.world.clone()
        };
        world.validate()?;
        if let Some(c) = split
            .categories()
            .into_iter()
            .find(|c| world.category_index(c).is_none())
        {
            return Err(SessionError::Invalid(format!(
                "split category `{c}` is missing from the world"
            )));
        }
        Ok(world)
    }

    fn eval_for(&self, split: &ProtocolPreset) -> EvalConfig {
        self.eval.unwrap_or(EvalConfig {
            iou_mode: split.iou_mode,
            ..EvalConfig::default()
        })
    }
}

/// 3D and 2D cosine scores, one row per proposal.
type ScorePair = (Array2<f64>, Array2<f64>);

/// Base head plus novel head over one session state.
///
/// The base head scores base prototypes with a fixed (½, ½) fusion and no
/// rebalancing, so its output never depends on incremental sessions. The
/// novel head applies the trained gates to the novel prototypes.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub base: Vec<String>,
    base3: Array2<f64>,
    base2: Array2<f64>,
    pub novel: Vec<String>,
    novel3: Array2<f64>,
    novel2: Array2<f64>,
    gamma_index: Vec<usize>,
    gates: GateParams,
    pub score_floor: f64,
}

fn argmax(row: ndarray::ArrayView1<f64>) -> Option<(usize, f64)> {
    row.iter()
        .copied()
        .enumerate()
        .fold(None, |best, (i, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
}

impl Classifier {
    pub fn from_state(state: &SessionState, score_floor: f64) -> Result<Self, SessionError> {
        let base: Vec<String> = state
            .base
            .iter()
            .filter(|b| state.store.get(b).is_some_and(|c| c.is_initialized()))
            .cloned()
            .collect();
        if base.len() < state.base.len() {
            log::warn!(
                "{} base categories have no prototype and cannot be detected",
                state.base.len() - base.len()
            );
        }
        let novel = state.novel_categories();
        let (base3, base2) = state.store.matrices(&base)?;
        let (novel3, novel2) = state.store.matrices(&novel)?;
        let gamma_index = novel
            .iter()
            .map(|c| {
                state
                    .gates
                    .gamma_index(c)
                    .ok_or_else(|| SessionError::Invalid(format!("no gate output for `{c}`")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            base,
            base3,
            base2,
            novel,
            novel3,
            novel2,
            gamma_index,
            gates: state.gates.clone(),
            score_floor,
        })
    }

    /// Up to one (category, score) per head, base head first. Scores are
    /// fused similarities mapped to [0, 1].
    pub fn classify(&self, f3d: &[f64], f2d: &[f64]) -> Result<Vec<(String, f64)>, SessionError> {
        let x3 = ArrayView2::from_shape((1, f3d.len()), f3d).expect("row view");
        let x2 = ArrayView2::from_shape((1, f2d.len()), f2d).expect("row view");
        let scores =
            |p3: &Array2<f64>, p2: &Array2<f64>| -> Result<Option<ScorePair>, SessionError> {
                if p3.nrows() == 0 {
                    return Ok(None);
                }
                match (class_scores(x3, p3.view()), class_scores(x2, p2.view())) {
                    (Ok(a), Ok(b)) => Ok(Some((a, b))),
                    (Err(PrototypeError::ZeroNormRow(_)), _)
                    | (_, Err(PrototypeError::ZeroNormRow(_))) => Ok(None),
                    (Err(e), _) | (_, Err(e)) => Err(e.into()),
                }
            };
        let mut out = Vec::with_capacity(2);
        if let Some((s3, s2)) = scores(&self.base3, &self.base2)? {
            let fused = fuse_scores(
                s3.view(),
                s2.view(),
                &[(0.5, 0.5)],
                Array2::ones(s3.dim()).view(),
            )?;
            if let Some((i, s)) = argmax(fused.row(0)) {
                if s >= self.score_floor {
                    out.push((self.base[i].clone(), 0.5 * (s + 1.0)));
                }
            }
        }
        if let Some((s3, s2)) = scores(&self.novel3, &self.novel2)? {
            let g = gate_forward(f3d, f2d, &self.gates)?;
            let gamma = Array2::from_shape_fn(s3.dim(), |(_, c)| g.gamma[self.gamma_index[c]]);
            let fused = fuse_scores(
                s3.view(),
                s2.view(),
                &[(g.alpha3d, g.alpha2d)],
                gamma.view(),
            )?;
            if let Some((i, s)) = argmax(fused.row(0)) {
                if s >= self.score_floor {
                    out.push((self.novel[i].clone(), 0.5 * (s + 1.0)));
                }
            }
        }
        Ok(out)
    }
}

fn pooled_features(
    feats: &OracleFeatures,
    points: &[Vector3<f64>],
    b: &Box3,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (mut m3, mut m2) = (vec![0.0; feats.f3d.ncols()], vec![0.0; feats.f2d.ncols()]);
    let mut n = 0usize;
    for (i, p) in points.iter().enumerate() {
        if feats.valid[i] && b.contains(p) {
            m3.iter_mut()
                .zip(feats.f3d.row(i))
                .for_each(|(a, v)| *a += v);
            m2.iter_mut()
                .zip(feats.f2d.row(i))
                .for_each(|(a, v)| *a += v);
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let inv = 1.0 / n as f64;
    m3.iter_mut().chain(m2.iter_mut()).for_each(|v| *v *= inv);
    Some((m3, m2))
}

/// Classifies every proposal from the mean feature of the valid points it
/// contains. Proposals without valid points emit nothing.
pub fn classify_proposals(
    classifier: &Classifier,
    scene_id: &str,
    proposals: &[Proposal],
    points: &[Vector3<f64>],
    feats: &OracleFeatures,
) -> Result<Vec<Detection>, SessionError> {
    let mut out = Vec::new();
    for p in proposals {
        let Some((m3, m2)) = pooled_features(feats, points, &p.bbox) else {
            continue;
        };
        for (category, score) in classifier.classify(&m3, &m2)? {
            out.push(Detection {
                scene: scene_id.to_string(),
                category,
                bbox: p.bbox,
                score,
            });
        }
    }
    Ok(out)
}

/// SHA-256 of the JSON form of the detections whose category is in `keep`.
pub fn detections_digest(dets: &[Detection], keep: &[String]) -> String {
    let kept: Vec<&Detection> = dets.iter().filter(|d| keep.contains(&d.category)).collect();
    hex::encode(Sha256::digest(
        serde_json::to_vec(&kept).expect("detections serialize"),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprintSummary {
    pub imprinted: Vec<(String, usize)>,
    pub without_positives: Vec<String>,
    pub gate_samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl From<&ImprintReport> for ImprintSummary {
    fn from(r: &ImprintReport) -> Self {
        Self {
            imprinted: r.imprinted.clone(),
            without_positives: r.without_positives.clone(),
            gate_samples: r.gate_samples,
            initial_loss: r.loss_trace.first().copied().unwrap_or(f64::NAN),
            final_loss: r.loss_trace.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: usize,
    pub new_categories: Vec<String>,
    /// Size of the cumulative category space after this session.
    pub c_all: usize,
    pub metrics: MetricsReport,
    pub base_detections: usize,
    pub base_digest: String,
    pub imprint: Option<ImprintSummary>,
    pub state_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub version: u32,
    pub split: String,
    pub mode: ProtocolMode,
    pub seed: u64,
    pub shot: usize,
    pub base_categories: Vec<String>,
    pub base: BaseSessionSummary,
    /// Session 0 is the base-only evaluation.
    pub sessions: Vec<SessionRecord>,
    pub incomplete: bool,
    pub error: Option<String>,
}

/// One row per session with Base / Novel / All mAP in percent.
pub fn report_csv(r: &ProtocolReport) -> String {
    let pct = |v: Option<f64>| v.map_or(String::new(), |x| format!("{:.2}", 100.0 * x));
    let mut out = String::from("split,mode,seed,session,way,shot,c_all,base,novel,all\n");
    for s in &r.sessions {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.split,
            match r.mode {
                ProtocolMode::Batch => "batch",
                ProtocolMode::Sequential => "sequential",
            },
            r.seed,
            s.session,
            s.metrics.meta.way,
            s.metrics.meta.shot,
            s.c_all,
            pct(s.metrics.base_map),
            pct(s.metrics.novel_map),
            pct(s.metrics.all_map),
        ));
    }
    out
}

struct WorldScene {
    seed: u64,
    scene: Scene,
    feats: OracleFeatures,
    names: Vec<String>,
}

fn build_pool(
    world: &WorldConfig,
    emb: &Embeddings,
    seed: u64,
    pool: u64,
    n: usize,
) -> Result<Vec<WorldScene>, SessionError> {
    let mut rng = rng_for(seed, streams::SCENES * 16 + pool);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    seeds
        .into_par_iter()
        .map(|s| {
            let scene = generate_scene(world, s)?;
            let feats = oracle_features(&scene, world, emb, s);
            let names = scene
                .labels
                .iter()
                .map(|&l| world.categories[l as usize].name.clone())
                .collect();
            Ok(WorldScene {
                seed: s,
                scene,
                feats,
                names,
            })
        })
        .collect()
}

fn support_scene(w: &WorldScene, annotations: Vec<(Box3, String)>) -> SupportScene {
    SupportScene {
        id: w.scene.id.clone(),
        locations: w.scene.points.clone(),
        f3d: w.feats.f3d.clone(),
        f2d: w.feats.f2d.clone(),
        annotations,
    }
}

fn base_session(
    cfg: &SimConfig,
    split: &ProtocolPreset,
    world: &WorldConfig,
    emb: &Embeddings,
    train: &[WorldScene],
    iou_mode: IouMode,
) -> Vec<Result<BaseSceneArtifacts, String>> {
    train
        .par_iter()
        .map(|w| {
            let run = || -> Result<BaseSceneArtifacts, SessionError> {
                let frames: Vec<_> = render_frames(&w.scene, world, emb, &cfg.render, w.seed)?
                    .into_iter()
                    .map(|r| r.frame)
                    .collect();
                let proposals = oracle_detector(&w.scene, world, w.seed)?;
                let (mut base_gt, mut unknown_gt) = (Vec::new(), Vec::new());
                for (b, n) in w.scene.boxes.iter().zip(&w.names) {
                    if split.base.contains(n) {
                        base_gt.push(*b);
                    } else {
                        unknown_gt.push(*b);
                    }
                }
                run_base_scene(
                    &w.scene.id,
                    &w.scene.points,
                    &w.feats.f2d,
                    &frames,
                    &proposals,
                    &base_gt,
                    &unknown_gt,
                    &cfg.mining,
                    &cfg.weighting,
                    iou_mode,
                )
            };
            run().map_err(|e| format!("{}: {e}", w.scene.id))
        })
        .collect()
}

struct TestScene {
    id: String,
    points: Vec<Vector3<f64>>,
    feats: OracleFeatures,
    proposals: Vec<Proposal>,
    gt: Vec<GroundTruth>,
}

fn evaluate(
    state: &SessionState,
    tests: &[TestScene],
    cfg: &SimConfig,
    eval: &EvalConfig,
    label: &str,
    way: usize,
) -> Result<(MetricsReport, Vec<Detection>), SessionError> {
    let classifier = Classifier::from_state(state, cfg.score_floor)?;
    let per_scene = tests
        .par_iter()
        .map(|t| classify_proposals(&classifier, &t.id, &t.proposals, &t.points, &t.feats))
        .collect::<Result<Vec<_>, _>>()?;
    let dets: Vec<Detection> = per_scene.into_iter().flatten().collect();
    let all = state.all_categories();
    let gts: Vec<GroundTruth> = tests
        .iter()
        .flat_map(|t| t.gt.iter())
        .filter(|g| all.contains(&g.category))
        .cloned()
        .collect();
    let meta = ProtocolMeta {
        label: label.to_string(),
        session: state.t,
        way,
        shot: cfg.shot,
        incomplete: false,
    };
    let report = map_report(
        &dets,
        &gts,
        &state.base,
        &state.novel_categories(),
        eval,
        meta,
    )?;
    Ok((report, dets))
}

fn record(
    state: &SessionState,
    new: &[String],
    metrics: MetricsReport,
    dets: &[Detection],
    imprint: Option<&ImprintReport>,
) -> Result<SessionRecord, SessionError> {
    let c_all = state.all_categories().len();
    let expected = state.base.len() + state.novel.iter().map(Vec::len).sum::<usize>();
    if c_all != expected {
        return Err(SessionError::Invalid(format!(
            "category space has {c_all} entries, expected {expected}"
        )));
    }
    Ok(SessionRecord {
        session: state.t,
        new_categories: new.to_vec(),
        c_all,
        metrics,
        base_detections: dets
            .iter()
            .filter(|d| state.base.contains(&d.category))
            .count(),
        base_digest: detections_digest(dets, &state.base),
        imprint: imprint.map(ImprintSummary::from),
        state_hash: state.content_hash(),
    })
}

/// Runs the base session and every incremental session of the split under
/// `mode`, evaluating after each. A failing incremental session ends the
/// run with the report flagged incomplete.
pub fn run_protocol(
    cfg: &SimConfig,
    mode: ProtocolMode,
    seed: u64,
) -> Result<ProtocolReport, SessionError> {
    let split = cfg.split.resolve()?;
    if cfg.shot == 0 || cfg.test_scenes == 0 {
        return Err(SessionError::Invalid(
            "shot and test scene counts must be positive".into(),
        ));
    }
    let world = cfg.world_for(&split)?;
    let eval = cfg.eval_for(&split);
    let emb = Embeddings::new(&world, seed)?;
    let sessions = split.sessions(mode);

    let train = build_pool(&world, &emb, seed, 0, cfg.train_scenes)?;
    let support = build_pool(&world, &emb, seed, 1, cfg.support_scenes)?;
    let tests: Vec<TestScene> = build_pool(&world, &emb, seed, 2, cfg.test_scenes)?
        .into_iter()
        .map(|w| {
            let proposals = oracle_detector(&w.scene, &world, w.seed)?;
            let gt = w
                .scene
                .boxes
                .iter()
                .zip(&w.names)
                .map(|(b, n)| GroundTruth {
                    scene: w.scene.id.clone(),
                    category: n.clone(),
                    bbox: *b,
                })
                .collect();
            Ok(TestScene {
                id: w.scene.id,
                points: w.scene.points,
                feats: w.feats,
                proposals,
                gt,
            })
        })
        .collect::<Result<_, SessionError>>()?;

    let mut summary = if cfg.run_base_mining {
        BaseSessionSummary::from_scenes(&base_session(
            cfg,
            &split,
            &world,
            &emb,
            &train,
            eval.iou_mode,
        ))
    } else {
        BaseSessionSummary::default()
    };

    let mut store = PrototypeStore::new(world.dim3d, world.dim2d, cfg.momentum)?;
    let base_scenes: Vec<SupportScene> = train
        .iter()
        .map(|w| {
            let ann = w
                .scene
                .boxes
                .iter()
                .zip(&w.names)
                .filter(|(_, n)| split.base.contains(n))
                .map(|(b, n)| (*b, n.clone()))
                .collect();
            support_scene(w, ann)
        })
        .collect();
    let base_imprint =
        imprint_base_prototypes(&mut store, &base_scenes, &split.base, cfg.imprint.top_k)?;
    summary.missing_base_prototypes = base_imprint.without_positives;

    let gate_seed = rng_for(seed, streams::GATES).random();
    let gates = GateParams::new(world.dim3d, world.dim2d, cfg.hidden_width, gate_seed)
        .with_gamma_activation(cfg.gamma_activation);
    let info = ProtocolInfo {
        way: sessions.first().map_or(0, Vec::len),
        shot: cfg.shot,
        mode,
    };
    let mut state = SessionState::new(split.base.clone(), store, gates, info, seed)?;

    let (m0, d0) = evaluate(&state, &tests, cfg, &eval, "base", 0)?;
    let mut records = vec![record(&state, &[], m0, &d0, None)?];
    let mut report = ProtocolReport {
        version: REPORT_VERSION,
        split: split.name.clone(),
        mode,
        seed,
        shot: cfg.shot,
        base_categories: split.base.clone(),
        base: summary,
        sessions: Vec::new(),
        incomplete: false,
        error: None,
    };

    let support_labels: Vec<Vec<String>> = support.iter().map(|w| w.names.clone()).collect();
    let mut session_rng = rng_for(seed, streams::SESSIONS);
    for classes in &sessions {
        let session_seed: u64 = session_rng.random();
        let step = || -> Result<(SessionState, SessionRecord), SessionError> {
            let picks = sample_support(&support_labels, classes, cfg.shot, session_seed)?;
            let mut by_scene: BTreeMap<usize, Vec<(Box3, String)>> = BTreeMap::new();
            for (c, list) in &picks {
                for p in list {
                    by_scene
                        .entry(p.scene)
                        .or_default()
                        .push((support[p.scene].scene.boxes[p.instance], c.clone()));
                }
            }
            let scenes: Vec<SupportScene> = by_scene
                .into_iter()
                .map(|(s, ann)| support_scene(&support[s], ann))
                .collect();
            let (next, imprint) = run_incremental_session(&state, &scenes, classes, &cfg.imprint)?;
            let label = format!("session{}", next.t);
            let (m, d) = evaluate(&next, &tests, cfg, &eval, &label, classes.len())?;
            let rec = record(&next, classes, m, &d, Some(&imprint))?;
            Ok((next, rec))
        };
        match step() {
            Ok((next, r)) => {
                state = next;
                records.push(r);
            }
            Err(e) => {
                log::error!("session {} failed: {e}", state.t + 1);
                report.incomplete = true;
                report.error = Some(e.to_string());
                break;
            }
        }
    }
    if report.incomplete {
        for r in &mut records {
            r.metrics.meta.incomplete = true;
        }
    }
    report.sessions = records;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.world.categories = WorldConfig::with_categories(
            &["bed", "chair", "sofa", "desk", "table", "toilet"].map(String::from),
        )
        .categories;
        cfg.world
            .categories
            .iter_mut()
            .for_each(|c| c.count = [1, 1]);
        cfg.train_scenes = 2;
        cfg.support_scenes = 5;
        cfg.test_scenes = 3;
        cfg.imprint.epochs = 20;
        cfg
    }

    #[test]
    fn zero_noise_run_is_perfect() {
        let r = run_protocol(&tiny(), ProtocolMode::Batch, 3).unwrap();
        assert!(!r.incomplete, "{:?}", r.error);
        assert_eq!(r.sessions.len(), 2);
        assert_eq!(r.sessions[0].c_all, 3);
        assert_eq!(r.sessions[1].c_all, 6);
        assert_eq!(r.sessions[0].metrics.novel_map, None);
        let last = &r.sessions[1].metrics;
        assert!((last.novel_map.unwrap() - 1.0).abs() < 1e-12);
        assert!((last.base_map.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.sessions[0].base_digest, r.sessions[1].base_digest);
        assert!(report_csv(&r).lines().count() == 3);
    }

    #[test]
    fn short_support_pool_marks_report_incomplete() {
        let mut cfg = tiny();
        cfg.support_scenes = 3;
        let r = run_protocol(&cfg, ProtocolMode::Batch, 1).unwrap();
        assert!(r.incomplete);
        assert_eq!(r.sessions.len(), 1);
        assert!(r.sessions[0].metrics.meta.incomplete);
        assert!(r.error.unwrap().contains("eligible scenes"));
    }

    #[test]
    fn split_spec_parses_both_forms() {
        let p: SplitSpec = serde_json::from_str("\"scannet-seq\"").unwrap();
        assert_eq!(p.resolve().unwrap().tasks.len(), 3);
        let c: SplitSpec =
            serde_json::from_str(r#"{"name":"x","base":["a"],"tasks":[["b"]],"iou_mode":"yawed"}"#)
                .unwrap();
        assert_eq!(c.resolve().unwrap().categories(), vec!["a", "b"]);
        let dup: SplitSpec =
            serde_json::from_str(r#"{"name":"x","base":["a"],"tasks":[["a"]],"iou_mode":"yawed"}"#)
                .unwrap();
        assert!(dup.resolve().is_err());
    }
}
