use fi3det::geometry::{Box3, IouMode};
use fi3det::prototype::{GateParams, ImprintConfig, PrototypeStore, SupportScene};
use fi3det::session::{
    run_base_scene, run_incremental_session, run_protocol, ProtocolInfo, ProtocolMode,
    SessionError, SessionState, SimConfig, SplitSpec,
};
use fi3det::synth::{
    generate_scene, oracle_detector, oracle_features, render_frames, Embeddings, RenderConfig,
    Scene, WorldConfig,
};
use fi3det::vlm::{MiningConfig, VlmFrame};
use fi3det::weighting::WeightConfig;

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn support_scene(
    scene: &Scene,
    world: &WorldConfig,
    emb: &Embeddings,
    seed: u64,
    label: &str,
) -> SupportScene {
    let f = oracle_features(scene, world, emb, seed);
    let idx = world.category_index(label).unwrap() as u32;
    SupportScene {
        id: scene.id.clone(),
        locations: scene.points.clone(),
        f3d: f.f3d,
        f2d: f.f2d,
        annotations: scene
            .boxes
            .iter()
            .zip(&scene.labels)
            .filter(|(_, l)| **l == idx)
            .map(|(b, _)| (*b, label.to_string()))
            .collect(),
    }
}

fn fresh_state(base: &[String], world: &WorldConfig) -> SessionState {
    let mut store = PrototypeStore::new(world.dim3d, world.dim2d, 0.999).unwrap();
    for b in base {
        store
            .register(b, fi3det::prototype::CategoryRole::Base)
            .unwrap();
        store
            .update_prototype(b, &vec![0.1; world.dim3d], &vec![0.1; world.dim2d])
            .unwrap();
    }
    let gates = GateParams::new(world.dim3d, world.dim2d, 16, 0);
    SessionState::new(
        base.to_vec(),
        store,
        gates,
        ProtocolInfo {
            way: 1,
            shot: 1,
            mode: ProtocolMode::Sequential,
        },
        0,
    )
    .unwrap()
}

fn world_for(cats: &[String]) -> WorldConfig {
    let mut w = WorldConfig::with_categories(cats);
    w.categories.iter_mut().for_each(|c| c.count = [1, 1]);
    w
}

#[test]
fn sequential_category_space_grows_by_three() {
    let mut cfg = SimConfig {
        split: SplitSpec::Preset("scannet-seq".into()),
        ..SimConfig::default()
    };
    cfg.world.feature_noise = 0.05;
    let r = run_protocol(&cfg, ProtocolMode::Sequential, 4).unwrap();
    assert!(!r.incomplete, "{:?}", r.error);
    assert_eq!(r.sessions.len(), 4);
    let sizes: Vec<usize> = r.sessions.iter().map(|s| s.c_all).collect();
    assert_eq!(sizes, [9, 12, 15, 18]);
    for (t, s) in r.sessions.iter().enumerate() {
        assert_eq!(s.session, t);
        assert_eq!(s.base_digest, r.sessions[0].base_digest);
    }
}

#[test]
fn batch_report_has_one_record_per_session() {
    let r = run_protocol(&SimConfig::default(), ProtocolMode::Batch, 9).unwrap();
    assert_eq!(r.sessions.len(), 2);
    assert_eq!(
        r.sessions[1].new_categories,
        names(&["desk", "table", "toilet"])
    );
    assert!(r.sessions[0].metrics.novel_map.is_none());
}

#[test]
fn protocol_is_deterministic() {
    let mut cfg = SimConfig::default();
    cfg.world.feature_noise = 0.1;
    cfg.render.mask_dropout = 0.1;
    let a = run_protocol(&cfg, ProtocolMode::Batch, 21).unwrap();
    let b = run_protocol(&cfg, ProtocolMode::Batch, 21).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    let c = run_protocol(&cfg, ProtocolMode::Batch, 22).unwrap();
    assert_ne!(a.sessions[1].state_hash, c.sessions[1].state_hash);
}

#[test]
fn collisions_and_empty_support_are_rejected() {
    let base = names(&["bed", "chair"]);
    let cats = names(&["bed", "chair", "desk", "sofa"]);
    let world = world_for(&cats);
    let emb = Embeddings::new(&world, 0).unwrap();
    let st = fresh_state(&base, &world);
    let scene = generate_scene(&world, 3).unwrap();
    let desk = support_scene(&scene, &world, &emb, 3, "desk");
    let cfg = ImprintConfig {
        epochs: 10,
        ..ImprintConfig::default()
    };

    let err = run_incremental_session(&st, std::slice::from_ref(&desk), &names(&["chair"]), &cfg)
        .unwrap_err();
    assert!(matches!(err, SessionError::CategoryCollision(ref c) if c == "chair"));
    let err = run_incremental_session(
        &st,
        std::slice::from_ref(&desk),
        &names(&["desk", "desk"]),
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, SessionError::CategoryCollision(_)));
    let err = run_incremental_session(&st, &[], &names(&["desk"]), &cfg).unwrap_err();
    assert!(matches!(err, SessionError::InsufficientSupport { .. }));

    let (s1, _) =
        run_incremental_session(&st, std::slice::from_ref(&desk), &names(&["desk"]), &cfg).unwrap();
    let err = run_incremental_session(&s1, &[desk], &names(&["desk"]), &cfg).unwrap_err();
    assert!(matches!(err, SessionError::CategoryCollision(_)));
}

#[test]
fn sessions_freeze_earlier_prototypes_and_round_trip() {
    let base = names(&["bed", "chair"]);
    let cats = names(&["bed", "chair", "desk", "sofa"]);
    let world = world_for(&cats);
    let emb = Embeddings::new(&world, 0).unwrap();
    let st = fresh_state(&base, &world);
    let cfg = ImprintConfig {
        epochs: 20,
        ..ImprintConfig::default()
    };
    let s_a = generate_scene(&world, 5).unwrap();
    let s_b = generate_scene(&world, 6).unwrap();
    let (s1, r1) = run_incremental_session(
        &st,
        &[support_scene(&s_a, &world, &emb, 5, "desk")],
        &names(&["desk"]),
        &cfg,
    )
    .unwrap();
    assert_eq!(r1.imprinted, vec![("desk".to_string(), 1)]);
    let (s2, _) = run_incremental_session(
        &s1,
        &[support_scene(&s_b, &world, &emb, 6, "sofa")],
        &names(&["sofa"]),
        &cfg,
    )
    .unwrap();
    assert_eq!(s2.t, 2);
    assert_eq!(s2.all_categories(), cats);
    for c in ["bed", "chair", "desk"] {
        assert_eq!(s2.store.get(c), s1.store.get(c));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    s2.save(&path).unwrap();
    let back = SessionState::load(&path).unwrap();
    assert_eq!(back, s2);
    assert_eq!(back.content_hash(), s2.content_hash());

    let mut text = std::fs::read_to_string(&path).unwrap();
    text = text.replacen("\"version\": 1", "\"version\": 99", 1);
    std::fs::write(&path, text).unwrap();
    assert!(SessionState::load(&path).is_err());
}

struct Rendered {
    scene: Scene,
    frames: Vec<VlmFrame>,
    base_gt: Vec<Box3>,
    unknown_gt: Vec<Box3>,
    aligned: ndarray::Array2<f64>,
    proposals: Vec<fi3det::synth::Proposal>,
}

fn render(world: &WorldConfig, n_base: u32, seed: u64) -> Rendered {
    let emb = Embeddings::new(world, 0).unwrap();
    let scene = generate_scene(world, seed).unwrap();
    let frames = render_frames(&scene, world, &emb, &RenderConfig::default(), seed)
        .unwrap()
        .into_iter()
        .map(|f| f.frame)
        .collect();
    let split = |base: bool| {
        scene
            .boxes
            .iter()
            .zip(&scene.labels)
            .filter(|(_, l)| (**l < n_base) == base)
            .map(|(b, _)| *b)
            .collect::<Vec<_>>()
    };
    let aligned = oracle_features(&scene, world, &emb, seed).f2d;
    let proposals = oracle_detector(&scene, world, seed).unwrap();
    Rendered {
        base_gt: split(true),
        unknown_gt: split(false),
        scene,
        frames,
        aligned,
        proposals,
    }
}

#[test]
fn clean_mining_recovers_unknown_boxes() {
    let cats = names(&["bed", "chair", "sofa", "desk", "table", "toilet"]);
    let world = WorldConfig::with_categories(&cats);
    let mut checked = 0;
    for seed in 0..20 {
        let r = render(&world, 3, seed);
        let a = run_base_scene(
            &r.scene.id,
            &r.scene.points,
            &r.aligned,
            &r.frames,
            &r.proposals,
            &r.base_gt,
            &r.unknown_gt,
            &MiningConfig::default(),
            &WeightConfig::default(),
            IouMode::Yawed,
        )
        .unwrap();
        for iou in &a.pseudo_iou.per_box {
            assert!(*iou > 0.9, "seed {seed}: pseudo box IoU {iou}");
        }
        assert!(a.pseudo_iou.per_box.len() <= r.unknown_gt.len());
        checked += a.pseudo_iou.per_box.len();
        if !a.pseudo_iou.per_box.is_empty() {
            let l = a.losses.unwrap();
            assert!(l.aux_total.is_finite() && l.boxes > 0);
        }
    }
    assert!(checked > 20);
}

#[test]
fn scene_without_unknowns_mines_nothing() {
    let cats = names(&["bed", "chair", "sofa"]);
    let world = WorldConfig::with_categories(&cats);
    let r = render(&world, 3, 2);
    assert!(r.unknown_gt.is_empty());
    let a = run_base_scene(
        &r.scene.id,
        &r.scene.points,
        &r.aligned,
        &r.frames,
        &r.proposals,
        &r.base_gt,
        &r.unknown_gt,
        &MiningConfig::default(),
        &WeightConfig::default(),
        IouMode::Yawed,
    )
    .unwrap();
    assert!(a.mining.objects.is_empty());
    assert!(a.weights.entries.is_empty());
    assert_eq!(a.losses, None);
}

/// Minimal walker: object keys must equal the schema's `required` list,
/// enums and consts must match, and every `$ref` is followed.
fn conforms(
    v: &serde_json::Value,
    s: &serde_json::Value,
    root: &serde_json::Value,
    at: &str,
) -> Result<(), String> {
    use serde_json::Value;
    if let Some(r) = s.get("$ref").and_then(Value::as_str) {
        let name = r.trim_start_matches("#/$defs/");
        return conforms(v, &root["$defs"][name], root, at);
    }
    if let Some(c) = s.get("const") {
        return if v == c {
            Ok(())
        } else {
            Err(format!("{at}: {v} != {c}"))
        };
    }
    if let Some(e) = s.get("enum").and_then(Value::as_array) {
        return if e.contains(v) {
            Ok(())
        } else {
            Err(format!("{at}: {v} not in {e:?}"))
        };
    }
    if let Some(alts) = s.get("oneOf").and_then(Value::as_array) {
        let hits = alts
            .iter()
            .filter(|a| conforms(v, a, root, at).is_ok())
            .count();
        return if hits == 1 {
            Ok(())
        } else {
            Err(format!("{at}: {hits} alternatives match"))
        };
    }
    match (s.get("type").and_then(Value::as_str), v) {
        (Some("object"), Value::Object(m)) => {
            let mut want: Vec<&str> = s["required"]
                .as_array()
                .unwrap()
                .iter()
                .map(|k| k.as_str().unwrap())
                .collect();
            let mut got: Vec<&str> = m.keys().map(String::as_str).collect();
            want.sort();
            got.sort();
            if want != got {
                return Err(format!("{at}: keys {got:?}, schema {want:?}"));
            }
            for (k, x) in m {
                conforms(x, &s["properties"][k], root, &format!("{at}.{k}"))?;
            }
            Ok(())
        }
        (Some("array"), Value::Array(xs)) => xs
            .iter()
            .enumerate()
            .try_for_each(|(i, x)| conforms(x, &s["items"], root, &format!("{at}[{i}]"))),
        (Some("string"), Value::String(_)) | (Some("number"), Value::Number(_)) => Ok(()),
        (Some("integer"), Value::Number(n)) if n.is_u64() => Ok(()),
        (t, _) => Err(format!("{at}: {v} is not {t:?}")),
    }
}

#[test]
fn saved_state_matches_the_schema_file() {
    let schema: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../schema/state.schema.json"
        ))
        .unwrap(),
    )
    .unwrap();
    let base = names(&["bed", "chair"]);
    let world = world_for(&names(&["bed", "chair", "desk"]));
    let emb = Embeddings::new(&world, 0).unwrap();
    let scene = generate_scene(&world, 1).unwrap();
    let st = fresh_state(&base, &world);
    let (s1, _) = run_incremental_session(
        &st,
        &[support_scene(&scene, &world, &emb, 1, "desk")],
        &names(&["desk"]),
        &ImprintConfig {
            epochs: 2,
            ..ImprintConfig::default()
        },
    )
    .unwrap();
    let v = serde_json::to_value(&s1).unwrap();
    conforms(&v, &schema, &schema, "$").unwrap();
}
