use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fi3det::evaluation::{
    map_report, read_jsonl, Detection, EvalConfig, GroundTruth, MetricsReport, ProtocolMeta,
};
use fi3det::fi3d::Container;
use fi3det::geometry::Box3;
use fi3det::prototype::{
    GateParams, ImprintConfig, ImprintReport, PrototypeStore, SupportScene, DEFAULT_HIDDEN,
};
use fi3det::session::{
    imprint_base_prototypes, report_csv, run_incremental_session, run_protocol, ProtocolInfo,
    ProtocolMode, ProtocolPreset, SessionState, SimConfig,
};
use fi3det::synth::scene_from_container;
use fi3det::vlm::{load_vlm_frame, mine_unknown_objects, MiningConfig, MiningResult};
use fi3det::weighting::{combined_weights, WeightConfig, WeightField};

type CliResult<T> = Result<T, String>;

fn fail<E: std::fmt::Display>(ctx: impl std::fmt::Display) -> impl FnOnce(E) -> String {
    move |e| format!("{ctx}: {e}")
}

#[derive(Parser)]
#[command(
    name = "fi3det",
    version,
    about = "Few-shot incremental 3D detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mine pseudo boxes and point weights for exported scenes.
    Mine {
        #[arg(long)]
        scenes: PathBuf,
        /// Holds one `<scene id>/` directory of `.fi3d` frames per scene.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the base-session state from annotated base scenes. Scene
    /// labels index the split's category list, base categories first.
    Init {
        #[arg(long)]
        split: String,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 0.999)]
        mu: f64,
        #[arg(long, default_value_t = DEFAULT_HIDDEN)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one incremental session on a saved state.
    Imprint {
        #[arg(long)]
        state: PathBuf,
        /// Directory with `manifest.json` and the scene containers it names.
        #[arg(long)]
        support: PathBuf,
        #[arg(long, default_value_t = 0.999)]
        mu: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against ground truth (both JSON lines).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        iou: f64,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the synthetic protocol end to end.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "batch")]
        protocol: ProtocolMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(fail("serializing report"))?;
    fs::write(path, text + "\n").map_err(fail(path.display()))
}

fn csv_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn scene_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(fail(dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fi3d"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Serialize)]
struct MinedScene {
    scene: String,
    mining: MiningResult,
    weights: WeightField,
}

#[derive(Serialize, Default)]
struct MineSummary {
    scenes: usize,
    pseudo_objects: usize,
    failures: Vec<String>,
}

/// Every annotated box of a scene counts as a known base object.
fn mine_scene(
    scene_path: &Path,
    frames_root: &Path,
    weighting: &WeightConfig,
) -> CliResult<MinedScene> {
    let id = stem(scene_path);
    let c = Container::load(scene_path).map_err(fail(scene_path.display()))?;
    let loaded = scene_from_container(&id, &c).map_err(fail(scene_path.display()))?;
    let aligned = loaded
        .f2d
        .ok_or_else(|| format!("{}: no feat2d block", scene_path.display()))?;
    let frames = scene_files(&frames_root.join(&id))?
        .iter()
        .map(|p| load_vlm_frame(p).map_err(fail(p.display())))
        .collect::<CliResult<Vec<_>>>()?;
    let mining = mine_unknown_objects(&frames, &loaded.scene.boxes, &MiningConfig::default())
        .map_err(fail(&id))?;
    let boxes: Vec<Box3> = mining.objects.iter().map(|o| o.bbox).collect();
    let weights =
        combined_weights(&loaded.scene.points, &boxes, &aligned, weighting).map_err(fail(&id))?;
    Ok(MinedScene {
        scene: id,
        mining,
        weights,
    })
}

fn cmd_mine(scenes: &Path, frames: &Path, sigma: f64, out: &Path) -> CliResult<()> {
    let weighting = WeightConfig {
        sigma,
        ..WeightConfig::default()
    };
    fs::create_dir_all(out).map_err(fail(out.display()))?;
    let files = scene_files(scenes)?;
    let mut summary = MineSummary {
        scenes: files.len(),
        ..Default::default()
    };
    for f in &files {
        match mine_scene(f, frames, &weighting) {
            Ok(m) => {
                summary.pseudo_objects += m.mining.objects.len();
                write_json(&out.join(format!("{}.pseudo.json", m.scene)), &m)?;
            }
            Err(e) => {
                log::error!("{e}");
                summary.failures.push(e);
            }
        }
    }
    write_json(&out.join("summary.json"), &summary)?;
    if !summary.failures.is_empty() {
        log::warn!(
            "{} of {} scenes failed",
            summary.failures.len(),
            summary.scenes
        );
    }
    Ok(())
}

fn load_annotated(file: &Path) -> CliResult<(fi3det::synth::LoadedScene, SupportScene)> {
    let c = Container::load(file).map_err(fail(file.display()))?;
    let loaded = scene_from_container(&stem(file), &c).map_err(fail(file.display()))?;
    let (Some(f3d), Some(f2d)) = (loaded.f3d.clone(), loaded.f2d.clone()) else {
        return Err(format!(
            "{}: feat3d and feat2d blocks are required",
            file.display()
        ));
    };
    let s = SupportScene {
        id: loaded.scene.id.clone(),
        locations: loaded.scene.points.clone(),
        f3d,
        f2d,
        annotations: Vec::new(),
    };
    Ok((loaded, s))
}

fn cmd_init(
    split: &str,
    scenes: &Path,
    mu: f64,
    hidden: usize,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let preset = ProtocolPreset::by_name(split).map_err(fail("split"))?;
    let names = preset.categories();
    let mut support = Vec::new();
    for f in scene_files(scenes)? {
        let (loaded, mut s) = load_annotated(&f)?;
        for (b, l) in loaded.scene.boxes.iter().zip(&loaded.scene.labels) {
            let name = names
                .get(*l as usize)
                .ok_or_else(|| format!("{}: label {l} is outside the split", f.display()))?;
            if preset.base.contains(name) {
                s.annotations.push((*b, name.clone()));
            }
        }
        support.push(s);
    }
    let first = support
        .first()
        .ok_or_else(|| format!("{}: no scenes", scenes.display()))?;
    let (d3, d2) = (first.f3d.ncols(), first.f2d.ncols());
    let mut store = PrototypeStore::new(d3, d2, mu).map_err(fail("store"))?;
    let imprint = imprint_base_prototypes(
        &mut store,
        &support,
        &preset.base,
        ImprintConfig::default().top_k,
    )
    .map_err(fail("base prototypes"))?;
    if !imprint.without_positives.is_empty() {
        log::warn!(
            "base categories without examples: {}",
            imprint.without_positives.join(", ")
        );
    }
    let info = ProtocolInfo {
        way: preset.tasks.first().map_or(0, Vec::len),
        shot: 0,
        mode: if preset.tasks.len() > 1 {
            ProtocolMode::Sequential
        } else {
            ProtocolMode::Batch
        },
    };
    let state = SessionState::new(
        preset.base.clone(),
        store,
        GateParams::new(d3, d2, hidden, seed),
        info,
        seed,
    )
    .map_err(fail("state"))?;
    state.save(out).map_err(fail(out.display()))
}

#[derive(Deserialize)]
struct ManifestAnnotation {
    /// Row of the scene's `gt_boxes` block.
    instance: usize,
    category: String,
}

#[derive(Deserialize)]
struct ManifestScene {
    file: String,
    annotations: Vec<ManifestAnnotation>,
}

#[derive(Deserialize)]
struct SupportManifest {
    classes: Vec<String>,
    scenes: Vec<ManifestScene>,
}

fn load_support(dir: &Path) -> CliResult<(Vec<String>, Vec<SupportScene>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(fail(path.display()))?;
    let m: SupportManifest = serde_json::from_str(&text).map_err(fail(path.display()))?;
    let mut scenes = Vec::with_capacity(m.scenes.len());
    for s in &m.scenes {
        let file = dir.join(&s.file);
        let (loaded, mut scene) = load_annotated(&file)?;
        scene.annotations = s
            .annotations
            .iter()
            .map(|a| {
                loaded
                    .scene
                    .boxes
                    .get(a.instance)
                    .map(|b| (*b, a.category.clone()))
                    .ok_or_else(|| format!("{}: no instance {}", file.display(), a.instance))
            })
            .collect::<CliResult<Vec<_>>>()?;
        scenes.push(scene);
    }
    Ok((m.classes, scenes))
}

#[derive(Serialize)]
struct ImprintOutcome<'a> {
    session: usize,
    classes: &'a [String],
    report: &'a ImprintReport,
}

fn cmd_imprint(
    state: &Path,
    support: &Path,
    cfg: ImprintConfig,
    mu: f64,
    out: &Path,
) -> CliResult<()> {
    let mut st = SessionState::load(state).map_err(fail(state.display()))?;
    if st.store.momentum != mu {
        log::warn!(
            "momentum {} in the state replaced by {mu}",
            st.store.momentum
        );
        st.store.momentum = mu;
    }
    let (classes, scenes) = load_support(support)?;
    let (next, report) =
        run_incremental_session(&st, &scenes, &classes, &cfg).map_err(fail("imprint"))?;
    next.save(out).map_err(fail(out.display()))?;
    let outcome = ImprintOutcome {
        session: next.t,
        classes: &classes,
        report: &report,
    };
    write_json(&out.with_extension("report.json"), &outcome)
}

fn metrics_csv(r: &MetricsReport) -> String {
    let pct = |v: Option<f64>| v.map_or(String::new(), |x| format!("{:.2}", 100.0 * x));
    let mut s = String::from("category,role,n_gt,n_det,ap\n");
    for c in &r.per_category {
        let role = serde_json::to_value(c.role)
            .ok()
            .and_then(|v| v.as_str().map(String::from));
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.category,
            role.unwrap_or_default(),
            c.n_gt,
            c.n_det,
            pct(c.ap)
        ));
    }
    s.push_str(&format!(
        "base,,,,{}\nnovel,,,,{}\nall,,,,{}\n",
        pct(r.base_map),
        pct(r.novel_map),
        pct(r.all_map)
    ));
    s
}

fn cmd_eval(pred: &Path, gt: &Path, iou: f64, split: &str, out: &Path) -> CliResult<()> {
    let preset = ProtocolPreset::by_name(split).map_err(fail("split"))?;
    let dets: Vec<Detection> = read_jsonl(pred).map_err(fail(pred.display()))?;
    let gts: Vec<GroundTruth> = read_jsonl(gt).map_err(fail(gt.display()))?;
    let cfg = EvalConfig {
        iou_thresh: iou,
        iou_mode: preset.iou_mode,
        ..EvalConfig::default()
    };
    let novel = preset.novel();
    let meta = ProtocolMeta {
        label: preset.name.clone(),
        session: preset.tasks.len(),
        way: novel.len(),
        shot: 0,
        incomplete: false,
    };
    let report = map_report(&dets, &gts, &preset.base, &novel, &cfg, meta).map_err(fail("eval"))?;
    write_json(out, &report)?;
    fs::write(csv_path(out), metrics_csv(&report)).map_err(fail(out.display()))
}

fn cmd_simulate(config: Option<&Path>, mode: ProtocolMode, seed: u64, out: &Path) -> CliResult<()> {
    let cfg: SimConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(fail(p.display()))?;
            serde_json::from_str(&text).map_err(fail(p.display()))?
        }
        None => SimConfig::default(),
    };
    let report = run_protocol(&cfg, mode, seed).map_err(fail("simulate"))?;
    write_json(out, &report)?;
    fs::write(csv_path(out), report_csv(&report)).map_err(fail(out.display()))?;
    if report.incomplete {
        return Err(format!(
            "protocol stopped early: {}",
            report.error.as_deref().unwrap_or("unknown error")
        ));
    }
    Ok(())
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("FI3DET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("FI3DET_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(fail("thread pool"))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match &cli.cmd {
        Cmd::Init {
            split,
            scenes,
            mu,
            hidden,
            seed,
            out,
        } => cmd_init(split, scenes, *mu, *hidden, *seed, out),
        Cmd::Mine {
            scenes,
            frames,
            sigma,
            out,
        } => cmd_mine(scenes, frames, *sigma, out),
        Cmd::Imprint {
            state,
            support,
            mu,
            epochs,
            lr,
            out,
        } => {
            let cfg = ImprintConfig {
                epochs: *epochs,
                lr: *lr,
                ..ImprintConfig::default()
            };
            cmd_imprint(state, support, cfg, *mu, out)
        }
        Cmd::Eval {
            pred,
            gt,
            iou,
            split,
            out,
        } => cmd_eval(pred, gt, *iou, split, out),
        Cmd::Simulate {
            config,
            protocol,
            seed,
            out,
        } => cmd_simulate(config.as_deref(), *protocol, *seed, out),
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
