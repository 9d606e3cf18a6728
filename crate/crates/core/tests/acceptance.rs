//! Acceptance checks. Runs without the libtest harness so every line is
//! printed; exits non-zero when any check fails.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI};
use std::process::{Command, ExitCode};

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fi3det::evaluation::{average_precision, match_detections, Interpolation};
use fi3det::geometry::{iou3d, Box3, IouMode};
use fi3det::losses::{
    bce_dice_objectness, cosine_alignment_loss, incremental_loss, weighted_diou_regression,
};
use fi3det::prototype::{
    gate_forward, gate_loss_and_grad, CategoryRole, FirstUpdate, GateParams, GateSample,
    PrototypeStore,
};
use fi3det::session::{run_protocol, ProtocolMode, ProtocolPreset, SimConfig, SplitSpec};
use fi3det::weighting::{box_weight, combined_weights, point_weight, WeightConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

/// Independent point-in-box test in the box frame.
fn inside(p: &Vector3<f64>, b: &Box3) -> bool {
    let d = p - b.center();
    let (s, c) = b.yaw().sin_cos();
    let local = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
    let h = b.size() * 0.5;
    (0..3).all(|k| local[k].abs() <= h[k])
}

/// Jittered-grid Monte-Carlo estimate with `n³` samples drawn inside `a`.
fn mc_iou(a: &Box3, b: &Box3, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (s, c) = a.yaw().sin_cos();
    let size = a.size();
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let u = [
                    (i as f64 + rng.random::<f64>()) / n as f64 - 0.5,
                    (j as f64 + rng.random::<f64>()) / n as f64 - 0.5,
                    (k as f64 + rng.random::<f64>()) / n as f64 - 0.5,
                ];
                let l = Vector3::new(u[0] * size.x, u[1] * size.y, u[2] * size.z);
                let p = a.center() + Vector3::new(c * l.x - s * l.y, s * l.x + c * l.y, l.z);
                hits += inside(&p, b) as usize;
            }
        }
    }
    let va = size.x * size.y * size.z;
    let vb = b.size().x * b.size().y * b.size().z;
    let inter = va * hits as f64 / (n * n * n) as f64;
    inter / (va + vb - inter)
}

fn random_box(rng: &mut ChaCha8Rng, around: Vector3<f64>, spread: f64) -> Box3 {
    let c = around + Vector3::from_fn(|_, _| rng.random_range(-spread..spread));
    let s = Vector3::from_fn(|_, _| rng.random_range(0.3..1.5));
    Box3::new(c, s, rng.random_range(-PI..PI)).unwrap()
}

fn check_iou() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut overlapping = 0;
    for _ in 0..100 {
        let a = random_box(&mut rng, Vector3::zeros(), 0.2);
        let b = random_box(&mut rng, a.center(), 0.6);
        let exact = iou3d(&a, &b);
        let mc = mc_iou(&a, &b, 100, &mut rng);
        overlapping += (mc > 0.0) as usize;
        worst = worst.max((exact - mc).abs());
    }
    let unit = Vector3::repeat(1.0);
    let cube = Box3::new(Vector3::zeros(), unit, 0.0).unwrap();
    let turned = Box3::new(Vector3::zeros(), unit, FRAC_PI_4).unwrap();
    let diag = iou3d(&cube, &turned);
    let pass = worst <= 2e-3 && (diag - FRAC_1_SQRT_2).abs() <= 1e-6 && overlapping > 50;
    outcome(
        pass,
        format!(
            "rotated IoU vs 1e6-sample volume estimate: max |diff| {worst:.2e} over 100 pairs \
             ({overlapping} overlapping, tol 2e-3); turned unit cubes {diag:.9} vs {FRAC_1_SQRT_2:.9} (tol 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Double loop over points and boxes.
fn naive_weights(
    points: &[Vector3<f64>],
    boxes: &[Box3],
    feats: &Array2<f64>,
    sigma: f64,
) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for b in boxes {
        let mut members = Vec::new();
        for (e, p) in points.iter().enumerate() {
            let row = feats.row(e);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 && b.contains(p) {
                members.push(e);
            }
        }
        if members.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let k = feats.ncols();
        let mut sum = vec![0.0; k];
        for &e in &members {
            let row = feats.row(e);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for d in 0..k {
                sum[d] += row[d] / norm;
            }
        }
        let wbox = (sum.iter().map(|x| x * x).sum::<f64>().sqrt() / members.len() as f64).min(1.0);
        let c = b.center();
        let entries = members
            .iter()
            .map(|&e| {
                let p = points[e];
                let d2 = (p.x - c.x) * (p.x - c.x)
                    + (p.y - c.y) * (p.y - c.y)
                    + (p.z - c.z) * (p.z - c.z);
                (e, wbox * (-d2 / (2.0 * sigma * sigma)).exp())
            })
            .collect();
        out.push(entries);
    }
    out
}

fn check_weighting() -> Outcome {
    let sigma = 0.5;
    let at_sigma = point_weight(&Vector3::new(0.3, 0.4, 0.0), &Vector3::zeros(), sigma).unwrap();
    let ortho = box_weight([[1.0, 0.0].as_slice(), [0.0, 1.0].as_slice()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatched = 0;
    let mut pairs = 0;
    for _ in 0..50 {
        let n = 300;
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(0.0..3.0)))
            .collect();
        let feats = Array2::from_shape_fn((n, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let mut feats = feats;
        for e in 0..n {
            if rng.random::<f64>() < 0.05 {
                feats.row_mut(e).fill(0.0);
            }
        }
        let boxes: Vec<Box3> = (0..6)
            .map(|_| random_box(&mut rng, Vector3::repeat(1.5), 1.2))
            .collect();
        let field = combined_weights(&points, &boxes, &feats, &WeightConfig::default()).unwrap();
        let oracle = naive_weights(&points, &boxes, &feats, sigma);
        for (j, expected) in oracle.iter().enumerate() {
            let got: Vec<(usize, f64)> = field
                .entries_for(j)
                .iter()
                .map(|e| (e.point, e.weight))
                .collect();
            pairs += expected.len();
            if got != *expected || field.box_weights[j].is_none() != expected.is_empty() {
                mismatched += 1;
            }
        }
    }
    let pass = (at_sigma - (-0.5f64).exp()).abs() <= 1e-12
        && (ortho - FRAC_1_SQRT_2).abs() <= 1e-12
        && mismatched == 0;
    outcome(
        pass,
        format!(
            "point weight at sigma {at_sigma:.15} (tol 1e-12); orthogonal box weight {ortho:.15} (tol 1e-12); \
             combined weights vs double loop: {mismatched} mismatched boxes, {pairs} point-box pairs over 50 scenes"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn check_ema() -> Outcome {
    let mu = 0.999;
    let mut zero = PrototypeStore::new(1, 1, mu)
        .unwrap()
        .with_first_update(FirstUpdate::ZeroEma);
    zero.register("a", CategoryRole::Novel(1)).unwrap();
    for _ in 0..3 {
        zero.update_prototype("a", &[1.0], &[1.0]).unwrap();
    }
    let coef = zero.get("a").unwrap().proto3d[0];

    let mut store = PrototypeStore::new(2, 1, mu).unwrap();
    store.register("b", CategoryRole::Novel(1)).unwrap();
    store.update_prototype("b", &[0.25, -2.0], &[3.0]).unwrap();
    let first = store.get("b").unwrap().proto3d.clone();
    store.update_prototype("b", &[1.25, 0.0], &[1.0]).unwrap();
    let second = store.get("b").unwrap().proto3d.clone();
    let blend = [mu * 0.25 + (1.0 - mu) * 1.25, mu * -2.0];
    let imprint_ok = first == [0.25, -2.0]
        && (second[0] - blend[0]).abs() <= 1e-12
        && (second[1] - blend[1]).abs() <= 1e-12;
    // 0.002997 is the closed form rounded to four significant digits; the
    // exact value 1 - 0.999^3 = 0.002997001 sits 1e-9 away from it, so the
    // check is made against the unrounded closed form.
    let closed = 1.0 - mu * mu * mu;
    outcome(
        (coef - closed).abs() <= 1e-9 && imprint_ok,
        format!(
            "three identical updates from zero leave coefficient {coef:.12}; closed form 1-mu^3 = {closed:.12}, \
             gap {:.1e} (tol 1e-9; gap to the rounded 0.002997 is {:.4e}); first update copies the mean: {imprint_ok}",
            (coef - closed).abs(),
            (coef - 0.002997).abs()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn unit_gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Incremental loss recomputed from the public forward pass.
fn forward_loss(
    g: &GateParams,
    store: &PrototypeStore,
    classes: &[String],
    samples: &[GateSample],
) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let out = gate_forward(&s.f3d, &s.f2d, g).unwrap();
        for (ci, c) in classes.iter().enumerate() {
            let p = store.get(c).unwrap();
            let m =
                out.alpha3d * cosine(&s.f3d, &p.proto3d) + out.alpha2d * cosine(&s.f2d, &p.proto2d);
            let score = out.gamma[g.gamma_index(c).unwrap()] * m;
            let y = (s.label == Some(ci)) as u8 as f64;
            total += (1.0 - score) * y + score * (1.0 - y);
        }
    }
    total / (samples.len() * classes.len()) as f64
}

fn check_gate_gradients() -> Outcome {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut loss_gap: f64 = 0.0;
    let mut params = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (d3, d2, n_cls) = (4, 3, 1 + (seed as usize % 3));
        let classes: Vec<String> = (0..n_cls).map(|c| format!("c{c}")).collect();
        let mut store = PrototypeStore::new(d3, d2, 0.9).unwrap();
        for c in &classes {
            store.register(c, CategoryRole::Novel(1)).unwrap();
            store
                .update_prototype(c, &unit_gauss(&mut rng, d3), &unit_gauss(&mut rng, d2))
                .unwrap();
        }
        let mut g = GateParams::new(d3, d2, 6, seed);
        g.add_classes(&classes);
        // Output layers start at zero; randomize every parameter.
        let flat: Vec<f64> = g
            .flat_params()
            .iter()
            .map(|_| rng.random_range(-0.8..0.8))
            .collect();
        g.set_flat_params(&flat);
        let samples: Vec<GateSample> = (0..5)
            .map(|i| GateSample {
                f3d: unit_gauss(&mut rng, d3),
                f2d: unit_gauss(&mut rng, d2),
                label: if i == 4 { None } else { Some(i % n_cls) },
            })
            .collect();

        let (loss, grad) = gate_loss_and_grad(&samples, &g, &store, &classes).unwrap();
        loss_gap = loss_gap.max((loss - forward_loss(&g, &store, &classes, &samples)).abs());
        let analytic = grad.flat_params();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let mut gp = g.clone();
            gp.set_flat_params(&plus);
            let mut gm = g.clone();
            gm.set_flat_params(&minus);
            let numeric = (forward_loss(&gp, &store, &classes, &samples)
                - forward_loss(&gm, &store, &classes, &samples))
                / (2.0 * h);
            // The floor absorbs float cancellation of order 1e-12 / h.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            params += 1;
        }
    }
    outcome(
        worst < 1e-4 && loss_gap < 1e-12,
        format!(
            "manual backprop vs central differences (h 1e-4): max relative error {worst:.2e} over {params} \
             parameters in 20 instances (tol 1e-4); loss matches forward recomputation within {loss_gap:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn aabb_iou(a: &Box3, b: &Box3) -> f64 {
    let (amin, amax) = (a.center() - a.size() * 0.5, a.center() + a.size() * 0.5);
    let (bmin, bmax) = (b.center() - b.size() * 0.5, b.center() + b.size() * 0.5);
    let mut inter = 1.0;
    for k in 0..3 {
        inter *= (amax[k].min(bmax[k]) - amin[k].max(bmin[k])).max(0.0);
    }
    let va = a.size().x * a.size().y * a.size().z;
    let vb = b.size().x * b.size().y * b.size().z;
    inter / (va + vb - inter)
}

/// Flags in input order.
fn naive_match(dets: &[(Box3, f64)], gts: &[Box3], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Insertion sort: higher score first, lower index first on ties.
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j]].1 > dets[order[j - 1]].1 {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = aabb_iou(&dets[d].0, gt);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= thresh {
                used[g] = true;
                flags[d] = true;
            }
        }
    }
    flags
}

fn naive_ap(ranked: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for (i, &f) in ranked.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..ranked.len() {
        let best = precision[i..].iter().cloned().fold(0.0, f64::max);
        ap += (recall[i] - prev) * best;
        prev = recall[i];
    }
    ap
}

fn check_ap() -> Outcome {
    let textbook = average_precision(&[true, false, true], 2, Interpolation::AllPoint).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut flag_mismatch = 0;
    let mut ap_mismatch = 0;
    for _ in 0..500 {
        let n_gt = rng.random_range(1..5);
        let gts: Vec<Box3> = (0..n_gt)
            .map(|_| {
                let c = Vector3::from_fn(|_, _| rng.random_range(0.0..2.0));
                Box3::new(c, Vector3::from_fn(|_, _| rng.random_range(0.3..1.0)), 0.0).unwrap()
            })
            .collect();
        let n_det = rng.random_range(0..8);
        let dets: Vec<(Box3, f64)> = (0..n_det)
            .map(|_| {
                let anchor = gts[rng.random_range(0..gts.len())].center();
                let c = anchor + Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
                let b =
                    Box3::new(c, Vector3::from_fn(|_, _| rng.random_range(0.3..1.0)), 0.0).unwrap();
                // Coarse scores so ties happen.
                (b, (rng.random_range(0..5) as f64) / 4.0)
            })
            .collect();
        let thresh = [0.25, 0.5][rng.random_range(0..2)];
        let flags = match_detections(&dets, &gts, thresh, IouMode::AxisAligned);
        let expected = naive_match(&dets, &gts, thresh);
        if flags != expected {
            flag_mismatch += 1;
        }
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
        let ranked: Vec<bool> = order.iter().map(|&i| expected[i]).collect();
        let ap = average_precision(&ranked, n_gt, Interpolation::AllPoint).unwrap();
        if ap != naive_ap(&ranked, n_gt) {
            ap_mismatch += 1;
        }
    }
    outcome(
        flag_mismatch == 0 && ap_mismatch == 0 && (textbook - 5.0 / 6.0).abs() <= 1e-6,
        format!(
            "500 random cases vs naive reference: {flag_mismatch} flag mismatches, {ap_mismatch} AP mismatches; \
             [TP, FP, TP] with 2 GT gives {textbook:.6} (expected 0.833333, tol 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn check_losses() -> Outcome {
    let target = [1.0, 0.0, 1.0, 1.0, 0.0];
    let obj = bce_dice_objectness(&target, &target, &[true; 5]).unwrap();
    let inst = [0.3, -0.2, 0.9];
    let members = [inst.as_slice(), inst.as_slice(), inst.as_slice()];
    let w = [0.2, 0.7, 1.0];
    let feat = cosine_alignment_loss(&members, &inst, &w, 3.0).unwrap();
    let b = Box3::new(
        Vector3::new(1.0, 2.0, 0.5),
        Vector3::new(0.8, 0.6, 1.0),
        0.4,
    )
    .unwrap();
    let reg = weighted_diou_regression(&[b, b, b], &b, &w, 3.0).unwrap();
    let inc = incremental_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
    let fixed = [obj, feat, reg, inc];
    let fixed_ok = fixed.iter().all(|v| v.abs() <= 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut gap: f64 = 0.0;
    for _ in 0..50 {
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| unit_gauss(&mut rng, 4)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let anchor = unit_gauss(&mut rng, 4);
        let preds: Vec<Box3> = (0..n)
            .map(|_| random_box(&mut rng, b.center(), 0.5))
            .collect();
        let w1: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let w2: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (a, c) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + c * y).collect();
        let z = n as f64;
        let f = |w: &[f64]| cosine_alignment_loss(&refs, &anchor, w, z).unwrap();
        let r = |w: &[f64]| weighted_diou_regression(&preds, &b, w, z).unwrap();
        gap = gap.max((f(&mix) - (a * f(&w1) + c * f(&w2))).abs());
        gap = gap.max((r(&mix) - (a * r(&w1) + c * r(&w2))).abs());
    }
    outcome(
        fixed_ok && gap <= 1e-12,
        format!(
            "perfect inputs give obj {obj:.1e}, feat {feat:.1e}, reg {reg:.1e}, inc {inc:.1e} (tol 1e-5); \
             weight linearity gap {gap:.1e} (tol 1e-12)"
        ),
    )
}

// ---------------------------------------------------------------- 7-10

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn noisy(mut cfg: SimConfig) -> SimConfig {
    cfg.world.feature_noise = 0.1;
    cfg.world.detector_jitter = 0.05;
    cfg
}

fn check_frozen_base() -> Outcome {
    let mut cfg = noisy(SimConfig::default());
    cfg.split = SplitSpec::Custom(ProtocolPreset {
        name: "three-tasks".into(),
        base: names(&["bed", "chair", "sofa"]),
        tasks: vec![
            names(&["desk", "table"]),
            names(&["toilet", "sink"]),
            names(&["door", "window"]),
        ],
        iou_mode: IouMode::AxisAligned,
    });
    let mut changed = 0;
    let mut sessions = 0;
    let mut problems = Vec::new();
    for seed in 0..10 {
        let r = match run_protocol(&cfg, ProtocolMode::Sequential, seed) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        if r.incomplete || r.sessions.len() != 4 {
            problems.push(format!("seed {seed}: {:?}", r.error));
        }
        let first = &r.sessions[0];
        for s in &r.sessions[1..] {
            sessions += 1;
            let base_aps = |rec: &fi3det::session::SessionRecord| -> Vec<Option<u64>> {
                rec.metrics
                    .per_category
                    .iter()
                    .filter(|c| r.base_categories.contains(&c.category))
                    .map(|c| c.ap.map(f64::to_bits))
                    .collect()
            };
            if s.base_digest != first.base_digest
                || s.base_detections != first.base_detections
                || s.metrics.base_map.map(f64::to_bits) != first.metrics.base_map.map(f64::to_bits)
                || base_aps(s) != base_aps(first)
            {
                changed += 1;
            }
        }
    }
    outcome(
        changed == 0 && problems.is_empty() && sessions == 30,
        format!(
            "base detections after each of 3 sequential sessions vs before, 10 seeds: {changed} of {sessions} \
             differ (digest, count, base mAP bits){}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {}", problems.join("; "))
            }
        ),
    )
}

/// Mean novel mAP of the noisy run over seeds 0..10, measured once before
/// the acceptance suite was written.
const PINNED_NOISY_NOVEL_MAP: f64 = 0.9794;

fn check_end_to_end() -> Outcome {
    let clean = SimConfig::default();
    let mut worst_clean: f64 = 1.0;
    let mut problems = Vec::new();
    for seed in 0..3 {
        match run_protocol(&clean, ProtocolMode::Batch, seed) {
            Ok(r) if !r.incomplete => {
                let v = r
                    .sessions
                    .last()
                    .and_then(|s| s.metrics.novel_map)
                    .unwrap_or(0.0);
                worst_clean = worst_clean.min(v);
            }
            Ok(r) => problems.push(format!("clean seed {seed}: {:?}", r.error)),
            Err(e) => problems.push(format!("clean seed {seed}: {e}")),
        }
    }
    let cfg = noisy(SimConfig::default());
    let mut maps = Vec::new();
    for seed in 0..10 {
        match run_protocol(&cfg, ProtocolMode::Batch, seed) {
            Ok(r) if !r.incomplete => maps.push(
                r.sessions
                    .last()
                    .and_then(|s| s.metrics.novel_map)
                    .unwrap_or(0.0),
            ),
            Ok(r) => problems.push(format!("noisy seed {seed}: {:?}", r.error)),
            Err(e) => problems.push(format!("noisy seed {seed}: {e}")),
        }
    }
    let mean = maps.iter().sum::<f64>() / maps.len().max(1) as f64;
    let bar = (PINNED_NOISY_NOVEL_MAP - 0.02).max(0.85);
    outcome(
        problems.is_empty() && (worst_clean - 1.0).abs() <= 1e-6 && maps.len() == 10 && mean >= bar,
        format!(
            "zero noise 3-way 5-shot: worst novel mAP {worst_clean:.6} over 3 seeds (need 1, tol 1e-6); \
             noise 0.1 / jitter 0.05: mean novel mAP {mean:.4} over 10 seeds (need >= {bar:.4}){}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {}", problems.join("; "))
            }
        ),
    )
}

fn pseudo_iou_means(cfg: &SimConfig) -> Result<(f64, f64, usize), String> {
    let (mut w, mut u, mut wins) = (0.0, 0.0, 0);
    for seed in 0..10 {
        let r = run_protocol(cfg, ProtocolMode::Batch, seed).map_err(|e| e.to_string())?;
        if !r.base.failures.is_empty() {
            return Err(format!("seed {seed}: {}", r.base.failures.join("; ")));
        }
        w += r.base.pseudo_iou_weighted;
        u += r.base.pseudo_iou_unweighted;
        wins += (r.base.pseudo_iou_weighted >= r.base.pseudo_iou_unweighted) as usize;
    }
    Ok((w / 10.0, u / 10.0, wins))
}

fn check_weighting_ablation() -> (Outcome, String) {
    let mut cfg = noisy(SimConfig::default());
    cfg.render.mask_dropout = 0.1;
    cfg.render.mask_merge_prob = 0.3;
    let main = match pseudo_iou_means(&cfg) {
        Ok((w, u, wins)) => outcome(
            w >= u,
            format!(
                "noisy run with mask dropout 0.1 and mask merging 0.3: mean pseudo-label IoU weighted {w:.4} \
                 >= unweighted {u:.4} over 10 seeds ({wins}/10 seeds individually)"
            ),
        ),
        Err(e) => outcome(false, e),
    };
    let clean = match pseudo_iou_means(&noisy(SimConfig::default())) {
        Ok((w, u, _)) => format!(
            "note: with clean masks the two agree to {:.1e} (weighted {w:.5}, unweighted {u:.5}); \
             there is no segmentation error for the weights to discount",
            (w - u).abs()
        ),
        Err(e) => format!("note: clean-mask run failed: {e}"),
    };
    (main, clean)
}

fn check_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = noisy(SimConfig::default());
    cfg.split = SplitSpec::Preset("scannet-seq".into());
    cfg.render.mask_dropout = 0.1;
    cfg.render.mask_merge_prob = 0.3;
    let config = dir.path().join("config.json");
    std::fs::write(&config, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = |tag: &str, threads: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = dir.path().join(format!("{tag}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_fi3det"))
            .args([
                "simulate",
                "--protocol",
                "sequential",
                "--seed",
                "11",
                "--config",
            ])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .env("FI3DET_THREADS", threads)
            .env("RUST_LOG", "error")
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("run {tag} exited with {status}"));
        }
        let json = std::fs::read(&out).map_err(|e| e.to_string())?;
        let csv = std::fs::read(out.with_extension("csv")).map_err(|e| e.to_string())?;
        Ok((json, csv))
    };
    match (run("a", "4"), run("b", "4"), run("c", "1")) {
        (Ok(a), Ok(b), Ok(c)) => outcome(
            a == b && a == c,
            format!(
                "`fi3det simulate` twice with the same config and seed (plus once single-threaded): \
                 JSON {} bytes identical {}, CSV identical {}",
                a.0.len(),
                a.0 == b.0 && a.0 == c.0,
                a.1 == b.1 && a.1 == c.1
            ),
        ),
        (a, b, c) => outcome(false, format!("runs failed: {:?} {:?} {:?}", a.err(), b.err(), c.err())),
    }
}

fn main() -> ExitCode {
    let (ablation, note) = check_weighting_ablation();
    let results = [
        ("geometry oracle", check_iou()),
        ("weighting analytics", check_weighting()),
        ("EMA closed form", check_ema()),
        ("gate gradients", check_gate_gradients()),
        ("AP oracle", check_ap()),
        ("loss fixed points", check_losses()),
        ("frozen-base invariance", check_frozen_base()),
        ("synthetic end-to-end", check_end_to_end()),
        ("weighting ablation ordering", ablation),
        ("determinism", check_determinism()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2} {name}: {}", i + 1, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("       {note}");
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
