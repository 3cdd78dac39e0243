//! Acceptance checks, one line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. The trend criteria
//! (7 to 10) train 18 desk-scale models and take about half an hour on one
//! core; `CAPE_ACCEPTANCE=quick` skips them.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{Matrix4, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use cape::decoder::{concat_form_logits, AttentionRecord, CrossAttention, DecoderShape, KeySet};
use cape::detection::hungarian::assignment_cost;
use cape::detection::{generate_prev_gt, hungarian_match, total_loss, Box3D, DeskMetrics, DetectionError, LossWeights};
use cape::embedding::{PeMode, QueryPe};
use cape::geometry::{perturb_extrinsics, propagate_reference, Camera, CameraRig, EgoMotion, Extrinsics, Intrinsics};
use cape::harness::eval::split_seeds;
use cape::harness::train::sample_input;
use cape::harness::{
    ablation_rows, dump_attention, evaluate_model, read_manifest, robustness_sweep, train, Checkpoint, EvalSplit,
    ExperimentConfig, MapKind,
};
use cape::model::{CapeModel, FrameInput, ModelConfig, ModelError, SampleInput};
use cape::scenegen::generate_scene;
use cape::temporal::TemporalMode;
use cape::tensor::{grad_check, Activation, Linear, ParamStore, Tape, Tensor};

type Fallible<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Fallible<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn uniform(rng: &mut impl Rng, shape: [usize; 2]) -> Tensor {
    Tensor::new(
        shape,
        (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("sized")
}

fn columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    let cols = t.shape()[1];
    let data = (0..t.shape()[0])
        .flat_map(|r| t.data()[r * cols + start..r * cols + start + len].to_vec())
        .collect();
    Tensor::new([t.shape()[0], len], data).expect("sized")
}

fn rows(t: &Tensor, start: usize, len: usize) -> Tensor {
    let c = t.shape()[1];
    Tensor::new([len, c], t.data()[start * c..(start + len) * c].to_vec()).expect("sized")
}

fn project(store: &ParamStore, lin: &Linear, x: &Tensor) -> Fallible<Tensor> {
    let mut tape = Tape::with_params(store);
    let v = tape.leaf(x.clone());
    let y = lin.forward(&mut tape, v)?;
    Ok(tape.value(y).clone())
}

fn random_rigid(rng: &mut impl Rng) -> Matrix4<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.1..1.0),
    );
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.1..3.1));
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    for i in 0..3 {
        m[(i, 3)] = rng.random_range(-5.0..5.0);
    }
    m
}

fn criterion_1() -> Fallible<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut exact_sum = true;
    for _ in 0..100 {
        let heads = rng.random_range(1..=4);
        let c = heads * rng.random_range(1..=4);
        let (m, n, i) = (
            rng.random_range(1..=6),
            rng.random_range(1..=4),
            rng.random_range(1..=8),
        );
        let shape = DecoderShape {
            width: c,
            heads,
            layers: 1,
            bilateral: true,
            per_view_softmax: rng.random_bool(0.5),
        };
        let mut store = ParamStore::new();
        let attn = CrossAttention::new(&mut store, "x", shape, &mut rng)?;
        let (o, x, p) = (
            uniform(&mut rng, [m, c]),
            uniform(&mut rng, [n * i, c]),
            uniform(&mut rng, [n * i, c]),
        );
        let g: Vec<Tensor> = (0..n).map(|_| uniform(&mut rng, [m, c])).collect();

        let mut tape = Tape::with_params(&store);
        let ov = tape.leaf(o.clone());
        let gv: Vec<_> = g.iter().map(|t| tape.leaf(t.clone())).collect();
        let keys = KeySet {
            features: tape.leaf(x.clone()),
            pe: tape.leaf(p.clone()),
            views: n,
            pixels: i,
        };
        let (_, rec) = attn.forward(&mut tape, ov, &gv, &keys, true)?;
        let rec: AttentionRecord = rec.ok_or("no attention record")?;

        let position_q = attn
            .position_q
            .as_ref()
            .ok_or("bilateral attention without position_q")?;
        let position_k = attn
            .position_k
            .as_ref()
            .ok_or("bilateral attention without position_k")?;
        let qc = project(&store, &attn.content_q, &o)?;
        let kc = project(&store, &attn.content_k, &x)?;
        let kp = project(&store, position_k, &p)?;
        let dh = c / heads;
        for head in 0..heads {
            for view in 0..n {
                let qp = project(&store, position_q, &g[view])?;
                let expect = concat_form_logits(
                    &columns(&qc, head * dh, dh),
                    &columns(&qp, head * dh, dh),
                    &columns(&rows(&kc, view * i, i), head * dh, dh),
                    &columns(&rows(&kp, view * i, i), head * dh, dh),
                    1.0 / (dh as f64).sqrt(),
                )?;
                let maps = &rec.maps[head][view];
                worst = worst.max(maps.overall.max_abs_diff(&expect));
                let (local, global) = (maps.local.as_ref(), maps.global.as_ref());
                let (local, global) = local.zip(global).ok_or("bilateral maps missing")?;
                exact_sum &=
                    (0..maps.overall.len()).all(|k| maps.overall.data()[k] == local.data()[k] + global.data()[k]);
            }
        }
    }
    verdict(
        worst < 1e-12 && exact_sum,
        format!("100 configurations, max |concat - (content + position)| = {worst:.2e}"),
    )
}

fn state_for(model: &CapeModel, rng: &mut impl Rng) -> Tensor {
    uniform(rng, [model.config.queries, model.config.width])
}

fn criterion_2() -> Fallible<Verdict> {
    let cfg = ExperimentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let model = CapeModel::new(cfg.model.clone(), &mut store, &mut rng)?;
    let state = state_for(&model, &mut rng);
    let mut key_checks = 0;
    let mut query_checks = 0;
    let mut pass = true;
    for seed in 0..5 {
        let sample = generate_scene(&cfg.data, 9_000 + seed)?;
        let rig = &sample.current.rig;
        let frame = FrameInput {
            rig,
            features: &sample.current.features,
        };
        let (keys, queries) = model.position_embeddings(&store, &frame, &state)?;
        for r_max in [0.5, 2.0, 4.0, 8.0, 30.0, 180.0] {
            let mut noisy = rig.clone();
            for cam in &mut noisy.cameras {
                cam.extrinsics = perturb_extrinsics(&cam.extrinsics, r_max, &mut rng);
            }
            let frame = FrameInput {
                rig: &noisy,
                features: &sample.current.features,
            };
            let (k, _) = model.position_embeddings(&store, &frame, &state)?;
            pass &= k == keys;
            key_checks += 1;
        }
        for _ in 0..6 {
            let mut other = rig.clone();
            for cam in &mut other.cameras {
                let k = &cam.intrinsics;
                cam.intrinsics = Intrinsics::new(
                    k.fx() * rng.random_range(0.5..2.0),
                    k.fy() * rng.random_range(0.5..2.0),
                    k.cx() + rng.random_range(-2.0..2.0),
                    k.cy() + rng.random_range(-2.0..2.0),
                )?;
            }
            let frame = FrameInput {
                rig: &other,
                features: &sample.current.features,
            };
            let (_, q) = model.position_embeddings(&store, &frame, &state)?;
            pass &= q == queries;
            query_checks += 1;
        }
    }
    verdict(
        pass,
        format!("{key_checks} extrinsic perturbations (key PE) and {query_checks} intrinsic changes (query PE), bit-identical"),
    )
}

fn criterion_3() -> Fallible<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;

    // Component level: camera points and Q-PE of one camera.
    let mut store = ParamStore::new();
    let q = QueryPe::new(&mut store, 16, 10.0, Activation::Relu, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("bias") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    // Model level: every view of the default rig, references moved in the
    // parameter store.
    let mut cfg = ExperimentConfig::default();
    cfg.model.query_fpe = false;
    let mut model_store = ParamStore::new();
    let model = CapeModel::new(cfg.model.clone(), &mut model_store, &mut rng)?;
    let sample = generate_scene(&cfg.data, 77)?;
    let state = state_for(&model, &mut rng);
    let bounds = cfg.model.bounds;

    for _ in 0..50 {
        let s = EgoMotion::new(random_rigid(&mut rng), 1.0)?;
        let s_inv = s.inverse();
        let e = Extrinsics::from_matrix(random_rigid(&mut rng))?;
        let compensated = e.compose(s_inv.matrix())?;
        let refs = uniform(&mut rng, [6, 3]).map(|v| 8.0 * v);
        let moved = propagate_reference(&refs, &s);
        let mut tape = Tape::with_params(&store);
        let a_pts = tape.leaf(refs);
        let a_cam = q.camera_points(&mut tape, a_pts, &e)?;
        let a = q.query_pe(&mut tape, a_cam)?;
        let b_pts = tape.leaf(moved);
        let b_cam = q.camera_points(&mut tape, b_pts, &compensated)?;
        let b = q.query_pe(&mut tape, b_cam)?;
        worst = worst.max(tape.value(a).max_abs_diff(tape.value(b)));

        let frame = FrameInput {
            rig: &sample.current.rig,
            features: &sample.current.features,
        };
        let (_, before) = model.position_embeddings(&model_store, &frame, &state)?;
        let mut moved_store = model_store.clone();
        let refs = moved_store.get_mut(model.references);
        for p in refs.data_mut().chunks_exact_mut(3) {
            let metric = bounds.denormalize([p[0], p[1], p[2]]);
            let m = s.apply(&Vector3::from(metric));
            p.copy_from_slice(&bounds.normalize([m.x, m.y, m.z]));
        }
        let rig = sample.current.rig.reexpressed(s_inv.matrix())?;
        let frame = FrameInput {
            rig: &rig,
            features: &sample.current.features,
        };
        let (_, after) = model.position_embeddings(&moved_store, &frame, &state)?;
        for (x, y) in before.iter().zip(&after) {
            worst = worst.max(x.max_abs_diff(y));
        }
    }
    verdict(
        worst < 1e-10,
        format!("50 rigid transforms, max query PE change {worst:.2e}"),
    )
}

fn tiny_rig(n: usize) -> Fallible<CameraRig> {
    let k = Intrinsics::new(2.0, 2.0, 1.5, 0.5)?;
    let cams = (0..n)
        .map(|i| Camera {
            intrinsics: k,
            extrinsics: Extrinsics::looking_along(Vector3::new(0.3, 0.0, 1.0), i as f64 * 1.7),
        })
        .collect();
    Ok(CameraRig::new(cams, 2, 4, vec![1.0, 3.0, 6.0, 10.0])?)
}

fn tiny_boxes() -> Vec<Box3D> {
    vec![
        Box3D {
            center: [3.0, 1.0, 1.0],
            size: [1.0, 2.0, 1.5],
            yaw: 0.3,
            velocity: [0.5, 0.0],
            class: 0,
        },
        Box3D {
            center: [-2.0, 4.0, 0.5],
            size: [0.5, 0.5, 1.0],
            yaw: -1.0,
            velocity: [0.0, -0.4],
            class: 1,
        },
    ]
}

fn criterion_4() -> Fallible<Verdict> {
    let start = Instant::now();
    let variants = [
        ("camera+bilateral", PeMode::Camera, true, TemporalMode::Off),
        ("global", PeMode::Global, false, TemporalMode::Off),
        ("temporal", PeMode::Camera, true, TemporalMode::SeparateQueries),
    ];
    let mut worst = 0.0f64;
    let mut worst_group = String::new();
    let mut groups = 0;
    for (label, pe_mode, bilateral, mode) in variants {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = ModelConfig {
            width: 8,
            queries: 4,
            layers: 1,
            heads: 2,
            depth_bins: 4,
            classes: 2,
            pe_mode,
            bilateral,
            ..Default::default()
        };
        cfg.temporal.mode = mode;
        let mut store = ParamStore::new();
        let model = CapeModel::new(cfg, &mut store, &mut rng)?;
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("bias") && !store.name(id).starts_with("heads.cls") {
                for v in store.get_mut(id).data_mut() {
                    *v += rng.random_range(-0.2..0.2);
                }
            }
        }
        let rig = tiny_rig(2)?;
        let feats: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, [rig.pixels(), 8])).collect();
        let motion = EgoMotion::planar(0.1, Vector3::new(0.4, 0.0, 0.0), 0.5)?;
        let gts = tiny_boxes();
        let prev_gts = generate_prev_gt(&gts, &motion);
        let input = SampleInput {
            current: FrameInput {
                rig: &rig,
                features: &feats[..2],
            },
            previous: (mode != TemporalMode::Off).then_some((
                FrameInput {
                    rig: &rig,
                    features: &feats[2..],
                },
                motion,
            )),
        };
        let w = LossWeights::default();
        let report = grad_check(&store, 1e-5, |tape| {
            let out = model.forward(tape, &input, false).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let previous = out.previous.as_ref().map(|p| (p, prev_gts.as_slice()));
            let (loss, _) =
                total_loss(tape, (&out.current, &gts), previous, &model.config.bounds, &w).map_err(|e| match e {
                    DetectionError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
            Ok(loss)
        })?;
        groups += report.per_param.len();
        if let Some((name, err)) = report.worst() {
            if *err > worst {
                worst = *err;
                worst_group = format!("{label}/{name}");
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("{groups} parameter groups, max relative error {worst:.2e} ({worst_group}), {secs:.1} s"),
    )
}

fn exhaustive_minimum(cost: &Tensor) -> f64 {
    fn go(cost: &Tensor, g: usize, used: &mut [bool], chosen: &mut Vec<usize>, best: &mut f64) {
        let (rows, cols) = (cost.shape()[0], cost.shape()[1]);
        if g == rows {
            *best = best.min(assignment_cost(cost, chosen));
            return;
        }
        for q in 0..cols {
            if !used[q] {
                used[q] = true;
                chosen.push(q);
                go(cost, g + 1, used, chosen, best);
                chosen.pop();
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.shape()[1]], &mut Vec::new(), &mut best);
    best
}

fn criterion_5() -> Fallible<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for trial in 0..200 {
        let r = rng.random_range(1..=7);
        let c = if trial < 20 { 9 } else { rng.random_range(r..=9) };
        let r = if trial < 20 { 7 } else { r };
        // Multiples of 1/1024 keep every sum exact.
        let data = (0..r * c)
            .map(|_| rng.random_range(-4096i64..4096) as f64 / 1024.0)
            .collect();
        let cost = Tensor::new([r, c], data)?;
        let a = hungarian_match(&cost)?;
        let found = assignment_cost(&cost, &a.query_of_gt);
        if found != exhaustive_minimum(&cost) || a.cost != found {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("200 matrices up to 7x9, {mismatches} differ from the exhaustive minimum"),
    )
}

fn criterion_6() -> Fallible<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let a = EgoMotion::new(random_rigid(&mut rng), 0.5)?;
        let b = EgoMotion::new(random_rigid(&mut rng), 0.5)?;
        let pts = uniform(&mut rng, [8, 3]).map(|v| 20.0 * v);
        let two_step = propagate_reference(&propagate_reference(&pts, &a), &b);
        let composed = propagate_reference(&pts, &a.then(&b)?);
        worst = worst.max(two_step.max_abs_diff(&composed));
    }
    let mut identity_ok = true;
    for seed in 0..50 {
        let sample = generate_scene(&Default::default(), seed)?;
        let still: Vec<Box3D> = sample
            .current
            .boxes
            .iter()
            .map(|b| Box3D {
                velocity: [0.0, 0.0],
                ..*b
            })
            .collect();
        identity_ok &= generate_prev_gt(&still, &EgoMotion::identity(0.5)?) == still;
    }
    verdict(
        worst < 1e-10 && identity_ok,
        format!("500 compositions, max deviation {worst:.2e}; zero-velocity identity {identity_ok}"),
    )
}

struct Run {
    checkpoint: Checkpoint,
    metrics: DeskMetrics,
    diverged_at: Option<usize>,
    seconds: f64,
}

fn run(config: &ExperimentConfig, seed: u64) -> Fallible<Run> {
    let cfg = ExperimentConfig { seed, ..config.clone() };
    let start = Instant::now();
    let outcome = train(&cfg, None, false)?;
    let seconds = start.elapsed().as_secs_f64();
    let (model, store) = outcome.checkpoint.model()?;
    let metrics = evaluate_model(&model, &store, &cfg, &split_seeds(&cfg, EvalSplit::HeldOut), None)?;
    Ok(Run {
        checkpoint: outcome.checkpoint,
        metrics,
        diverged_at: outcome.diverged.map(|d| d.step),
        seconds,
    })
}

/// Trains every (row, seed) pair once; results are keyed by `(table, row)`.
fn train_rows(tables: &[(u8, &str)]) -> Fallible<BTreeMap<(u8, char), Vec<Run>>> {
    let base = ExperimentConfig::default();
    let mut jobs = Vec::new();
    for &(table, labels) in tables {
        for row in ablation_rows(&base, table)? {
            if labels.contains(row.label) {
                for seed in SEEDS {
                    jobs.push((table, row.label, row.config.clone(), seed));
                }
            }
        }
    }
    let runs: Vec<Run> = jobs
        .par_iter()
        .map(|(table, label, config, seed)| {
            let r = run(config, *seed)?;
            eprintln!(
                "  trained table {table} row ({label}) seed {seed}: desk-mAP {:.3} in {:.0} s",
                r.metrics.desk_map(),
                r.seconds
            );
            Ok(r)
        })
        .collect::<Fallible<_>>()?;
    let mut out: BTreeMap<(u8, char), Vec<Run>> = BTreeMap::new();
    for ((table, label, _, _), r) in jobs.into_iter().zip(runs) {
        out.entry((table, label)).or_default().push(r);
    }
    Ok(out)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_7(runs: &[Run]) -> Fallible<Verdict> {
    let standard = ExperimentConfig::default();
    let used = &runs[0].checkpoint.config;
    if (&used.model, &used.data, &used.train) != (&standard.model, &standard.data, &standard.train) {
        return verdict(false, "row (d) differs from the standard config");
    }
    let maps: Vec<f64> = runs.iter().map(|r| r.metrics.desk_map()).collect();
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let steps = runs[0].checkpoint.config.train.steps;
    let pass = maps.iter().all(|&m| m >= 0.5) && slowest < 1800.0 && steps <= 2000;
    verdict(
        pass,
        format!(
            "desk-mAP@2m per seed {:?}, {steps} steps, slowest run {slowest:.0} s",
            maps.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion_8(table: &BTreeMap<(u8, char), Vec<Run>>) -> Fallible<Verdict> {
    let row = |l: char| &table[&(4, l)];
    let means: BTreeMap<char, f64> = "abcd"
        .chars()
        .map(|l| (l, mean(row(l).iter().map(|r| r.metrics.desk_map()))))
        .collect();
    let c_diverged = row('c').iter().any(|r| r.diverged_at.is_some());
    let c_worst = means.values().all(|&m| means[&'c'] <= m);
    let d_beats_b = means[&'d'] >= means[&'b'];
    let summary: Vec<String> = means.iter().map(|(l, m)| format!("({l}) {m:.3}")).collect();
    verdict(
        d_beats_b && (c_diverged || c_worst),
        format!(
            "mean desk-mAP {}; d >= b {d_beats_b}; (c) diverged {c_diverged}, worst {c_worst}",
            summary.join(" ")
        ),
    )
}

fn criterion_9(table: &BTreeMap<(u8, char), Vec<Run>>) -> Fallible<Verdict> {
    let levels = [2.0, 4.0, 8.0];
    let mut camera = vec![0.0; levels.len()];
    let mut global = vec![0.0; levels.len()];
    for (i, seed) in SEEDS.iter().enumerate() {
        let ckpts = [
            ("camera".to_string(), table[&(4, 'd')][i].checkpoint.clone()),
            ("global".to_string(), table[&(4, 'b')][i].checkpoint.clone()),
        ];
        let report = robustness_sweep(&ckpts, &levels, 20, 10_000 + seed, None)?;
        for l in 0..levels.len() {
            camera[l] += report.curves[0].mean_drop[l] / SEEDS.len() as f64;
            global[l] += report.curves[1].mean_drop[l] / SEEDS.len() as f64;
        }
    }
    let wins = camera.iter().zip(&global).filter(|(c, g)| c <= g).count();
    let pairs: Vec<String> = levels
        .iter()
        .zip(camera.iter().zip(&global))
        .map(|(l, (c, g))| format!("{l}deg {c:+.4}/{g:+.4}"))
        .collect();
    verdict(
        wins >= 2,
        format!(
            "mean AP drop camera/global: {}; camera <= global at {wins}/3 levels",
            pairs.join(", ")
        ),
    )
}

fn criterion_10(table: &BTreeMap<(u8, char), Vec<Run>>) -> Fallible<Verdict> {
    let mave = |l: char| -> Fallible<f64> {
        let v: Vec<f64> = table[&(6, l)].iter().filter_map(|r| r.metrics.mave).collect();
        if v.len() != SEEDS.len() {
            return Err(format!("row ({l}) has no mAVE on some seed").into());
        }
        Ok(mean(v))
    };
    let (shared, separate) = (mave('a')?, mave('c')?);
    verdict(
        separate <= shared,
        format!("mean desk-mAVE separate+prev {separate:.3} vs shared {shared:.3}"),
    )
}

fn criterion_11(ckpt: &Checkpoint) -> Fallible<Verdict> {
    let dir = tempfile::tempdir()?;
    let cfg = &ckpt.config;
    let scene = cfg.eval_seed(0);
    let queries: Vec<usize> = (0..cfg.model.queries).collect();
    let manifest = dump_attention(ckpt, scene, &queries, dir.path())?;
    if read_manifest(dir.path())? != manifest {
        return verdict(false, "manifest does not round-trip");
    }
    let (model, store) = ckpt.model()?;
    let sample = generate_scene(&cfg.data, scene)?;
    let mut tape = Tape::with_params(&store);
    let output = model.forward(&mut tape, &sample_input(&sample, cfg.model.temporal.mode), true)?;

    let mut files = BTreeMap::new();
    for entry in &manifest.maps {
        let (ids, map) = cape::harness::attention::read_map(&dir.path().join(&entry.file))?;
        if ids != queries {
            return verdict(false, format!("{} lists queries {ids:?}", entry.file));
        }
        let m = &output.records[entry.layer].maps[entry.head][entry.view];
        let expect = match entry.kind {
            MapKind::Local => m.local.as_ref(),
            MapKind::Global => m.global.as_ref(),
            MapKind::Overall => Some(&m.overall),
            MapKind::Softmax => Some(&m.softmax),
        };
        if expect != Some(&map) {
            return verdict(false, format!("{} does not round-trip", entry.file));
        }
        files.insert((entry.layer, entry.head, entry.view, entry.kind), map);
    }
    let mut max_row_err = 0.0f64;
    let mut sums_exact = true;
    for l in 0..manifest.layers {
        for h in 0..manifest.heads {
            for v in 0..manifest.views {
                let get = |k| files.get(&(l, h, v, k)).ok_or("missing map");
                let (local, global, overall) = (get(MapKind::Local)?, get(MapKind::Global)?, get(MapKind::Overall)?);
                sums_exact &= (0..overall.len()).all(|k| overall.data()[k] == local.data()[k] + global.data()[k]);
            }
            for q in 0..queries.len() {
                let total: f64 = (0..manifest.views)
                    .map(|v| files[&(l, h, v, MapKind::Softmax)].row(q).iter().sum::<f64>())
                    .sum();
                max_row_err = max_row_err.max((total - 1.0).abs());
            }
        }
    }
    verdict(
        sums_exact && max_row_err < 1e-12,
        format!(
            "{} maps round-trip; overall == local + global exactly {sums_exact}; max |row sum - 1| {max_row_err:.1e}",
            manifest.maps.len()
        ),
    )
}

fn cape(args: &[&str], dir: &Path, threads: &str) -> Fallible<i32> {
    let status = Command::new(env!("CARGO_BIN_EXE_cape"))
        .args(args)
        .current_dir(dir)
        .env("CAPE_THREADS", threads)
        .output()?;
    Ok(status.status.code().unwrap_or(-1))
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Fallible<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root)?.display().to_string();
            out.insert(rel, std::fs::read(&path)?);
        }
    }
    Ok(())
}

fn criterion_12() -> Fallible<Verdict> {
    let work = tempfile::tempdir()?;
    let config = work.path().join("smoke.json");
    std::fs::write(&config, serde_json::to_string_pretty(&ExperimentConfig::smoke())?)?;
    let config = config.to_str().ok_or("non-UTF-8 temp path")?;
    let mut outputs = Vec::new();
    // Both runs use the same relative paths, since paths end up in labels.
    for (name, threads) in [("first", "1"), ("second", "2")] {
        let root = work.path().join(name);
        std::fs::create_dir_all(&root)?;
        let commands: [&[&str]; 7] = [
            &["train", "--config", config, "--out", "run"],
            &["eval", "--config", config, "--out", "run"],
            &["dump-attn", "--out", "run", "--queries", "0,2"],
            &[
                "ablate", "--config", config, "--table", "4", "--seeds", "1", "--out", "ablate",
            ],
            &[
                "ablate", "--config", config, "--table", "6", "--seeds", "1", "--out", "ablate",
            ],
            &[
                "robustness",
                "--config",
                config,
                "--checkpoint",
                "run/checkpoint.json",
                "--levels",
                "0,4",
                "--trials",
                "2",
                "--out",
                "robustness",
            ],
            &[
                "gen-data", "--config", config, "--seed", "5", "--count", "3", "--out", "data",
            ],
        ];
        for args in commands {
            let code = cape(args, &root, threads)?;
            if code != 0 {
                return verdict(false, format!("`cape {}` exited with {code}", args.join(" ")));
            }
        }
        let mut files = BTreeMap::new();
        collect_files(&root, &root, &mut files)?;
        outputs.push(files);
    }
    let differing: Vec<&String> = outputs[0]
        .iter()
        .filter(|(k, v)| outputs[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same_set = outputs[0].len() == outputs[1].len();
    let metrics = outputs[0].keys().filter(|k| k.ends_with(".json")).count();
    verdict(
        differing.is_empty() && same_set,
        format!(
            "train, eval, dump-attn, ablate, robustness and gen-data rerun at 1 and 2 threads: {} files ({metrics} JSON), {} differ",
            outputs[0].len(),
            differing.len()
        ),
    )
}

fn report(n: usize, result: Fallible<Verdict>, failed: &mut usize) {
    match result {
        Ok(v) => {
            if !v.pass {
                *failed += 1;
            }
            println!("criterion {n}: {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        }
        Err(e) => {
            *failed += 1;
            println!("criterion {n}: FAIL error: {e}");
        }
    }
}

fn main() -> ExitCode {
    let quick = std::env::var("CAPE_ACCEPTANCE").is_ok_and(|v| v == "quick");
    let mut failed = 0;
    let fast: [(usize, fn() -> Fallible<Verdict>); 6] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
    ];
    for (n, check) in fast {
        report(n, check(), &mut failed);
    }

    let trained = if quick {
        for n in 7..=10 {
            println!("criterion {n}: SKIP (CAPE_ACCEPTANCE=quick)");
        }
        None
    } else {
        eprintln!("training table 4 rows a-d and table 6 rows a, c over seeds {SEEDS:?}");
        match train_rows(&[(4, "abcd"), (6, "ac")]) {
            Ok(t) => Some(t),
            Err(e) => {
                for n in 7..=10 {
                    report(n, Err(format!("training failed: {e}").into()), &mut failed);
                }
                None
            }
        }
    };
    if let Some(t) = &trained {
        report(7, criterion_7(&t[&(4, 'd')]), &mut failed);
        report(8, criterion_8(t), &mut failed);
        report(9, criterion_9(t), &mut failed);
        report(10, criterion_10(t), &mut failed);
    }

    let ckpt = match &trained {
        Some(t) => Ok(t[&(4, 'd')][0].checkpoint.clone()),
        None => run(&ExperimentConfig::smoke(), 0).map(|r| r.checkpoint),
    };
    report(11, ckpt.and_then(|c| criterion_11(&c)), &mut failed);
    report(12, criterion_12(), &mut failed);

    println!("{failed} of 12 criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
