//! End-to-end acceptance suite. Trains the full model grid on a synthetic
//! dataset (cached under the target directory, or `GRLB_ACCEPTANCE_DIR`),
//! then checks each criterion and prints one line per criterion.
//!
//! `GRLB_ACCEPTANCE_STAGE1_STEPS` and `GRLB_ACCEPTANCE_STAGE2_STEPS` override
//! the training budgets; the single-stage baseline gets their sum.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use grlb_core::data::DepthNorm;
use grlb_core::diffusion::{dsm_terms, NoiseDraw, NoiseSchedule, ScheduleConfig, ScoreModel, UNetConfig};
use grlb_core::eval::EvalReport;
use grlb_core::geometry::{depth_flow, flow_loss, masked_mae};
use grlb_core::pipeline::{ablate, lambda_name, remove_objects, AblateConfig, AblationSummary, RemovalOptions, ONESTAGE, UNIDIRECTIONAL};
use grlb_core::scenegen::{gen_dataset, make_pair, random_scene, read_manifest, CorruptMode, GenConfig, Manifest, PairedSample, Split};
use grlb_core::stage1::{self, bt_from_gap, bt_loss_graph, build_batch, remove_geometry, total_loss};
use grlb_core::stage2::{self, build_composite, render_loss, stack_composites, Direction, DirectionBatch};
use grlb_core::train::{load_checkpoint, Checkpoint};
use grlb_core::{DepthMap, Image};
use grlb_tensor::{grad_check, CounterRng, ParamStore, Tensor};

const SEED: u64 = 7;
const PAIRS: usize = 2000;
const RESOLUTION: usize = 32;
const STAGE1_STEPS: usize = 2000;
const STAGE2_STEPS: usize = 6000;
const SAMPLING_STEPS: usize = 50;
const REFERENCE_LAMBDA: f64 = 0.1;

const GRAD_TOLERANCE: f64 = 1e-3;
const GRAD_CONFIGS: usize = 20;
const ALIGNMENT_CALLS: usize = 100;
const FLOW_CASES: usize = 10_000;
const BT_TOLERANCE: f64 = 1e-6;
const MAE_RATIO: f64 = 0.6;
const MIN_RESIDUE_IOU: f64 = 0.3;
const FILL_IN_CASES: usize = 50;
const FILL_IN_FRACTION: f64 = 0.8;
const IMPROVED_FRACTION: f64 = 0.9;
const DETERMINISM_STEPS: usize = 200;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn line(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

fn work_dir() -> PathBuf {
    std::env::var_os("GRLB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn steps_from_env(var: &str, default: usize) -> usize {
    std::env::var(var).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn gen_config(count: usize) -> GenConfig {
    GenConfig {
        count,
        height: RESOLUTION,
        width: RESOLUTION,
        radius: [3.0, 5.0],
        mirror_rows: [4, 8],
        ..GenConfig::default()
    }
}

fn small_scene_config() -> GenConfig {
    GenConfig {
        count: 0,
        height: 16,
        width: 16,
        radius: [3.0, 4.0],
        mirror_rows: [2, 4],
        ..GenConfig::default()
    }
}

fn tiny_unet(out: usize, cond: usize, multipliers: Vec<usize>) -> UNetConfig {
    UNetConfig {
        out_channels: out,
        cond_channels: cond,
        base_width: 8,
        multipliers,
        groups: 4,
        time_features: 8,
        time_dim: 16,
    }
}

fn jittered(cfg: &UNetConfig, seed: u64) -> ParamStore<f64> {
    let mut p = ScoreModel::init(cfg.clone(), seed).unwrap().params.cast::<f64>();
    let mut rng = CounterRng::new(seed ^ 0x5151);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    p
}

fn random_tensor(shape: &[usize], rng: &mut CounterRng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn flows(t: &Tensor<f64>) -> Vec<f64> {
    let [n, _, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let d = t.data();
    let mut out = Vec::new();
    for b in 0..n {
        let at = |i: usize, j: usize| d[b * h * w + i * w + j];
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                out.push(at(i + 1, j) - at(i, j));
                out.push(at(i, j + 1) - at(i, j));
            }
        }
    }
    out
}

/// Random prediction and preference pair, resampled until every signed
/// flow and every flow-magnitude difference exceeds `margin`.
fn kink_free_depths(rng: &mut CounterRng, margin: f64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let shape = [2, 1, 5, 5];
    loop {
        let (x, p, m) = (random_tensor(&shape, rng, 1.0), random_tensor(&shape, rng, 1.0), random_tensor(&shape, rng, 1.0));
        let (fx, fp, fm) = (flows(&x), flows(&p), flows(&m));
        let clear = fx.iter().zip(&fp).zip(&fm).all(|((a, b), c)| {
            a.abs() > margin && (a.abs() - b.abs()).abs() > margin && (a.abs() - c.abs()).abs() > margin
        });
        if clear {
            return (x, p, m);
        }
    }
}

/// Gradient checks on random layer stacks and on the three training
/// objectives with small random denoisers.
fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut record = |name: &str, k: usize, r: grlb_tensor::GradCheckReport| {
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failures.push(format!("{name}#{k} {:.2e} at {:?}", r.max_rel_error, r.worst));
        }
    };
    let step = 1e-4;
    for k in 0..GRAD_CONFIGS {
        let mut rng = CounterRng::new(1000 + k as u64);
        // conv → group norm → silu → +linear(embedding) → conv
        let n = 1 + rng.below(2);
        let cin = 1 + rng.below(3);
        let c = [4, 8][rng.below(2)];
        let groups = [1, 2, 4][rng.below(3)];
        let ks = [1, 3][rng.below(2)];
        let (h, w) = (3 + rng.below(4), 3 + rng.below(4));
        let e = 2 + rng.below(4);
        let mut p = ParamStore::<f64>::new();
        p.insert("c1.w", random_tensor(&[c, cin, ks, ks], &mut rng, 0.5));
        p.insert("c1.b", random_tensor(&[c], &mut rng, 0.1));
        p.insert("gn.g", random_tensor(&[c], &mut rng, 0.2).map(|v| v + 1.0));
        p.insert("gn.b", random_tensor(&[c], &mut rng, 0.1));
        p.insert("l.w", random_tensor(&[c, e], &mut rng, 0.4));
        p.insert("l.b", random_tensor(&[c], &mut rng, 0.1));
        p.insert("c2.w", random_tensor(&[1, c, 3, 3], &mut rng, 0.3));
        let x = random_tensor(&[n, cin, h, w], &mut rng, 1.0);
        let emb = random_tensor(&[n, e], &mut rng, 1.0);
        let target = random_tensor(&[n, 1, h, w], &mut rng, 1.0);
        let r = grad_check(
            &p,
            |g, b| {
                let xv = g.constant(x.clone());
                let ev = g.constant(emb.clone());
                let tv = g.constant(target.clone());
                let y = g.conv2d(xv, b.var("c1.w")?, Some(b.var("c1.b")?))?;
                let y = g.group_norm(y, b.var("gn.g")?, b.var("gn.b")?, groups)?;
                let y = g.silu(y)?;
                let t = g.linear(ev, b.var("l.w")?, Some(b.var("l.b")?))?;
                let y = g.add_per_channel(y, t)?;
                let y = g.conv2d(y, b.var("c2.w")?, None)?;
                g.mse(y, tv)
            },
            64,
            step,
            GRAD_TOLERANCE,
            &mut rng,
        )
        .unwrap();
        record("layers", k, r);

        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let multipliers = if k % 2 == 0 { vec![1, 2] } else { vec![1] };
        let scenes = small_scene_config();
        let pairs: Vec<PairedSample> = (0..2)
            .map(|i| {
                let (scene, target) = random_scene(&scenes, 77 * k as u64 + i);
                make_pair(&scene, target, format!("g{i}")).unwrap()
            })
            .collect();
        let norm = DepthNorm::fit(&pairs);
        let refs: Vec<&PairedSample> = pairs.iter().collect();

        // denoising + preference objective through the depth denoiser
        let cfg1 = tiny_unet(1, stage1::COND_CHANNELS, multipliers.clone());
        let p1 = jittered(&cfg1, k as u64);
        let batch = build_batch::<f64>(&refs, &norm).unwrap();
        let draw = NoiseDraw::draw(&schedule, batch.x0_plus.shape(), &mut rng);
        let r = grad_check(&p1, |g, b| Ok(dsm_terms(&cfg1, g, b, &batch.x0_plus, &batch.cond, &draw, &schedule).unwrap().loss), 64, step, GRAD_TOLERANCE, &mut rng).unwrap();
        record("dsm", k, r);
        let r = grad_check(&p1, |g, b| Ok(total_loss(&cfg1, g, b, &batch, &draw, &schedule, &norm, 0.5).unwrap().total), 64, step, GRAD_TOLERANCE, &mut rng).unwrap();
        record("dsm+bt", k, r);

        // preference term alone, w.r.t. the predicted depth, at a point
        // where every absolute value in the flow loss is away from its kink
        let (x, plus, minus) = kink_free_depths(&mut rng, 10.0 * step);
        let mut px = ParamStore::<f64>::new();
        px.insert("x", x);
        let r = grad_check(
            &px,
            |g, b| {
                let pv = g.constant(plus.clone());
                let mv = g.constant(minus.clone());
                Ok(bt_loss_graph(g, b.var("x")?, pv, mv, &[true, true]).unwrap())
            },
            64,
            step,
            GRAD_TOLERANCE,
            &mut rng,
        )
        .unwrap();
        record("bt", k, r);

        // bidirectional rendering objective
        let cfg2 = tiny_unet(stage2::TARGET_CHANNELS, stage2::COND_CHANNELS, multipliers);
        let p2 = jittered(&cfg2, 100 + k as u64);
        let stack = |d: Direction| {
            let items: Vec<_> = pairs.iter().map(|s| build_composite(s, d, &norm)).collect();
            stack_composites::<f64>(&items).unwrap()
        };
        let ((rc, rt), (ic, it)) = (stack(Direction::Removal), stack(Direction::Insertion));
        let rd = NoiseDraw::draw(&schedule, rt.shape(), &mut rng);
        let id = NoiseDraw::draw(&schedule, it.shape(), &mut rng);
        let r = grad_check(
            &p2,
            |g, b| {
                let rem = DirectionBatch { cond: &rc, target: &rt, draw: &rd };
                let ins = DirectionBatch { cond: &ic, target: &it, draw: &id };
                Ok(render_loss(&cfg2, g, b, rem, Some(ins), &schedule).unwrap().total)
            },
            64,
            step,
            GRAD_TOLERANCE,
            &mut rng,
        )
        .unwrap();
        record("render", k, r);
    }
    let detail = format!("{} configurations x 5 objectives, max relative error {worst:.2e} (limit {GRAD_TOLERANCE:.0e})", GRAD_CONFIGS);
    if failures.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; failing: {}", failures.join(", ")))
    }
}

fn mask_alignment(manifest: &Manifest, stage1: &Checkpoint) -> Outcome {
    let samples = manifest.load_split(Split::Val).unwrap();
    let mut rng = CounterRng::new(SEED);
    let mut violations = 0usize;
    let mut pixels = 0usize;
    for _ in 0..ALIGNMENT_CALLS {
        let s = &samples[rng.below(samples.len())];
        let steps = 1 + rng.below(20);
        let out = remove_geometry(stage1, &s.x0_minus, &s.mask, steps, rng.next_u64()).unwrap();
        let (h, w) = out.dims();
        for i in 0..h {
            for j in 0..w {
                if !s.mask.get(i, j) {
                    pixels += 1;
                    violations += (out.get(i, j).to_bits() != s.x0_minus.get(i, j).to_bits()) as usize;
                }
            }
        }
    }
    outcome(violations == 0, format!("{ALIGNMENT_CALLS} removals, {pixels} unmasked pixels, {violations} violations"))
}

fn dyadic_depth(rng: &mut CounterRng, h: usize, w: usize) -> DepthMap {
    DepthMap::new(h, w, (0..h * w).map(|_| rng.below(128) as f32 / 256.0).collect()).unwrap()
}

fn equal_flows(a: &DepthMap, b: &DepthMap) -> bool {
    let (fa, fb) = (depth_flow(a).unwrap(), depth_flow(b).unwrap());
    let (h, w) = a.dims();
    (0..h - 1).all(|i| (0..w - 1).all(|j| fa.vertical_at(i, j) == fb.vertical_at(i, j) && fa.horizontal_at(i, j) == fb.horizontal_at(i, j)))
}

fn flow_algebra() -> Outcome {
    let mut rng = CounterRng::new(SEED);
    let mut violations = [0usize; 4];
    for case in 0..FLOW_CASES {
        let (h, w) = (2 + rng.below(7), 2 + rng.below(7));
        let (a, b, c) = (dyadic_depth(&mut rng, h, w), dyadic_depth(&mut rng, h, w), dyadic_depth(&mut rng, h, w));
        let ab = flow_loss(&a, &b).unwrap();
        violations[0] += (ab < 0.0) as usize;
        violations[1] += (ab != flow_loss(&b, &a).unwrap()) as usize;
        violations[2] += (ab > flow_loss(&a, &c).unwrap() + flow_loss(&c, &b).unwrap() + 1e-12) as usize;
        // zero iff equal flows, probed with both a random pair and a pair
        // that differs by a global offset or reflection
        let k = rng.below(128) as f32 / 256.0;
        let twin = if case % 2 == 0 {
            DepthMap::new(h, w, a.data().iter().map(|v| v + k).collect()).unwrap()
        } else {
            DepthMap::new(h, w, a.data().iter().map(|v| 0.75 - v).collect()).unwrap()
        };
        let zero_twin = flow_loss(&a, &twin).unwrap() == 0.0;
        violations[3] += (zero_twin != equal_flows(&a, &twin) || !zero_twin) as usize;
        violations[3] += ((ab == 0.0) != equal_flows(&a, &b)) as usize;
    }
    let total: usize = violations.iter().sum();
    outcome(
        total == 0,
        format!(
            "{FLOW_CASES} cases each: negativity {}, asymmetry {}, triangle {}, zero-iff-equal-flow {}",
            violations[0], violations[1], violations[2], violations[3]
        ),
    )
}

fn bt_calibration() -> Outcome {
    let at_zero = bt_from_gap(0.0);
    let zero_ok = (at_zero - std::f64::consts::LN_2).abs() <= BT_TOLERANCE;
    let grid: Vec<f64> = (0..=1000).map(|i| -5.0 + i as f64 * 0.01).collect();
    let non_monotone = grid.windows(2).filter(|p| bt_from_gap(p[1]) >= bt_from_gap(p[0])).count();
    outcome(zero_ok && non_monotone == 0, format!("loss(0) = {at_zero:.9} (ln 2 = {:.9}); {non_monotone} non-decreasing steps on [-5, 5]", std::f64::consts::LN_2))
}

fn input_mae(manifest: &Manifest, limit: Option<usize>) -> f64 {
    let mut entries: Vec<_> = manifest.split(Split::Val).collect();
    if let Some(n) = limit {
        entries.truncate(n);
    }
    let sum: f64 = entries
        .iter()
        .map(|e| {
            let s = manifest.load_sample(e).unwrap();
            masked_mae(&s.x0_minus, &s.x0_plus, &s.mask).unwrap()
        })
        .sum();
    sum / entries.len() as f64
}

fn report(summary: &AblationSummary, name: &str) -> EvalReport {
    let row = summary.row(name).unwrap_or_else(|| panic!("ablation has no {name} row"));
    grlb_core::io::read_json(&row.report).unwrap()
}

fn masked_image_mae(a: &Image, b: &Image, mask: &grlb_core::Mask) -> f64 {
    let (h, w) = a.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..h {
        for j in 0..w {
            if mask.get(i, j) {
                let (p, q) = (a.pixel(i, j), b.pixel(i, j));
                sum += (0..3).map(|c| (p[c] - q[c]).abs() as f64).sum::<f64>();
                n += 3;
            }
        }
    }
    sum / n.max(1) as f64
}

fn fill_in_remedy(manifest: &Manifest, stage1: &Checkpoint, stage2: &Checkpoint) -> Outcome {
    let samples: Vec<PairedSample> = manifest.split(Split::Val).take(FILL_IN_CASES).map(|e| manifest.load_sample(e).unwrap()).collect();
    let inputs: Vec<_> = samples.iter().map(|s| (&s.i_minus, &s.x0_minus, &s.mask)).collect();
    let seeds: Vec<u64> = (0..samples.len() as u64).map(|k| SEED + k).collect();
    let base = RemovalOptions {
        steps: SAMPLING_STEPS,
        seed: SEED,
        simulate_failure: Some(CorruptMode::FlattenToInput),
        ..RemovalOptions::default()
    };
    let without = remove_objects(stage1, stage2, &inputs, &RemovalOptions { fill_in: false, ..base.clone() }, &seeds).unwrap();
    let with = remove_objects(stage1, stage2, &inputs, &RemovalOptions { fill_in: true, ..base }, &seeds).unwrap();
    let mut improved = 0usize;
    for ((s, a), b) in samples.iter().zip(&with).zip(&without) {
        improved += (masked_image_mae(&a.image, &s.i_plus, &s.mask) < masked_image_mae(&b.image, &s.i_plus, &s.mask)) as usize;
    }
    let frac = improved as f64 / samples.len() as f64;
    outcome(frac >= FILL_IN_FRACTION, format!("{improved}/{} cases improved with fill-in ({frac:.3}, need >= {FILL_IN_FRACTION})", samples.len()))
}

fn grlb(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_grlb")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tree(dir: &Path, out: &mut Vec<(String, Vec<u8>)>, root: &Path) {
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            tree(&path, out, root);
        } else {
            out.push((path.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.json");
    std::fs::write(&gen, serde_json::to_vec(&gen_config(64)).unwrap()).unwrap();
    let s1 = dir.path().join("s1.json");
    std::fs::write(&s1, format!(r#"{{"train": {{"steps": {DETERMINISM_STEPS}, "checkpoint_every": 100}}, "validation": {{"every": 100, "samples": 4, "steps": 5}}}}"#)).unwrap();
    let s2 = dir.path().join("s2.json");
    std::fs::write(&s2, r#"{"train": {"steps": 20, "checkpoint_every": 10}}"#).unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let run = |name: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let root = dir.path().join(name);
        let data = root.join("data");
        let manifest = data.join("manifest.json");
        let mut commands = vec![
            vec!["gen-data".to_string(), "--config".into(), p(&gen), "--out".into(), p(&data), "--seed".into(), SEED.to_string()],
            vec!["train-stage1".into(), "--manifest".into(), p(&manifest), "--config".into(), p(&s1), "--out".into(), p(&root.join("stage1"))],
            vec!["train-stage2".into(), "--manifest".into(), p(&manifest), "--config".into(), p(&s2), "--out".into(), p(&root.join("stage2"))],
        ];
        for (k, args) in commands.drain(..).enumerate() {
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            let o = grlb(&refs);
            if !o.status.success() {
                return Err(format!("step {k}: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
        let m = read_manifest(&manifest).map_err(|e| e.to_string())?;
        let e = m.split(Split::Val).next().ok_or("no validation sample")?;
        let o = grlb(&[
            "remove",
            "--image",
            &p(&m.root.join(&e.files.i_minus)),
            "--depth",
            &p(&m.root.join(&e.files.x_minus)),
            "--mask",
            &p(&m.root.join(&e.files.mask)),
            "--stage1",
            &p(&root.join("stage1")),
            "--stage2",
            &p(&root.join("stage2")),
            "--steps",
            "10",
            "--seed",
            "3",
            "--fill-in",
            "--out",
            &p(&root.join("removed.png")),
            "--depth-out",
            &p(&root.join("removed_depth.png")),
        ]);
        if !o.status.success() {
            return Err(format!("remove: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let mut files = Vec::new();
        tree(&root, &mut files, &root);
        files.sort();
        Ok(files)
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let names_match = a.iter().map(|f| &f.0).eq(b.iter().map(|f| &f.0));
            let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
            outcome(
                names_match && differing.is_empty(),
                format!("gen-data, {DETERMINISM_STEPS}-step train-stage1 and remove twice: {} files compared, {} differ {:?}", a.len(), differing.len(), &differing[..differing.len().min(5)]),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("command failed: {e}")),
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let dir = work_dir();
    let s1_steps = steps_from_env("GRLB_ACCEPTANCE_STAGE1_STEPS", STAGE1_STEPS);
    let s2_steps = steps_from_env("GRLB_ACCEPTANCE_STAGE2_STEPS", STAGE2_STEPS);
    line(&format!(
        "acceptance: {PAIRS} pairs at {RESOLUTION}x{RESOLUTION}, seed {SEED}, {s1_steps} geometry / {s2_steps} rendering steps, work dir {}",
        dir.display()
    ));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let report_line = |n: usize, name: &'static str, o: Outcome, results: &mut Vec<(usize, &str, Outcome)>| {
        line(&format!("criterion {n:>2} [{}] {name}: {} ({:.0?} elapsed)", if o.passed { "PASS" } else { "FAIL" }, o.detail, started.elapsed()));
        results.push((n, name, o));
    };

    report_line(1, "gradient correctness", gradients(), &mut results);
    report_line(3, "flow-loss algebra", flow_algebra(), &mut results);
    report_line(4, "preference-loss calibration", bt_calibration(), &mut results);
    report_line(12, "determinism", determinism(), &mut results);

    let data = dir.join(format!("data-{RESOLUTION}-{PAIRS}-{SEED}"));
    let manifest_path = data.join("manifest.json");
    if !manifest_path.exists() {
        gen_dataset(&gen_config(PAIRS), SEED, &data).unwrap();
    }
    let manifest = read_manifest(&manifest_path).unwrap();
    let mut cfg = AblateConfig {
        lambdas: vec![0.0, REFERENCE_LAMBDA],
        reference_lambda: REFERENCE_LAMBDA,
        ..AblateConfig::default()
    };
    cfg.stage1.train.steps = s1_steps;
    cfg.stage1.train.seed = SEED;
    cfg.stage2.train.steps = s2_steps;
    cfg.stage2.train.seed = SEED;
    cfg.removal.steps = SAMPLING_STEPS;
    cfg.removal.seed = SEED;
    let grid = dir.join(format!("ablation-{s1_steps}-{s2_steps}"));
    let summary = ablate(&manifest, &cfg, &grid).unwrap();
    line(&format!("ablation finished ({:.0?} elapsed)", started.elapsed()));
    let models = grid.join("models");
    let stage1 = load_checkpoint(&models.join(format!("stage1-lambda-{REFERENCE_LAMBDA}"))).unwrap();
    let stage2 = load_checkpoint(&models.join("stage2")).unwrap();

    report_line(2, "mask alignment", mask_alignment(&manifest, &stage1), &mut results);

    let dpo = report(&summary, &lambda_name(REFERENCE_LAMBDA));
    let plain = report(&summary, &lambda_name(0.0));
    let uni = report(&summary, UNIDIRECTIONAL);
    let one = report(&summary, ONESTAGE);
    let input = input_mae(&manifest, cfg.max_samples);
    let (m_dpo, m_plain) = (dpo.aggregate.masked_mae.unwrap(), plain.aggregate.masked_mae.unwrap());
    report_line(
        5,
        "preference ablation direction",
        outcome(
            m_dpo <= m_plain && m_plain <= input && m_dpo <= MAE_RATIO * input,
            format!("masked MAE lambda=0.1 {m_dpo:.5} <= lambda=0 {m_plain:.5} <= input {input:.5}; ratio {:.3} (limit {MAE_RATIO})", m_dpo / input),
        ),
        &mut results,
    );
    let (i_dpo, i_plain) = (dpo.aggregate.insertion_rate.unwrap_or(0.0), plain.aggregate.insertion_rate.unwrap_or(0.0));
    report_line(6, "insertion direction", outcome(i_dpo <= i_plain, format!("insertion rate lambda=0.1 {i_dpo:.4} <= lambda=0 {i_plain:.4}")), &mut results);
    report_line(
        7,
        "two-stage vs one-stage",
        outcome(dpo.aggregate.psnr > one.aggregate.psnr, format!("PSNR {:.3} dB > {:.3} dB", dpo.aggregate.psnr, one.aggregate.psnr)),
        &mut results,
    );
    report_line(
        8,
        "bidirectional vs unidirectional",
        outcome(dpo.aggregate.psnr >= uni.aggregate.psnr, format!("PSNR {:.3} dB >= {:.3} dB", dpo.aggregate.psnr, uni.aggregate.psnr)),
        &mut results,
    );
    let (r_two, r_one) = (dpo.aggregate.residue_iou.unwrap_or(0.0), one.aggregate.residue_iou.unwrap_or(0.0));
    let with_artifacts = dpo.samples.iter().filter(|s| s.residue_iou.is_some()).count();
    report_line(
        9,
        "causal-artifact removal",
        outcome(r_two >= MIN_RESIDUE_IOU && r_two > r_one, format!("residue IoU {r_two:.4} (>= {MIN_RESIDUE_IOU}) > one-stage {r_one:.4} over {with_artifacts} samples")),
        &mut results,
    );
    report_line(10, "fill-in remedy", fill_in_remedy(&manifest, &stage1, &stage2), &mut results);
    let improved = dpo.aggregate.psnr_improved;
    report_line(
        11,
        "end-to-end improvement",
        outcome(improved >= IMPROVED_FRACTION, format!("{:.1}% of {} samples beat the input PSNR (need {:.0}%)", 100.0 * improved, dpo.aggregate.count, 100.0 * IMPROVED_FRACTION)),
        &mut results,
    );

    results.sort_by_key(|r| r.0);
    line("acceptance summary:");
    for (n, name, o) in &results {
        line(&format!("  {n:>2} {:<34} {}", name, if o.passed { "PASS" } else { "FAIL" }));
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    line(&format!("{} of {} criteria passed in {:.0?}", results.len() - failed, results.len(), started.elapsed()));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
