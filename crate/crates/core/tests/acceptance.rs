//! Acceptance run: one PASS/FAIL line per criterion, then a non-zero exit if
//! any gating criterion failed. Informative criteria report but never fail.

mod common;

use std::time::{Duration, Instant};

use depthforge::data::synth::{generate_scene, SceneSpec};
use depthforge::data::Triplet;
use depthforge::evaluation::{challenge_union, compute_metrics, evaluate_run, hardest_k, EvalOptions};
use depthforge::geometry::{synthesize_view, DepthMap, PoseSE3};
use depthforge::losses::{photometric_loss, LossConfig};
use depthforge::network::{count_parameters, AttentionMode, EncoderConfig, Model, ModelConfig};
use depthforge::trainer::{train, StepLog, TrainConfig, Trainer};
use depthforge::{no_grad, Result, Tensor};
use rand::Rng;

use common::grad_cases::{self, COORDS, TOLERANCE};
use common::{rng, uniform};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Toy training set: 200 triplets at 96x32 plus 20 held out.
const TOY_W: usize = 96;
const TOY_H: usize = 32;
const TOY_TRAIN: usize = 200;
const TOY_HELD_OUT: usize = 20;

fn toy_scene() -> SceneSpec {
    SceneSpec::default()
}

fn toy_train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        phase1_epochs: epochs * 7 / 10,
        lr_phase1: 1e-3,
        lr_phase2: 1e-4,
        seed,
        ..TrainConfig::toy()
    }
}

fn mean_total(log: &[StepLog]) -> f64 {
    log.iter().map(|s| s.total).sum::<f64>() / log.len() as f64
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = (0.0f64, "");
    for (name, case) in grad_cases::ALL {
        let report = case()?;
        if report.coords < 200 || !(report.worst < TOLERANCE) {
            failures.push(format!("{name} {:.2e}", report.worst));
        }
        if report.worst > worst.0 {
            worst = (report.worst, name);
        }
    }
    let elapsed = start.elapsed();
    let fast = elapsed < Duration::from_secs(300);
    outcome(
        failures.is_empty() && fast,
        format!(
            "{} operations x {COORDS} coordinates, worst rel err {:.2e} ({}), {:.1}s{}",
            grad_cases::ALL.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

/// Mean over pixels of the per-pixel minimum photometric error across the
/// two source frames, each pixel using only sources that cover it.
fn closed_loop_error(t: &Triplet, poses: [PoseSE3; 2]) -> Result<f64> {
    let (w, h) = t.size();
    let cfg = LossConfig::default();
    let target = t.frames[1].reshape(&[1, 3, h, w])?;
    let depth = DepthMap::new(t.gt_depth.as_ref().expect("synthetic depth").reshape(&[1, 1, h, w])?)?;
    let mut best = vec![f64::INFINITY; h * w];
    for (src, pose) in [&t.frames[0], &t.frames[2]].into_iter().zip(poses) {
        let src = src.reshape(&[1, 3, h, w])?;
        let (warped, valid) = synthesize_view(&src, &depth, &PoseSE3::stack::<f32>(&[pose])?, &t.intrinsics)?;
        let loss = photometric_loss(&target, &warped, &cfg)?.to_vec();
        for ((b, l), v) in best.iter_mut().zip(loss).zip(valid.to_vec()) {
            if v > 0.0 {
                *b = b.min(f64::from(l));
            }
        }
    }
    let covered: Vec<f64> = best.into_iter().filter(|b| b.is_finite()).collect();
    Ok(covered.iter().sum::<f64>() / covered.len().max(1) as f64)
}

fn closed_loop() -> Result<Outcome> {
    let triplets = generate_scene(&SceneSpec { seed: 11, ..toy_scene() }, TOY_W, TOY_H, 20)?;
    let mut r = rng(2024);
    let (mut worst_gt, mut weakest_ratio) = (0.0f64, f64::INFINITY);
    for t in &triplets {
        let gt = t.gt_poses.expect("synthetic poses");
        let at_gt = closed_loop_error(t, gt)?;
        let perturbed = gt.map(|p| {
            let mut v = p.to_vector();
            for (i, c) in v.iter_mut().enumerate() {
                *c += if i < 3 { r.gen_range(-0.05..0.05) } else { r.gen_range(-0.25..0.25) };
            }
            PoseSE3::from_vector(&v).expect("six components")
        });
        let off = closed_loop_error(t, perturbed)?;
        worst_gt = worst_gt.max(at_gt);
        weakest_ratio = weakest_ratio.min(off / at_gt.max(1e-3));
    }
    outcome(
        worst_gt < 1e-3 && weakest_ratio > 10.0,
        format!("20 triplets, worst loss at ground truth {worst_gt:.2e}, perturbed/threshold ratio >= {weakest_ratio:.1}"),
    )
}

fn stack_arithmetic() -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut pass = true;
    for (c1, cfg) in [(4, ModelConfig::toy(64, 64)), (18, ModelConfig::full(64, 64))] {
        let enc: &EncoderConfig = &cfg.encoder;
        let expected: Vec<usize> = (1..=4usize).map(|r| (c1 << (r - 1)) * (4 - r + 1)).collect();
        let declared: Vec<usize> = (1..=enc.streams).map(|r| enc.stack_channels(r, true)).collect();
        let model = Model::<f32>::new(&cfg)?;
        let image = Tensor::<f32>::from_vec(&[1, 3, 64, 64], uniform(&mut rng(c1 as u64), 3 * 64 * 64, 0.0, 1.0).iter().map(|&v| v as f32).collect())?;
        let built: Vec<usize> = no_grad(|| model.depth.features(&image))?.streams.iter().map(|s| s.shape()[1]).collect();
        pass &= enc.base_channels == c1 && declared == expected && built == expected;
        lines.push(format!("C1={c1}: {built:?}"));
    }
    pass &= ModelConfig::full(64, 64).encoder.streams == 4
        && (1..=4).map(|r| ModelConfig::full(64, 64).encoder.stack_channels(r, true)).collect::<Vec<_>>() == [72, 108, 144, 144];
    outcome(pass, lines.join(", "))
}

fn toy_convergence() -> Result<Outcome> {
    let start = Instant::now();
    let all = generate_scene(&toy_scene(), TOY_W, TOY_H, TOY_TRAIN + TOY_HELD_OUT)?;
    let (train_set, held_out) = all.split_at(TOY_TRAIN);
    let cfg = toy_train_config(0, 40);
    let mut trainer = Trainer::new(Model::new(&ModelConfig::toy(TOY_W, TOY_H))?, cfg)?;
    let log = train(&mut trainer, train_set, None)?.log;
    let first = mean_total(&log[..10]);
    let last = mean_total(&log[log.len() - 10..]);
    let indices: Vec<usize> = (TOY_TRAIN..TOY_TRAIN + TOY_HELD_OUT).collect();
    let eval = evaluate_run(&trainer.model, held_out, &indices, &EvalOptions::default())?;
    let elapsed = start.elapsed();
    let ratio = first / last;
    outcome(
        log.len() <= 2000 && ratio >= 5.0 && eval.spearman >= 0.8 && elapsed < Duration::from_secs(1800),
        format!(
            "{} steps, loss {first:.5} -> {last:.5} ({ratio:.2}x), held-out spearman {:.3}, abs_rel {:.3}, {:.0}s",
            log.len(),
            eval.spearman,
            eval.mean.abs_rel,
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation() -> Result<Outcome> {
    let all = generate_scene(&SceneSpec { seed: 5, ..toy_scene() }, TOY_W, TOY_H, 100 + TOY_HELD_OUT)?;
    let (train_set, held_out) = all.split_at(100);
    let indices: Vec<usize> = (0..TOY_HELD_OUT).collect();
    let run = |fusion: bool, attention: AttentionMode, seed: u64| -> Result<f64> {
        let mut cfg = ModelConfig::toy(TOY_W, TOY_H);
        cfg.decoder.fusion = fusion;
        cfg.decoder.attention = attention;
        cfg.seed = seed;
        let mut trainer = Trainer::new(Model::new(&cfg)?, toy_train_config(seed, 10))?;
        train(&mut trainer, train_set, None)?;
        Ok(evaluate_run(&trainer.model, held_out, &indices, &EvalOptions::default())?.mean.abs_rel)
    };
    let (mut full, mut base) = (0.0, 0.0);
    for seed in 0..3 {
        full += run(true, AttentionMode::Channel, seed)? / 3.0;
        base += run(false, AttentionMode::None, seed)? / 3.0;
    }
    outcome(full <= base, format!("mean held-out abs_rel over 3 seeds: fusion+channel {full:.4}, baseline {base:.4}"))
}

/// Straight-line evaluation protocol used as the metric oracle.
fn reference_metrics(pred: &[f32], gt: &[f32], opts: &EvalOptions) -> Option<[f64; 7]> {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.len() {
        let gi = gt[i] as f64;
        if gi > opts.floor && gi <= opts.cap {
            p.push(pred[i] as f64);
            g.push(gi);
        }
    }
    if g.is_empty() {
        return None;
    }
    let med = |v: &Vec<f64>| {
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        }
    };
    let scale = med(&g) / med(&p);
    let mut sums = [0.0f64; 7];
    for i in 0..g.len() {
        let a = (p[i] * scale).max(opts.floor).min(opts.cap);
        let b = g[i];
        sums[0] += (a - b).abs() / b;
        sums[1] += (a - b) * (a - b) / b;
        sums[2] += (a - b) * (a - b);
        sums[3] += (a.ln() - b.ln()) * (a.ln() - b.ln());
        let ratio = if a / b > b / a { a / b } else { b / a };
        for k in 0..3 {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                sums[4 + k] += 1.0;
            }
        }
    }
    let n = g.len() as f64;
    let mut out = sums.map(|s| s / n);
    out[2] = out[2].sqrt();
    out[3] = out[3].sqrt();
    Some(out)
}

fn metric_oracle() -> Result<Outcome> {
    let opts = EvalOptions::default();
    let mut r = rng(606);
    let (mut worst, mut checked, mut violations) = (0.0f64, 0, 0);
    while checked < 100 {
        let (w, h) = (r.gen_range(3..40), r.gen_range(3..40));
        let gt: Vec<f32> = (0..w * h)
            .map(|_| if r.gen_bool(0.4) { 0.0 } else { r.gen_range(0.5..100.0) })
            .collect();
        let pred: Vec<f32> = (0..w * h).map(|_| r.gen_range(0.05..60.0)).collect();
        let Some(want) = reference_metrics(&pred, &gt, &opts) else { continue };
        let got = compute_metrics(&pred, &gt, w, h, &opts)?;
        for (a, b) in got.to_array().iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
        // A power-of-two scale is exact in f32 and must change nothing; any
        // other scale only perturbs predictions by their f32 rounding.
        let exact = 2f32.powi(r.gen_range(-3..4));
        let k: f32 = r.gen_range(0.1..10.0);
        let scaled = |k: f32| -> Result<[f64; 7]> {
            let p: Vec<f32> = pred.iter().map(|v| v * k).collect();
            Ok(compute_metrics(&p, &gt, w, h, &opts)?.to_array())
        };
        let base = got.to_array();
        let invariant = scaled(exact)? == base
            && base.iter().zip(scaled(k)?).all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1.0));
        let monotone = got.delta1 <= got.delta2 && got.delta2 <= got.delta3;
        violations += usize::from(!(invariant && monotone));
        checked += 1;
    }
    outcome(
        worst < 1e-10 && violations == 0,
        format!("{checked} instances, max deviation from scalar reference {worst:.1e}, {violations} invariance/monotonicity violations"),
    )
}

fn hard_set() -> Result<Outcome> {
    let common_set = [374, 394, 395];
    let extras: [[usize; 7]; 4] = [
        [68, 73, 106, 260, 330, 388, 549],
        [68, 73, 12, 45, 151, 203, 611],
        [106, 260, 12, 288, 417, 502, 650],
        [330, 45, 288, 96, 475, 688, 21],
    ];
    // Each method's error table over the 697-image split makes its designed
    // ten images the hardest.
    let mut lists = Vec::new();
    for (m, extra) in extras.iter().enumerate() {
        let hard: Vec<usize> = common_set.iter().chain(extra).copied().collect();
        let mut r = rng(70 + m as u64);
        let errors: Vec<(usize, f64)> = (0..697)
            .map(|i| (i, if hard.contains(&i) { r.gen_range(1.0..2.0) } else { r.gen_range(0.0..0.9) }))
            .collect();
        let top = hardest_k(&errors, 10)?;
        let mut sorted = top.clone();
        sorted.sort_unstable();
        let mut want = hard.clone();
        want.sort_unstable();
        if sorted != want {
            return outcome(false, format!("method {m} top-10 {sorted:?} differs from its design"));
        }
        lists.push(top);
    }
    let report = challenge_union(&lists);
    outcome(
        report.union.len() == 23 && report.common == common_set,
        format!("union of {} images, common {:?}", report.union.len(), report.common),
    )
}

fn determinism() -> Result<Outcome> {
    let set = generate_scene(&toy_scene(), 64, 32, 6)?;
    let cfg = TrainConfig { epochs: 2, phase1_epochs: 1, batch_size: 2, lr_phase1: 1e-3, lr_phase2: 1e-4, ..TrainConfig::toy() };
    let run = || -> Result<(Trainer, String)> {
        let mut t = Trainer::new(Model::new(&ModelConfig::toy(64, 32))?, cfg.clone())?;
        let log = train(&mut t, &set, None)?.log;
        let json = log.iter().map(|s| serde_json::to_string(s).expect("log serializes")).collect();
        Ok((t, json))
    };
    let ((a, log_a), (_, log_b)) = (run()?, run()?);
    let logs_equal = log_a == log_b;

    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("model.dft");
    a.save(&path)?;
    let (back, _, _) = Model::<f32>::load(&path)?;
    let image = set[0].frames[1].reshape(&[1, 3, 32, 64])?;
    let outputs = |m: &Model<f32>| -> Result<Vec<Vec<f32>>> {
        no_grad(|| {
            let mut v: Vec<Vec<f32>> = m.depth.forward(&image)?.iter().map(Tensor::to_vec).collect();
            v.push(m.pose.forward(&image, &image)?.to_vec());
            Ok(v)
        })
    };
    let bitwise = outputs(&a.model)? == outputs(&back)?;
    outcome(logs_equal && bitwise, format!("identical logs: {logs_equal}, bitwise checkpoint forward: {bitwise}"))
}

fn parameter_count() -> Result<Outcome> {
    let model = Model::<f32>::new(&ModelConfig::full(640, 192))?;
    let n = count_parameters(model.depth_parameters());
    let rel = n as f64 / 10.8e6 - 1.0;
    outcome(rel.abs() <= 0.2, format!("{n} depth parameters, {:+.1}% from 10.8M", 100.0 * rel))
}

fn main() {
    let criteria: [(usize, &str, bool, fn() -> Result<Outcome>); 9] = [
        (1, "gradient suite", true, gradient_suite),
        (2, "closed-loop photometric", true, closed_loop),
        (3, "stack channel arithmetic", true, stack_arithmetic),
        (4, "toy convergence", true, toy_convergence),
        (5, "ablation direction (informative)", false, ablation),
        (6, "metric oracle", true, metric_oracle),
        (7, "hard-set protocol", true, hard_set),
        (8, "determinism and persistence", true, determinism),
        (9, "parameter count", true, parameter_count),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = Vec::new();
    for (id, name, gating, check) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if gating && !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("gating criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
