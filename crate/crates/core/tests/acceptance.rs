//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion. Runs
//! without the libtest harness so the lines are always visible.
//!
//! Exact-oracle failures make the exit code non-zero. The two training
//! outcomes (benchmark, ablations) only do under `NCDL_ACCEPTANCE_STRICT=1`.
//! `NCDL_ACCEPTANCE_QUICK=1` skips them.

use std::collections::BTreeMap;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use itertools::Itertools;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ncdl::config::ExperimentConfig;
use ncdl::data::{AreaGroup, BBox, Detection, DetectionSet, GroundTruthSet, GtObject};
use ncdl::evalkit::{evaluate_map, hungarian};
use ncdl::experiment::{run_synthetic, SyntheticRun};
use ncdl::heads::{HeadParameters, NovelHead};
use ncdl::priors::{lognormal_prior, PriorKind};
use ncdl::pseudolabel::{sinkhorn_labels, LabelerKind, SinkhornConfig};
use ncdl::trainer::{discovery_loss, pseudo_targets, Batch, DiscoveryConfig, PseudoTargets};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- gradients

fn gradient_instance(seed: u64) -> (HeadParameters, Batch, [Array2<f64>; 2]) {
    let (f, k, n, b, m) = (16, 3, 5, 8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r, c, s: f64| Array2::from_shape_fn((r, c), |_| s * rng.sample::<f64, _>(StandardNormal));
    let known_weights = normal(k, f, 0.3);
    let view1 = normal(b, f, 1.0);
    let view2 = &view1 + &normal(b, f, 0.1);
    let memory = [normal(m, f, 1.0), normal(m, f, 1.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let params = HeadParameters {
        known_weights,
        novel_heads: vec![NovelHead::init(f, &[12], 6, true, n, 0.5, &mut rng)],
    };
    let gt = vec![Some(0), None, Some(2), None, Some(1), None, None, Some(0)];
    (params, Batch { view1, view2, gt }, memory)
}

fn loss_only(params: &HeadParameters, batch: &Batch, targets: Option<&PseudoTargets>, alpha: f64) -> f64 {
    discovery_loss(params, batch, targets, alpha, true).unwrap().0.total
}

/// Largest per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
fn gradient_error(params: &HeadParameters, batch: &Batch, targets: Option<&PseudoTargets>, alpha: f64) -> f64 {
    let (_, grads) = discovery_loss(params, batch, targets, alpha, true).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        let len = analytic[t].len();
        let mut numeric = vec![0.0; len];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = probe.tensors_mut()[t].1[i];
            probe.tensors_mut()[t].1[i] = orig + h;
            let up = loss_only(&probe, batch, targets, alpha);
            probe.tensors_mut()[t].1[i] = orig - h;
            let down = loss_only(&probe, batch, targets, alpha);
            probe.tensors_mut()[t].1[i] = orig;
            *num = (up - down) / (2.0 * h);
        }
        let diff = analytic[t].iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&analytic[t]).max(norm(&numeric));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (params, batch, memory) = gradient_instance(7);
    let cfg = DiscoveryConfig {
        num_novel: 5,
        ..DiscoveryConfig::default()
    };
    let targets = pseudo_targets(&params, &batch, [&memory[0], &memory[1]], &cfg, 0).unwrap();
    let ss = gradient_error(&params, &batch, Some(&targets), 0.0);
    let cls = gradient_error(&params, &batch, None, 1.0);
    let both = gradient_error(&params, &batch, Some(&targets), 0.5);
    let t = start.elapsed();
    let pass = ss < 1e-4 && cls < 1e-4 && both < 1e-4 && t < Duration::from_secs(10);
    report(
        "gradient correctness",
        pass,
        format!("rel err L_ss {ss:.2e}, L_cls {cls:.2e}, combined {both:.2e} (< 1e-4); {:.2}s (< 10s)", secs(t)),
    )
}

// ---------------------------------------------------------------- sinkhorn

fn sinkhorn_check() -> Outcome {
    let start = Instant::now();
    let (rows, cols) = (2048, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.5..0.5));
    let prior = lognormal_prior(cols, rows as f64, 1.0, 0.5).unwrap();
    let cfg = SinkhornConfig {
        num_iters: 50,
        ..SinkhornConfig::default()
    };
    let q = sinkhorn_labels(logits.view(), &prior, &cfg).unwrap();
    let t = start.elapsed();
    let col_err = q
        .sum_axis(Axis(0))
        .iter()
        .zip(&prior.masses)
        .map(|(s, m)| (s - m).abs() / m)
        .fold(0.0, f64::max);
    let row_err = q.sum_axis(Axis(1)).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let shifted = sinkhorn_labels((&logits + 123.25).view(), &prior, &cfg).unwrap();
    let shift_err = (&q - &shifted).iter().map(|d| d.abs()).fold(0.0, f64::max);
    let pass = col_err < 1e-3 && row_err < 1e-6 && shift_err < 1e-9 && t < Duration::from_secs(5);
    report(
        "sinkhorn constraints",
        pass,
        format!(
            "column rel err {col_err:.2e} (< 1e-3), row err {row_err:.2e} (< 1e-6), shift diff {shift_err:.2e} (< 1e-9); {:.2}s (< 5s)",
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- hungarian

fn hungarian_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..100 {
        // Integer-valued costs keep every sum exact.
        let cost = Array2::from_shape_fn((6, 6), |_| f64::from(rng.random_range(0..100u32)));
        let got = hungarian(cost.view()).unwrap().total_cost;
        let best = (0..6)
            .permutations(6)
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        if got != best {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    report(
        "hungarian oracle",
        mismatches == 0 && t < Duration::from_secs(1),
        format!("{mismatches}/100 cost mismatches vs 720-permutation search; {:.3}s (< 1s)", secs(t)),
    )
}

// ---------------------------------------------------------------- mAP

fn gt_object(id: u64, bbox: BBox, name: &str) -> GtObject {
    GtObject {
        annotation_id: id,
        bbox,
        class_name: name.into(),
        area_group: AreaGroup::of_box(&bbox),
    }
}

fn detection(bbox: BBox, name: &str, confidence: f64) -> Detection {
    Detection {
        bbox,
        class_index: 0,
        class_name: name.into(),
        confidence,
    }
}

fn map_check() -> Outcome {
    let names: Vec<String> = vec!["a".into(), "x".into()];
    let known = vec!["a".to_string()];
    let mut gt = GroundTruthSet {
        class_names: names.clone(),
        ..Default::default()
    };
    gt.images.insert(
        1,
        vec![
            gt_object(1, BBox::new(0.0, 0.0, 10.0, 10.0), "a"),
            gt_object(2, BBox::new(50.0, 50.0, 150.0, 150.0), "x"),
        ],
    );
    gt.images.insert(
        2,
        vec![
            gt_object(3, BBox::new(5.0, 5.0, 60.0, 45.0), "x"),
            gt_object(4, BBox::new(100.0, 0.0, 400.0, 300.0), "a"),
        ],
    );
    let perfect: DetectionSet = gt
        .images
        .iter()
        .map(|(&i, objs)| (i, objs.iter().map(|o| detection(o.bbox, &o.class_name, 0.9)).collect()))
        .collect();
    let r = evaluate_map(&perfect, &gt, &known).unwrap();
    let perfect_ok = [&r.known, &r.novel, &r.all].iter().all(|g| g.map == Some(1.0));

    // Two GT boxes, three detections: IoU .72 at .9, exact at .8, a miss at
    // .6. Precision envelope 1 to recall .5 for IoU thresholds <= .70 and .5
    // to recall .5 above, so AP = (5·51 + 5·25.5) / (10·101).
    let mut gt2 = GroundTruthSet {
        class_names: vec!["a".into()],
        ..Default::default()
    };
    gt2.images.insert(
        1,
        vec![
            gt_object(1, BBox::new(0.0, 0.0, 10.0, 10.0), "a"),
            gt_object(2, BBox::new(20.0, 20.0, 30.0, 30.0), "a"),
        ],
    );
    let mut dets = DetectionSet::new();
    dets.insert(
        1,
        vec![
            detection(BBox::new(0.0, 0.0, 10.0, 7.2), "a", 0.9),
            detection(BBox::new(0.0, 0.0, 10.0, 10.0), "a", 0.8),
            detection(BBox::new(40.0, 40.0, 50.0, 50.0), "a", 0.6),
        ],
    );
    let ap = evaluate_map(&dets, &gt2, &known).unwrap().all.map.unwrap();
    let expected = 38.25 / 101.0;
    let pass = perfect_ok && (ap - expected).abs() < 1e-9;
    report(
        "mAP oracle",
        pass,
        format!(
            "perfect predictions give 1.0 per group: {perfect_ok}; hand case AP {ap:.12} vs {expected:.12}"
        ),
    )
}

// ---------------------------------------------------------------- benchmark

const BENCHMARK_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn run_seed(base: &ExperimentConfig, seed: u64) -> SyntheticRun {
    let mut cfg = base.clone();
    cfg.set_seed(seed);
    run_synthetic(&cfg).expect("synthetic run").0
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark_check(base: &ExperimentConfig, runs: &mut BTreeMap<u64, SyntheticRun>) -> Outcome {
    let start = Instant::now();
    for seed in BENCHMARK_SEEDS {
        runs.insert(seed, run_seed(base, seed));
    }
    let t = start.elapsed();
    let gate = runs.values().map(|r| r.nearest_center_accuracy).fold(1.0, f64::min);
    let novel = mean(runs.values().map(|r| r.mapping.accuracy.novel));
    let known = mean(runs.values().map(|r| r.mapping.accuracy.known));
    let per_seed = runs
        .values()
        .map(|r| format!("seed {} known {:.3} novel {:.3}", r.seed, r.mapping.accuracy.known, r.mapping.accuracy.novel))
        .join(", ");
    let pass = gate >= 0.99 && novel >= 0.90 && known >= 0.95 && t < Duration::from_secs(600);
    report(
        "synthetic discovery benchmark",
        pass,
        format!(
            "novel {novel:.4} (>= 0.90), known {known:.4} (>= 0.95), nearest-center gate {gate:.4} (>= 0.99); {:.0}s for 3 seeds (< 600s) [{per_seed}]",
            secs(t)
        ),
    )
}

fn ablation_check(base: &ExperimentConfig, baseline: &mut BTreeMap<u64, SyntheticRun>) -> Outcome {
    let start = Instant::now();
    for seed in ABLATION_SEEDS {
        if !baseline.contains_key(&seed) {
            baseline.insert(seed, run_seed(base, seed));
        }
    }
    let variant = |f: &dyn Fn(&mut DiscoveryConfig)| -> (f64, f64) {
        let mut cfg = base.clone();
        f(&mut cfg.discovery);
        let runs: Vec<SyntheticRun> = ABLATION_SEEDS.iter().map(|&s| run_seed(&cfg, s)).collect();
        (
            mean(runs.iter().map(|r| r.mapping.accuracy.known)),
            mean(runs.iter().map(|r| r.mapping.accuracy.novel)),
        )
    };
    let (_, base_novel) = (
        mean(baseline.values().map(|r| r.mapping.accuracy.known)),
        mean(baseline.values().map(|r| r.mapping.accuracy.novel)),
    );
    let (_, no_memory) = variant(&|d| d.memory_batches = 0);
    let (_, uniform) = variant(&|d| d.prior = PriorKind::Uniform);
    let (_, kmeans) = variant(&|d| d.labeler = LabelerKind::Kmeans);
    let (known_a0, novel_a0) = variant(&|d| d.alpha = 0.0);
    let (known_a1, novel_a1) = variant(&|d| d.alpha = 1.0);
    let checks = [
        ("memory 0 < base novel", no_memory < base_novel),
        ("uniform < log-normal novel", uniform < base_novel),
        ("k-means < sinkhorn novel", kmeans < base_novel),
        ("alpha 1 known > alpha 0", known_a1 > known_a0),
        ("alpha 1 novel < alpha 0", novel_a1 < novel_a0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        "directional ablations",
        failed.is_empty(),
        format!(
            "novel: base {base_novel:.3}, memory 0 {no_memory:.3}, uniform {uniform:.3}, k-means {kmeans:.3}; \
             alpha 0 known {known_a0:.3} novel {novel_a0:.3}, alpha 1 known {known_a1:.3} novel {novel_a1:.3}; \
             failed: {failed:?}; {:.0}s",
            secs(start.elapsed())
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn determinism_check(base: &ExperimentConfig) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ncdl");
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = base.clone();
    // Determinism does not depend on run length; keep the CLI runs short.
    cfg.discovery.total_iters = 1000;
    cfg.discovery.ramp_iters = 200;
    fs::write(dir.join("cfg.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).current_dir(dir).env_remove("NCDL_SEED").output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth", "--config", "cfg.json", "--out", "s"]);
    run(&["bootstrap", "--config", "cfg.json", "--out", "b", "--dataset", "s/dataset"]);
    for out in ["d1", "d2"] {
        run(&["discover", "--config", "cfg.json", "--out", out, "--dataset", "s/dataset", "--checkpoint", "b/checkpoint"]);
    }
    let same = ["tensors.bin", "checkpoint.json"]
        .iter()
        .all(|f| fs::read(dir.join("d1/checkpoint").join(f)).unwrap() == fs::read(dir.join("d2/checkpoint").join(f)).unwrap());
    let bytes = fs::metadata(dir.join("d1/checkpoint/tensors.bin")).unwrap().len();
    report(
        "determinism",
        same,
        format!("two `discover` runs, {} iterations: checkpoints bit-identical = {same} ({bytes} tensor bytes)", cfg.discovery.total_iters),
    )
}

fn main() -> ExitCode {
    let quick = std::env::var("NCDL_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let base = ExperimentConfig::benchmark();
    let mut outcomes = vec![gradient_check(), sinkhorn_check(), hungarian_check(), map_check()];
    if quick {
        println!("SKIP synthetic discovery benchmark, directional ablations (NCDL_ACCEPTANCE_QUICK=1)");
    } else {
        let mut runs = BTreeMap::new();
        outcomes.push(benchmark_check(&base, &mut runs));
        outcomes.push(ablation_check(&base, &mut runs));
    }
    outcomes.push(determinism_check(&base));

    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    for o in &failed {
        eprintln!("failed: {} ({})", o.name, o.detail);
    }
    // Learning outcomes are reported but only gate the exit code under
    // NCDL_ACCEPTANCE_STRICT=1; exact-oracle checks always do.
    let strict = std::env::var("NCDL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let gating = failed.iter().filter(|o| strict || !STATISTICAL.contains(&o.name)).count();
    if gating == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

const STATISTICAL: [&str; 2] = ["synthetic discovery benchmark", "directional ablations"];
