//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured values once its assertions hold.
//!
//! The end-to-end criteria share a single trained default model (built on
//! first use); trend criteria run the same pipeline at half data scale,
//! which they do not pin. Run with
//! `cargo test --test acceptance -- --nocapture` to see every line.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use loradet::backbone::Proj;
use loradet::checkpoint::{load_checkpoint, save_checkpoint};
use loradet::cli;
use loradet::config::RunConfig;
use loradet::data::{
    build_dataset, default_generators, genmix, normalize, Dataset, DatasetSpec, Sample,
};
use loradet::lora::{add_branch, branch_delta, integrate, LoraHub};
use loradet::metrics::{self, evaluate, MetricsReport, ScoredSet};
use loradet::model::Model;
use loradet::numeric::gradcheck::REL_TOLERANCE;
use loradet::numeric::ops;
use loradet::numeric::params::ParamStore;
use loradet::numeric::rng::DetRng;
use loradet::numeric::tensor::Tensor;
use loradet::router;
use loradet::trainer::{
    self, build_base_model, clone_model, extend_with_generator, gradcheck_stage_losses,
    run_ablation, run_k_sweep, AblationVariant,
};

const DATA_SEED: u64 = 42;
const RUN_SEED: u64 = 1;

fn default_dataset(cfg: &RunConfig, k: usize) -> Dataset {
    let spec = DatasetSpec {
        generators: default_generators(k, cfg.fingerprint_amplitude as f32).unwrap(),
        train_real: cfg.train_real,
        train_fake_per_gen: cfg.train_fake_per_gen,
        test_real: cfg.test_real,
        test_fake_per_gen: cfg.test_fake_per_gen,
        image_size: cfg.image_size,
        channels: cfg.channels,
        seed: DATA_SEED,
    };
    build_dataset(&spec).unwrap()
}

struct DefaultRun {
    cfg: RunConfig,
    dataset: Dataset,
    model: Model<f32>,
    stage1_logs: Vec<(String, trainer::TrainLog)>,
    stage2_log: trainer::TrainLog,
    report: MetricsReport,
    train_time: Duration,
}

/// The criterion-5 run: default config, K=3, 2000 train / 400 test,
/// 5+5 epochs, fixed seeds. Trained once and shared.
fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::default();
        let started = Instant::now();
        let dataset = default_dataset(&cfg, 3);
        assert_eq!(dataset.train.len(), 2000);
        assert_eq!(dataset.test.len(), 400);
        let base = build_base_model(&cfg).unwrap();
        let run = trainer::run_full_pipeline(&cfg, &dataset, RUN_SEED, &base).unwrap();
        let train_time = started.elapsed();
        let report = evaluate(&run.model, &dataset.test).unwrap();
        DefaultRun {
            cfg,
            dataset,
            model: run.model,
            stage1_logs: run.stage1_logs,
            stage2_log: run.stage2_log,
            report,
            train_time,
        }
    })
}

struct HalfScaleRows {
    sweep: Vec<trainer::AblationRow>,
    single: Vec<trainer::AblationRow>,
}

/// K-sweep and single-adapter baselines over three seeds at half data
/// scale (criteria 8 and 9 pin trends, not sizes). Errors are cached so a
/// failed initialization is not recomputed by the second consumer.
fn half_scale_rows() -> &'static HalfScaleRows {
    static ROWS: OnceLock<Result<HalfScaleRows, String>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.train_real = 250;
        cfg.train_fake_per_gen = 250;
        cfg.test_real = 50;
        cfg.test_fake_per_gen = 50;
        let ds = default_dataset(&cfg, 3);
        let seeds = [1, 2, 3];
        let sweep = run_k_sweep(&cfg, &ds, &[1, 2, 3], &seeds).map_err(|e| e.to_string())?;
        let single = run_ablation(&cfg, &ds, &[AblationVariant::SingleLora], &seeds)
            .map_err(|e| e.to_string())?;
        Ok(HalfScaleRows { sweep, single })
    })
    .as_ref()
    .expect("half-scale fixture failed")
}

fn mean_acc(rows: &[trainer::AblationRow], variant: &str) -> f64 {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.acc)
        .collect();
    assert!(!sel.is_empty(), "no rows for variant {variant}");
    sel.iter().sum::<f64>() / sel.len() as f64
}

#[test]
fn criterion_01_gradient_fidelity() {
    // 2-layer, d=16, K=2 configuration; batch of 2 inside the harness
    let cfg = cli::gradcheck_default_config();
    assert_eq!((cfg.depth, cfg.embed_dim), (2, 16));
    let started = Instant::now();
    let checks = gradcheck_stage_losses(&cfg, 123).unwrap();
    let elapsed = started.elapsed();
    assert!(
        checks.stage1.max_rel < REL_TOLERANCE,
        "stage-1 max relative error {}",
        checks.stage1.max_rel
    );
    assert!(
        checks.stage2.max_rel < REL_TOLERANCE,
        "stage-2 max relative error {}",
        checks.stage2.max_rel
    );
    assert!(elapsed < Duration::from_secs(60), "gradcheck took {elapsed:?}");
    println!(
        "[PASS] criterion 1 gradient fidelity: stage1 {:.2e}, stage2 {:.2e} (< {REL_TOLERANCE:.0e}) in {elapsed:.1?}",
        checks.stage1.max_rel, checks.stage2.max_rel
    );
}

#[test]
fn criterion_02_simplex_contract() {
    let mut store: ParamStore<f64> = ParamStore::new();
    router::init_router(&mut store, 16, 24, 5, 7).unwrap();
    let mut rng = DetRng::new(99);
    for _ in 0..10_000 {
        let desc = Tensor::new(
            vec![1, 16],
            (0..16).map(|_| rng.uniform(-30.0, 30.0)).collect(),
        )
        .unwrap();
        let pi = router::route(&store, &desc).unwrap();
        let sum: f64 = pi.values().iter().sum();
        assert!(pi.values().iter().all(|&v| v >= 0.0), "negative weight in {pi:?}");
        assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
    }
    println!("[PASS] criterion 2 simplex contract: 10^4 random descriptors, all rows on the simplex within 1e-6");
}

#[test]
fn criterion_03_composition_algebra() {
    let mut rng = DetRng::new(314);
    let d = 16;
    let mut hub = LoraHub::new(4, 8.0, &[Proj::Q, Proj::V], 2);
    let mut store: ParamStore<f32> = ParamStore::new();
    for g in ["g1", "g2", "g3"] {
        add_branch(&mut store, &mut hub, g, d, rng.next_u64()).unwrap();
        for (l, p) in hub.slots().collect::<Vec<_>>() {
            let b = Tensor::new(
                vec![hub.rank, d],
                (0..hub.rank * d).map(|_| (rng.next_f32() - 0.5) * 0.1).collect(),
            )
            .unwrap();
            store.replace_tensor(&hub.b_name(g, l, p), b).unwrap();
        }
    }

    // one-hot composition equals the single-branch residual exactly
    for k in 0..3 {
        let x = Tensor::new(
            vec![5, d],
            (0..5 * d).map(|_| rng.next_f32() - 0.5).collect(),
        )
        .unwrap();
        let mut pi = vec![0.0; 3];
        pi[k] = 1.0;
        let one_hot = integrate(&store, &hub, &x, &pi, 0, Proj::Q).unwrap();
        let direct = branch_delta(&store, &hub, &x, &hub.generators[k], 0, Proj::Q).unwrap();
        assert_eq!(one_hot, direct);
    }

    // 100 random simplex points against the dense-materialization oracle
    for _ in 0..100 {
        let x = Tensor::new(
            vec![4, d],
            (0..4 * d).map(|_| rng.next_f32() - 0.5).collect(),
        )
        .unwrap();
        let a = rng.next_f64();
        let b = rng.next_f64() * (1.0 - a);
        let pi = vec![a, b, 1.0 - a - b];
        let fast = integrate(&store, &hub, &x, &pi, 1, Proj::V).unwrap();
        let mut oracle = Tensor::zeros(&[4, d]);
        for (k, g) in hub.generators.iter().enumerate() {
            let aa = store.tensor(&hub.a_name(g, 1, Proj::V)).unwrap();
            let bb = store.tensor(&hub.b_name(g, 1, Proj::V)).unwrap();
            let dense = ops::scale(&ops::matmul(aa, bb).unwrap(), hub.scaling() as f32);
            let contrib = ops::scale(&ops::matmul(&x, &dense).unwrap(), pi[k] as f32);
            oracle = ops::add(&oracle, &contrib).unwrap();
        }
        for (u, v) in fast.data().iter().zip(oracle.data()) {
            assert!((u - v).abs() < 1e-5, "{u} vs {v}");
        }
    }

    // a fresh (B = 0) branch contributes exactly zero: its residual is the
    // zero tensor, and routing all mass onto it yields the zero tensor
    add_branch(&mut store, &mut hub, "fresh", d, 5150).unwrap();
    let x = Tensor::new(vec![3, d], (0..3 * d).map(|_| rng.next_f32()).collect()).unwrap();
    let fresh_alone = branch_delta(&store, &hub, &x, "fresh", 0, Proj::Q).unwrap();
    assert!(fresh_alone.data().iter().all(|&v| v == 0.0));
    let fresh_hot = integrate(&store, &hub, &x, &[0.0, 0.0, 0.0, 1.0], 0, Proj::Q).unwrap();
    assert!(fresh_hot.data().iter().all(|&v| v == 0.0));

    println!("[PASS] criterion 3 composition algebra: one-hot exact, 100 dense-oracle cases < 1e-5, zero-init branches inert");
}

#[test]
fn criterion_04_freezing_semantics() {
    // full tiny run with hashes taken at every stage boundary
    let cfg = RunConfig::from_text(
        "image_size=16\npatch_size=4\nembed_dim=16\ndepth=2\nheads=2\nmlp_ratio=2\nrank=2\nrouter_hidden=12\ntrain_real=16\ntrain_fake_per_gen=16\ntest_real=4\ntest_fake_per_gen=4\nstage1_epochs=1\nstage2_epochs=1\n",
    )
    .unwrap();
    let ds = default_dataset(&cfg, 2);
    let base = build_base_model(&cfg).unwrap();
    let backbone0 = base.store.hash_prefix("backbone.");

    // stage 1 on generator 1 with a peer branch present
    let mut m = clone_model(&base);
    m.add_branch("checkerboard", 11).unwrap();
    m.add_branch("spectral_peak", 12).unwrap();
    m.init_head(13).unwrap();
    let peer0 = m.store.hash_prefix("lora.spectral_peak.");
    let s1 = trainer::Stage1Config::from_run(&cfg, "checkerboard");
    trainer::train_stage1(&mut m, &ds.stage1_subset(1), &s1, 14).unwrap();
    assert_eq!(m.store.hash_prefix("backbone."), backbone0, "backbone moved in stage 1");
    assert_eq!(m.store.hash_prefix("lora.spectral_peak."), peer0, "peer branch moved in stage 1");

    let s1b = trainer::Stage1Config::from_run(&cfg, "spectral_peak");
    trainer::train_stage1(&mut m, &ds.stage1_subset(2), &s1b, 15).unwrap();
    assert_eq!(m.store.hash_prefix("backbone."), backbone0);

    // stage 2 freezes every branch
    m.init_router(16).unwrap();
    let branches0 = m.store.hash_prefix("lora.");
    let s2 = trainer::Stage2Config::from_run(&cfg);
    trainer::train_stage2(&mut m, &ds.train, &s2, 17).unwrap();
    assert_eq!(m.store.hash_prefix("lora."), branches0, "branches moved in stage 2");
    assert_eq!(m.store.hash_prefix("backbone."), backbone0, "backbone moved in stage 2");

    println!("[PASS] criterion 4 freezing semantics: backbone hash stable across both stages, peers stable in stage 1, hub stable in stage 2");
}

#[test]
fn criterion_05_end_to_end_default_run() {
    let run = default_run();
    assert!(
        run.report.acc >= 0.95,
        "test accuracy {:.4} below 0.95",
        run.report.acc
    );
    assert!(
        run.report.auc >= 0.99,
        "test AUC {:.4} below 0.99",
        run.report.auc
    );
    assert!(
        run.train_time < Duration::from_secs(30 * 60),
        "training took {:?}",
        run.train_time
    );

    // smoke property: mean loss at the last epoch beats the first, for
    // every stage-1 run and for stage 2
    for (name, log) in &run.stage1_logs {
        let first = log.epoch_mean_total(0).unwrap();
        let last = log.epoch_mean_total(log.last_epoch()).unwrap();
        assert!(last < first, "stage-1 '{name}' loss did not improve: {first} -> {last}");
    }
    let first = run.stage2_log.epoch_mean_total(0).unwrap();
    let last = run.stage2_log.epoch_mean_total(run.stage2_log.last_epoch()).unwrap();
    assert!(last < first, "stage-2 loss did not improve: {first} -> {last}");

    println!(
        "[PASS] criterion 5 end-to-end default run: acc {:.4} (>= 0.95), auc {:.4} (>= 0.99), trained in {:.0?} (< 30 min)",
        run.report.acc, run.report.auc, run.train_time
    );
}

#[test]
fn criterion_06_router_specialization() {
    let run = default_run();
    let k = run.model.k();
    for (gi, name) in run.model.generators.iter().enumerate() {
        let fakes: Vec<&Sample> = run
            .dataset
            .test
            .iter()
            .filter(|s| s.generator == gi + 1)
            .collect();
        assert!(!fakes.is_empty());
        let mut mean_own = 0.0;
        let mut argmax_hits = 0usize;
        for s in &fakes {
            let img = normalize(&s.image).unwrap();
            let pred = run.model.predict(&img).unwrap();
            assert_eq!(pred.merge_weights.len(), k);
            mean_own += pred.merge_weights[gi];
            let argmax = pred
                .merge_weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == gi {
                argmax_hits += 1;
            }
        }
        mean_own /= fakes.len() as f64;
        let argmax_rate = argmax_hits as f64 / fakes.len() as f64;
        assert!(
            mean_own >= 0.6,
            "{name}: mean own-branch weight {mean_own:.3} below 0.6"
        );
        assert!(
            argmax_rate >= 0.9,
            "{name}: argmax-correct rate {argmax_rate:.3} below 0.9"
        );
        println!(
            "[PASS] criterion 6 router specialization ({name}): mean pi {mean_own:.3} (>= 0.6), argmax rate {argmax_rate:.3} (>= 0.9)"
        );
    }
}

#[test]
fn criterion_07_genmix_consistency() {
    let run = default_run();
    // 200 held-out λ=0.5 fusions across distinct generator pairs
    let mut rng = DetRng::new(777);
    let fakes: Vec<&Sample> = run.dataset.test.iter().filter(|s| s.label == 1).collect();
    let mut pairs_checked = 0;
    let mut mass_sum = 0.0;
    while pairs_checked < 200 {
        let a = fakes[rng.index(fakes.len())];
        let b = fakes[rng.index(fakes.len())];
        if a.generator == b.generator {
            continue;
        }
        let fused = genmix(a, b, 0.5).unwrap();
        let img = normalize(&fused.image).unwrap();
        let pred = run.model.predict(&img).unwrap();
        mass_sum += pred.merge_weights[a.generator - 1] + pred.merge_weights[b.generator - 1];
        pairs_checked += 1;
    }
    let mean_mass = mass_sum / pairs_checked as f64;
    assert!(
        mean_mass >= 0.8,
        "mean combined weight on the two source branches {mean_mass:.3} below 0.8"
    );
    println!(
        "[PASS] criterion 7 fusion consistency: mean pi_a + pi_b over 200 half-blends {mean_mass:.3} (>= 0.8)"
    );
}

#[test]
fn criterion_08_branch_count_trend() {
    let rows = half_scale_rows();
    let accs: Vec<f64> = (1..=3)
        .map(|k| mean_acc(&rows.sweep, &format!("k={k}")))
        .collect();
    // non-decreasing across K; dips beyond one point fail
    for w in accs.windows(2) {
        assert!(
            w[1] >= w[0] - 0.01,
            "mean accuracy decreased beyond tolerance across K: {accs:?}"
        );
    }
    println!(
        "[PASS] criterion 8 branch-count trend: mean acc over 3 seeds {:.4} / {:.4} / {:.4} for K = 1 / 2 / 3",
        accs[0], accs[1], accs[2]
    );
}

#[test]
fn criterion_09_ablation_direction() {
    let rows = half_scale_rows();
    let full = mean_acc(&rows.sweep, "k=3"); // full two-stage pipeline at K=3
    let single = mean_acc(&rows.single, "single_lora");
    assert!(
        full - single >= 0.03,
        "full model mean acc {full:.4} does not exceed single-adapter baseline {single:.4} by 3 points"
    );
    println!(
        "[PASS] criterion 9 ablation direction: full {full:.4} vs single adapter {single:.4} (gap {:.1} points >= 3)",
        (full - single) * 100.0
    );
}

#[test]
fn criterion_10_metric_oracles() {
    let mut rng = DetRng::new(2024);
    let mut checked = 0;
    while checked < 200 {
        let n = 2 + rng.index(63);
        let quantize = checked % 2 == 0;
        let mut scores = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            scores.push(if quantize {
                rng.index(11) as f64 / 10.0
            } else {
                rng.next_f64()
            });
            labels.push(u8::from(rng.bernoulli(0.5)));
        }
        let Ok(set) = ScoredSet::new(scores, labels) else {
            continue;
        };
        if set.positives() == 0 || set.negatives() == 0 {
            continue;
        }
        assert_eq!(
            metrics::accuracy(&set, 0.5).unwrap(),
            oracle_accuracy(&set, 0.5)
        );
        let ap = metrics::average_precision(&set).unwrap();
        assert!((ap - oracle_ap(&set)).abs() < 1e-9);
        let auc = metrics::roc_auc(&set).unwrap();
        assert!((auc - oracle_auc(&set)).abs() < 1e-9);
        let eer = metrics::eer(&set).unwrap();
        assert!((eer - oracle_eer(&set)).abs() < 1e-3);
        checked += 1;
    }
    println!("[PASS] criterion 10 metric oracles: 200 random sets matched (acc exact, ap/auc < 1e-9, eer < 1e-3)");
}

#[test]
fn criterion_11_extension_contract() {
    let run = default_run();
    let mut model = clone_model(&run.model);
    let branch_hashes: Vec<u64> = model
        .generators
        .iter()
        .map(|g| model.store.hash_prefix(&format!("lora.{g}.")))
        .collect();

    let ds4 = default_dataset(&run.cfg, 4);
    extend_with_generator(&mut model, &ds4, "checkerboard_wide", &run.cfg, 64).unwrap();
    assert_eq!(model.k(), 4);
    for (g, h) in run.model.generators.iter().zip(branch_hashes) {
        assert_eq!(
            model.store.hash_prefix(&format!("lora.{g}.")),
            h,
            "branch '{g}' changed during extension"
        );
    }

    // argmax routing accuracy on all four generators' held-out fakes
    let mut per_gen = Vec::new();
    for gi in 0..4 {
        let fakes: Vec<&Sample> = ds4.test.iter().filter(|s| s.generator == gi + 1).collect();
        let mut hits = 0;
        for s in &fakes {
            let img = normalize(&s.image).unwrap();
            let pred = model.predict(&img).unwrap();
            let argmax = pred
                .merge_weights
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == gi {
                hits += 1;
            }
        }
        per_gen.push(hits as f64 / fakes.len() as f64);
    }
    for (gi, rate) in per_gen.iter().enumerate() {
        assert!(
            *rate >= 0.9,
            "generator {} argmax routing accuracy {rate:.3} below 0.9 (all: {per_gen:?})",
            model.generators[gi]
        );
    }
    println!(
        "[PASS] criterion 11 extension contract: branches 1-3 bit-identical, argmax routing {:?} (all >= 0.9)",
        per_gen.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_12_reproducibility() {
    // two identical CLI pipeline invocations: byte-identical checkpoints
    // and metric reports
    let dir = std::env::temp_dir().join("loradet_acceptance_repro");
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("run.config");
    std::fs::write(
        &cfg_path,
        "image_size=16\npatch_size=4\nembed_dim=16\ndepth=2\nheads=2\nmlp_ratio=2\nrank=2\nrouter_hidden=12\ntrain_real=12\ntrain_fake_per_gen=12\ntest_real=6\ntest_fake_per_gen=6\nstage1_epochs=1\nstage2_epochs=1\n",
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap().to_string();

    let mut artifacts: Vec<Vec<u8>> = Vec::new();
    for round in 0..2 {
        let rdir = dir.join(format!("round{round}"));
        std::fs::create_dir_all(&rdir).unwrap();
        let data = rdir.join("data");
        let run_args = |v: &[&str]| -> i32 { cli::run(v.iter().map(|s| s.to_string()).collect()) };
        assert_eq!(
            run_args(&["gen-data", "--out", data.to_str().unwrap(), "--k", "2", "--seed", "5", "--config", &cfg]),
            0
        );
        let b1 = rdir.join("b1.ckpt");
        let b2 = rdir.join("b2.ckpt");
        for (name, p) in [("checkerboard", &b1), ("spectral_peak", &b2)] {
            assert_eq!(
                run_args(&[
                    "train-stage1", "--data", data.to_str().unwrap(), "--generator", name,
                    "--config", &cfg, "--out", p.to_str().unwrap(), "--seed", "7",
                ]),
                0
            );
        }
        let full = rdir.join("full.ckpt");
        let branches = format!("{},{}", b1.display(), b2.display());
        assert_eq!(
            run_args(&[
                "train-stage2", "--data", data.to_str().unwrap(), "--branches", &branches,
                "--config", &cfg, "--out", full.to_str().unwrap(), "--seed", "9",
            ]),
            0
        );
        let report = rdir.join("report.json");
        assert_eq!(
            run_args(&[
                "eval", "--model", full.to_str().unwrap(), "--data", data.to_str().unwrap(),
                "--report", report.to_str().unwrap(),
            ]),
            0
        );
        for p in [&data.join("train.bin"), &data.join("test.bin"), &b1, &b2, &full, &report] {
            artifacts.push(std::fs::read(p).unwrap());
        }
    }
    let half = artifacts.len() / 2;
    for (i, (a, b)) in artifacts[..half].iter().zip(&artifacts[half..]).enumerate() {
        assert_eq!(a, b, "artifact {i} differs between identical invocations");
    }
    std::fs::remove_dir_all(&dir).ok();
    println!("[PASS] criterion 12 reproducibility: both pipeline invocations produced byte-identical datasets, checkpoints and reports");
}

#[test]
fn checkpoint_roundtrip_binds_default_model() {
    // supporting check for the shared fixture: the trained default model
    // survives a save/load round trip prediction-exactly
    let run = default_run();
    let dir = std::env::temp_dir().join("loradet_acceptance_ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join("default.ckpt");
    save_checkpoint(&run.model, &p).unwrap();
    let loaded = load_checkpoint(&p).unwrap();
    for s in run.dataset.test.iter().take(10) {
        let img = normalize(&s.image).unwrap();
        let a = run.model.predict(&img).unwrap();
        let b = loaded.predict(&img).unwrap();
        assert_eq!(a.fake_prob.to_bits(), b.fake_prob.to_bits());
    }
    std::fs::remove_dir_all(&dir).ok();
}

// --- brute-force oracles (criterion 10) --------------------------------

fn oracle_accuracy(set: &ScoredSet, threshold: f64) -> f64 {
    let mut correct = 0;
    for i in 0..set.len() {
        if (set.scores()[i] >= threshold) == (set.labels()[i] == 1) {
            correct += 1;
        }
    }
    correct as f64 / set.len() as f64
}

fn oracle_ap(set: &ScoredSet) -> f64 {
    let mut thresholds: Vec<f64> = set.scores().to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let pos = set.positives() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for i in 0..set.len() {
            if set.scores()[i] >= t {
                if set.labels()[i] == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        ap += (tp / pos - prev_recall) * (tp / (tp + fp));
        prev_recall = tp / pos;
    }
    ap
}

fn oracle_auc(set: &ScoredSet) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..set.len() {
        if set.labels()[i] != 1 {
            continue;
        }
        for j in 0..set.len() {
            if set.labels()[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if set.scores()[i] > set.scores()[j] {
                wins += 1.0;
            } else if set.scores()[i] == set.scores()[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn oracle_eer(set: &ScoredSet) -> f64 {
    // dense scan along the piecewise-linear operating curve
    let mut thresholds: Vec<f64> = set.scores().to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let pos = set.positives() as f64;
    let neg = set.negatives() as f64;
    let mut points = vec![(0.0f64, 1.0f64)];
    for &t in &thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for i in 0..set.len() {
            if set.scores()[i] >= t {
                if set.labels()[i] == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        points.push((fp / neg, (pos - tp) / pos));
    }
    let per_segment = 100_000 / (points.len() - 1).max(1);
    let mut best_gap = f64::MAX;
    let mut best = 0.0;
    for w in points.windows(2) {
        for step in 0..=per_segment {
            let s = step as f64 / per_segment as f64;
            let fpr = w[0].0 + s * (w[1].0 - w[0].0);
            let fnr = w[0].1 + s * (w[1].1 - w[0].1);
            if (fpr - fnr).abs() < best_gap {
                best_gap = (fpr - fnr).abs();
                best = (fpr + fnr) / 2.0;
            }
        }
    }
    best
}
