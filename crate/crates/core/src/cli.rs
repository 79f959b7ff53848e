//! Command-line workflows tying the modules together.
//!
//! Exit codes: 0 success, 1 validation error (flags, config, data),
//! 2 runtime error (I/O, corrupt files, diverged training, failed check).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{build_dataset, default_generators, load_dataset, save_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::trainer::{
    self, extend_with_generator, gradcheck_stage_losses, run_ablation, run_k_sweep,
    AblationVariant, Stage1Config, Stage2Config,
};

const USAGE: &str = "\
usage: loradet <command> [flags]

commands:
  gen-data      --out DIR --k K --seed S [--config FILE]
  train-stage1  --data DIR --generator NAME --config FILE --out CKPT [--seed S]
  train-stage2  --data DIR --branches C1,C2,.. --config FILE --out CKPT [--seed S]
  add-generator --model CKPT --data DIR --generator NAME --out CKPT [--config FILE] [--seed S]
  eval          --model CKPT --data DIR --report FILE [--split test|train]
  gradcheck     [--config FILE] [--seed S]
  ablate        --data DIR --seeds N [--suite core|k|data] [--flags V1,V2,..]
                [--config FILE] [--out FILE]

flags take one value each; --config is a key=value file (defaults apply
for absent keys).";

/// Entry point used by the binary: errors map to exit codes and print to
/// standard error.
pub fn run(args: Vec<String>) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            if matches!(e, Error::Usage(_)) {
                let _ = writeln!(std::io::stderr(), "{USAGE}");
            }
            e.exit_code()
        }
    }
}

struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let key = &args[i];
            if !key.starts_with("--") {
                return Err(Error::Usage(format!("unexpected argument '{key}'")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Usage(format!("flag '{key}' needs a value")))?;
            if values
                .insert(key.trim_start_matches("--").to_string(), value.clone())
                .is_some()
            {
                return Err(Error::Usage(format!("duplicate flag '{key}'")));
            }
            i += 2;
        }
        Ok(Flags { values })
    }

    fn get(&self, key: &str) -> Result<&String> {
        self.values
            .get(key)
            .ok_or_else(|| Error::Usage(format!("missing required flag '--{key}'")))
    }

    fn opt(&self, key: &str) -> Option<&String> {
        self.values.get(key)
    }

    fn seed(&self) -> Result<u64> {
        match self.opt("seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Usage(format!("--seed expects an integer, got '{v}'"))),
            None => Ok(0),
        }
    }

    fn ensure_known(&self, known: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Usage(format!("unknown flag '--{key}'")));
            }
        }
        Ok(())
    }
}

fn load_config(flags: &Flags) -> Result<RunConfig> {
    match flags.opt("config") {
        Some(path) => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(Error::Usage(format!("config file '{path}' does not exist")));
            }
            RunConfig::from_file(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn want_input(path: &str, what: &str) -> Result<PathBuf> {
    let p = PathBuf::from(path);
    if !p.exists() {
        return Err(Error::Usage(format!("{what} '{path}' does not exist")));
    }
    Ok(p)
}

fn dispatch(args: Vec<String>) -> Result<()> {
    let Some(command) = args.first() else {
        return Err(Error::Usage("no command given".into()));
    };
    if command == "--help" || command == "-h" || command == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    let flags = Flags::parse(&args[1..])?;
    match command.as_str() {
        "gen-data" => cmd_gen_data(&flags),
        "train-stage1" => cmd_train_stage1(&flags),
        "train-stage2" => cmd_train_stage2(&flags),
        "add-generator" => cmd_add_generator(&flags),
        "eval" => cmd_eval(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "ablate" => cmd_ablate(&flags),
        other => Err(Error::Usage(format!("unknown command '{other}'"))),
    }
}

fn dataset_spec(cfg: &RunConfig, k: usize, seed: u64) -> Result<DatasetSpec> {
    Ok(DatasetSpec {
        generators: default_generators(k, cfg.fingerprint_amplitude as f32)?,
        train_real: cfg.train_real,
        train_fake_per_gen: cfg.train_fake_per_gen,
        test_real: cfg.test_real,
        test_fake_per_gen: cfg.test_fake_per_gen,
        image_size: cfg.image_size,
        channels: cfg.channels,
        seed,
    })
}

fn cmd_gen_data(flags: &Flags) -> Result<()> {
    flags.ensure_known(&["out", "k", "seed", "config"])?;
    let cfg = load_config(flags)?;
    let out = PathBuf::from(flags.get("out")?);
    let k: usize = flags
        .get("k")?
        .parse()
        .map_err(|_| Error::Usage("--k expects an integer".into()))?;
    let seed = flags.seed()?;
    let ds = build_dataset(&dataset_spec(&cfg, k, seed)?)?;
    save_dataset(&out, &ds)?;
    cfg.write_resolved(&out.join("config.resolved"))?;
    println!(
        "wrote dataset: {} train / {} test samples, {} generators -> {}",
        ds.train.len(),
        ds.test.len(),
        ds.k(),
        out.display()
    );
    Ok(())
}

fn side_paths(out: &Path) -> (PathBuf, PathBuf) {
    let config = out.with_extension("config");
    let log = out.with_extension("log.jsonl");
    (config, log)
}

fn cmd_train_stage1(flags: &Flags) -> Result<()> {
    flags.ensure_known(&["data", "generator", "config", "out", "seed"])?;
    let cfg = load_config(flags)?;
    let data_dir = want_input(flags.get("data")?, "dataset directory")?;
    let generator = flags.get("generator")?.clone();
    let out = PathBuf::from(flags.get("out")?);
    let seed = flags.seed()?;

    let ds = load_dataset(&data_dir)?;
    let gen_id = ds
        .generator_names()
        .iter()
        .position(|n| *n == generator)
        .ok_or_else(|| {
            Error::Usage(format!(
                "dataset has no generator '{generator}' (available: {:?})",
                ds.generator_names()
            ))
        })?
        + 1;

    let mut model = trainer::build_base_model(&cfg)?;
    model.add_branch(&generator, crate::numeric::rng::derive_seed(seed, &[0x43]))?;
    model.init_head(crate::numeric::rng::derive_seed(seed, &[0x41]))?;
    let s1 = Stage1Config::from_run(&cfg, &generator);
    let log = trainer::train_stage1(&mut model, &ds.stage1_subset(gen_id), &s1, seed)?;
    save_checkpoint(&model, &out)?;
    let (config_path, log_path) = side_paths(&out);
    cfg.write_resolved(&config_path)?;
    log.write_jsonl(&log_path)?;
    println!(
        "stage 1 '{generator}': {} steps, final epoch mean loss {:.4} -> {}",
        log.steps.len(),
        log.epoch_mean_total(log.last_epoch()).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_train_stage2(flags: &Flags) -> Result<()> {
    flags.ensure_known(&["data", "branches", "config", "out", "seed"])?;
    let cfg = load_config(flags)?;
    let data_dir = want_input(flags.get("data")?, "dataset directory")?;
    let out = PathBuf::from(flags.get("out")?);
    let seed = flags.seed()?;
    let branch_paths: Vec<PathBuf> = flags
        .get("branches")?
        .split(',')
        .map(|p| want_input(p.trim(), "branch checkpoint"))
        .collect::<Result<_>>()?;
    if branch_paths.is_empty() {
        return Err(Error::Usage("--branches needs at least one checkpoint".into()));
    }

    let ds = load_dataset(&data_dir)?;
    let mut model = trainer::build_base_model(&cfg)?;
    let backbone_hash = model.store.hash_prefix("backbone.");

    for (i, path) in branch_paths.iter().enumerate() {
        let branch = load_checkpoint(path)?;
        if branch.generators.len() != 1 {
            return Err(Error::Config(format!(
                "'{}' is not a single-branch stage-1 checkpoint (registry {:?})",
                path.display(),
                branch.generators
            )));
        }
        if branch.store.hash_prefix("backbone.") != backbone_hash {
            return Err(Error::Config(format!(
                "'{}' was trained on a different backbone than this config produces",
                path.display()
            )));
        }
        let name = branch.generators[0].clone();
        if ds.generator_names().get(i) != Some(&name) {
            return Err(Error::Config(format!(
                "branch order {:?} must match the dataset registry {:?}",
                branch_paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                ds.generator_names()
            )));
        }
        model.add_branch(&name, 0)?;
        let hub = model.hub();
        for tensor_name in hub.branch_names(&name) {
            model
                .store
                .replace_tensor(&tensor_name, branch.store.tensor(&tensor_name)?.clone())?;
        }
    }

    model.init_router(crate::numeric::rng::derive_seed(seed, &[0x42]))?;
    model.init_head(crate::numeric::rng::derive_seed(seed, &[0x41, 99]))?;
    let s2 = Stage2Config::from_run(&cfg);
    let log = trainer::train_stage2(&mut model, &ds.train, &s2, seed)?;
    save_checkpoint(&model, &out)?;
    let (config_path, log_path) = side_paths(&out);
    cfg.write_resolved(&config_path)?;
    log.write_jsonl(&log_path)?;
    println!(
        "stage 2 over {:?}: {} steps, final epoch mean loss {:.4} -> {}",
        model.generators,
        log.steps.len(),
        log.epoch_mean_total(log.last_epoch()).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_add_generator(flags: &Flags) -> Result<()> {
    flags.ensure_known(&["model", "data", "generator", "config", "out", "seed"])?;
    let cfg = load_config(flags)?;
    let model_path = want_input(flags.get("model")?, "model checkpoint")?;
    let data_dir = want_input(flags.get("data")?, "dataset directory")?;
    let generator = flags.get("generator")?.clone();
    let out = PathBuf::from(flags.get("out")?);
    let seed = flags.seed()?;

    let mut model = load_checkpoint(&model_path)?;
    let ds = load_dataset(&data_dir)?;
    let (log1, log2) = extend_with_generator(&mut model, &ds, &generator, &cfg, seed)?;
    save_checkpoint(&model, &out)?;
    let (config_path, log_path) = side_paths(&out);
    cfg.write_resolved(&config_path)?;
    let mut combined = log1;
    combined.steps.extend(log2.steps);
    combined.write_jsonl(&log_path)?;
    println!(
        "extended to {:?} ({} total steps) -> {}",
        model.generators,
        combined.steps.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    flags.ensure_known(&["model", "data", "report", "split"])?;
    let model_path = want_input(flags.get("model")?, "model checkpoint")?;
    let data_dir = want_input(flags.get("data")?, "dataset directory")?;
    let report_path = PathBuf::from(flags.get("report")?);
    let split = flags.opt("split").map(|s| s.as_str()).unwrap_or("test");

    let model = load_checkpoint(&model_path)?;
    let ds = load_dataset(&data_dir)?;
    let samples = match split {
        "test" => &ds.test,
        "train" => &ds.train,
        other => {
            return Err(Error::Usage(format!(
                "--split must be 'test' or 'train', got '{other}'"
            )))
        }
    };
    let report = evaluate(&model, samples)?;
    std::fs::write(&report_path, report.to_json()?)
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    println!(
        "acc={:.4} ap={:.4} auc={:.4} eer={:.4} ({} samples) -> {}",
        report.acc,
        report.ap,
        report.auc,
        report.eer,
        samples.len(),
        report_path.display()
    );
    Ok(())
}

/// The small configuration the gradient gate runs on when none is given.
pub fn gradcheck_default_config() -> RunConfig {
    RunConfig {
        image_size: 32,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        rank: 2,
        router_hidden: 12,
        warmup_epochs: 0,
        ..RunConfig::default()
    }
}

fn cmd_gradcheck(flags: &Flags) -> Result<()> {
    flags.ensure_known(&["config", "seed"])?;
    let cfg = match flags.opt("config") {
        Some(path) => RunConfig::from_file(Path::new(path))?,
        None => gradcheck_default_config(),
    };
    let seed = flags.seed()?;
    let checks = gradcheck_stage_losses(&cfg, seed)?;
    for (tag, report) in [("stage1", &checks.stage1), ("stage2", &checks.stage2)] {
        for g in &report.groups {
            println!(
                "{tag} {:<24} checked {:>3} skipped {:>3} max_rel {:.3e}",
                g.name, g.checked, g.skipped, g.max_rel
            );
        }
        println!("{tag}: max relative error {:.3e}", report.max_rel);
    }
    if checks.stage1.passes() && checks.stage2.passes() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Error::Check(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            checks.stage1.max_rel.max(checks.stage2.max_rel),
            crate::numeric::gradcheck::REL_TOLERANCE
        )))
    }
}

fn cmd_ablate(flags: &Flags) -> Result<()> {
    flags.ensure_known(&["data", "seeds", "suite", "flags", "config", "out"])?;
    let cfg = load_config(flags)?;
    let data_dir = want_input(flags.get("data")?, "dataset directory")?;
    let n_seeds: u64 = flags
        .get("seeds")?
        .parse()
        .map_err(|_| Error::Usage("--seeds expects a count".into()))?;
    if n_seeds == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (1..=n_seeds).collect();
    let ds: Dataset = load_dataset(&data_dir)?;

    let rows = if let Some(list) = flags.opt("flags") {
        let variants: Vec<AblationVariant> = list
            .split(',')
            .map(|v| AblationVariant::from_tag(v.trim()))
            .collect::<Result<_>>()?;
        run_ablation(&cfg, &ds, &variants, &seeds)?
    } else {
        match flags.opt("suite").map(|s| s.as_str()).unwrap_or("core") {
            "core" => run_ablation(&cfg, &ds, &AblationVariant::CORE_SUITE, &seeds)?,
            "data" => run_ablation(&cfg, &ds, &AblationVariant::DATA_SUITE, &seeds)?,
            "k" => {
                let ks: Vec<usize> = (1..=ds.k()).collect();
                run_k_sweep(&cfg, &ds, &ks, &seeds)?
            }
            other => {
                return Err(Error::Usage(format!(
                    "--suite must be core, data or k, got '{other}'"
                )))
            }
        }
    };

    for row in &rows {
        println!(
            "{:<16} seed {:>2}: acc={:.4} ap={:.4} auc={:.4} eer={:.4}",
            row.variant, row.seed, row.acc, row.ap, row.auc, row.eer
        );
    }
    if let Some(out) = flags.opt("out") {
        let json = serde_json::to_string_pretty(&rows)
            .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
        std::fs::write(out, json).map_err(|e| Error::io(out.clone(), e))?;
        println!("wrote {out}");
    }
    Ok(())
}
