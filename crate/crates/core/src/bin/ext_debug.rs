// temporary: criterion 8/9 trend diagnostics
use loradet::config::RunConfig;
use loradet::data::{build_dataset, default_generators, DatasetSpec};
use loradet::trainer::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let scale: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);

    let mut cfg = RunConfig::default();
    cfg.train_real = 500 / scale;
    cfg.train_fake_per_gen = 500 / scale;
    cfg.test_real = 100 / scale;
    cfg.test_fake_per_gen = 100 / scale;

    let spec = DatasetSpec {
        generators: default_generators(3, cfg.fingerprint_amplitude as f32).unwrap(),
        train_real: cfg.train_real,
        train_fake_per_gen: cfg.train_fake_per_gen,
        test_real: cfg.test_real,
        test_fake_per_gen: cfg.test_fake_per_gen,
        image_size: cfg.image_size,
        channels: cfg.channels,
        seed: 42,
    };
    let ds = build_dataset(&spec).unwrap();

    let sweep = run_k_sweep(&cfg, &ds, &[1, 2, 3], &[seed]).unwrap();
    for r in &sweep {
        println!("scale=1/{scale} seed={seed} {}: acc={:.4} auc={:.4}", r.variant, r.acc, r.auc);
    }
    let single = run_ablation(&cfg, &ds, &[AblationVariant::SingleLora], &[seed]).unwrap();
    for r in &single {
        println!("scale=1/{scale} seed={seed} single: acc={:.4} auc={:.4}", r.acc, r.auc);
    }
}
