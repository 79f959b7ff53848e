//! Flat key=value run configuration. Every key is schema-checked, unknown
//! keys are rejected, defaults fill the gaps, and the fully resolved
//! document is echoed next to every output so a run can be reproduced
//! from its artifacts alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{Proj, ViTConfig};
use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::head::HeadKind;
use crate::model::ModelConfig;
use crate::numeric::optim::AdamWParams;

#[derive(Clone, Debug)]
pub struct RunConfig {
    // backbone
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_targets: Vec<Proj>,
    pub backbone_seed: u64,
    pub warmup_epochs: usize,
    // lora
    pub rank: usize,
    pub alpha: f64,
    // router
    pub router_hidden: usize,
    pub route_per_layer: bool,
    // head
    pub head: HeadKind,
    // data
    pub train_real: usize,
    pub train_fake_per_gen: usize,
    pub test_real: usize,
    pub test_fake_per_gen: usize,
    pub fingerprint_amplitude: f64,
    pub augment: bool,
    // optimizer
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    // stage1
    pub stage1_epochs: usize,
    pub stage1_batch: usize,
    // stage2
    pub stage2_epochs: usize,
    pub stage2_batch: usize,
    pub lambda_route: f64,
    pub lambda_reg: f64,
    pub p_fuse: f64,
    // eval
    pub eval_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            lora_targets: vec![Proj::Q, Proj::V],
            backbone_seed: 17,
            warmup_epochs: 0,
            rank: 4,
            alpha: 8.0,
            router_hidden: 128,
            route_per_layer: true,
            head: HeadKind::AttnPool,
            train_real: 500,
            train_fake_per_gen: 500,
            test_real: 100,
            test_fake_per_gen: 100,
            fingerprint_amplitude: 0.05,
            augment: false,
            lr: 1e-2,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            stage1_epochs: 5,
            stage1_batch: 32,
            stage2_epochs: 5,
            stage2_batch: 32,
            lambda_route: 1.0,
            lambda_reg: 1e-4,
            p_fuse: 0.15,
            eval_threshold: 0.5,
        }
    }
}

fn parse_targets(s: &str) -> Result<Vec<Proj>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let p = Proj::from_tag(part.trim())?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("lora_targets must name at least one projection".into()));
    }
    Ok(out)
}

fn targets_text(targets: &[Proj]) -> String {
    targets.iter().map(|p| p.tag()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse a key=value document over the defaults. Unknown keys and
    /// malformed values are config errors naming the offending line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{}'",
                    lineno + 1,
                    k.trim()
                )));
            }
        }
        Self::from_pairs(&kv)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    pub fn from_pairs(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value) in kv {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn uint(key: &str, value: &str) -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("'{key}' expects an unsigned integer, got '{value}'")))
        }
        fn u64v(key: &str, value: &str) -> Result<u64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("'{key}' expects an unsigned integer, got '{value}'")))
        }
        fn float(key: &str, value: &str) -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("'{key}' expects a number, got '{value}'")))
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("'{key}' expects true or false, got '{value}'"))),
            }
        }
        match key {
            "image_size" => self.image_size = uint(key, value)?,
            "patch_size" => self.patch_size = uint(key, value)?,
            "channels" => self.channels = uint(key, value)?,
            "embed_dim" => self.embed_dim = uint(key, value)?,
            "depth" => self.depth = uint(key, value)?,
            "heads" => self.heads = uint(key, value)?,
            "mlp_ratio" => self.mlp_ratio = uint(key, value)?,
            "lora_targets" => self.lora_targets = parse_targets(value)?,
            "backbone_seed" => self.backbone_seed = u64v(key, value)?,
            "warmup_epochs" => self.warmup_epochs = uint(key, value)?,
            "rank" => self.rank = uint(key, value)?,
            "alpha" => self.alpha = float(key, value)?,
            "router_hidden" => self.router_hidden = uint(key, value)?,
            "route_per_layer" => self.route_per_layer = boolean(key, value)?,
            "head" => self.head = HeadKind::from_tag(value)?,
            "train_real" => self.train_real = uint(key, value)?,
            "train_fake_per_gen" => self.train_fake_per_gen = uint(key, value)?,
            "test_real" => self.test_real = uint(key, value)?,
            "test_fake_per_gen" => self.test_fake_per_gen = uint(key, value)?,
            "fingerprint_amplitude" => self.fingerprint_amplitude = float(key, value)?,
            "augment" => self.augment = boolean(key, value)?,
            "lr" => self.lr = float(key, value)?,
            "weight_decay" => self.weight_decay = float(key, value)?,
            "beta1" => self.beta1 = float(key, value)?,
            "beta2" => self.beta2 = float(key, value)?,
            "eps" => self.eps = float(key, value)?,
            "stage1_epochs" => self.stage1_epochs = uint(key, value)?,
            "stage1_batch" => self.stage1_batch = uint(key, value)?,
            "stage2_epochs" => self.stage2_epochs = uint(key, value)?,
            "stage2_batch" => self.stage2_batch = uint(key, value)?,
            "lambda_route" => self.lambda_route = float(key, value)?,
            "lambda_reg" => self.lambda_reg = float(key, value)?,
            "p_fuse" => self.p_fuse = float(key, value)?,
            "eval_threshold" => self.eval_threshold = float(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.to_model_config()?.validate()?;
        if self.lambda_route < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_fuse) {
            return Err(Error::Config(format!("p_fuse {} outside [0,1]", self.p_fuse)));
        }
        if self.stage1_batch == 0 || self.stage2_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.lr <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("lr and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0,1)".into()));
        }
        if !(self.fingerprint_amplitude > 0.0 && self.fingerprint_amplitude <= 0.2) {
            return Err(Error::Config(format!(
                "fingerprint_amplitude {} outside (0, 0.2]",
                self.fingerprint_amplitude
            )));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(Error::Config("eval_threshold must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn to_model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            vit: ViTConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                channels: self.channels,
                embed_dim: self.embed_dim,
                depth: self.depth,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            rank: self.rank,
            alpha: self.alpha,
            lora_targets: self.lora_targets.clone(),
            router_hidden: self.router_hidden,
            route_per_layer: self.route_per_layer,
            head: self.head,
            backbone_seed: self.backbone_seed,
            warmup_epochs: self.warmup_epochs,
        })
    }

    pub fn optimizer(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn augmentation(&self) -> Option<AugmentationConfig> {
        self.augment.then(AugmentationConfig::default)
    }

    /// Canonical rendering: fixed key order with section comments. Hash
    /// and echo both use this exact text.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# backbone");
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "mlp_ratio={}", self.mlp_ratio);
        let _ = writeln!(s, "lora_targets={}", targets_text(&self.lora_targets));
        let _ = writeln!(s, "backbone_seed={}", self.backbone_seed);
        let _ = writeln!(s, "warmup_epochs={}", self.warmup_epochs);
        let _ = writeln!(s, "# lora");
        let _ = writeln!(s, "rank={}", self.rank);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "# router");
        let _ = writeln!(s, "router_hidden={}", self.router_hidden);
        let _ = writeln!(s, "route_per_layer={}", self.route_per_layer);
        let _ = writeln!(s, "# head");
        let _ = writeln!(s, "head={}", self.head.tag());
        let _ = writeln!(s, "# data");
        let _ = writeln!(s, "train_real={}", self.train_real);
        let _ = writeln!(s, "train_fake_per_gen={}", self.train_fake_per_gen);
        let _ = writeln!(s, "test_real={}", self.test_real);
        let _ = writeln!(s, "test_fake_per_gen={}", self.test_fake_per_gen);
        let _ = writeln!(s, "fingerprint_amplitude={}", self.fingerprint_amplitude);
        let _ = writeln!(s, "augment={}", self.augment);
        let _ = writeln!(s, "# optimizer");
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "eps={}", self.eps);
        let _ = writeln!(s, "# stage1");
        let _ = writeln!(s, "stage1_epochs={}", self.stage1_epochs);
        let _ = writeln!(s, "stage1_batch={}", self.stage1_batch);
        let _ = writeln!(s, "# stage2");
        let _ = writeln!(s, "stage2_epochs={}", self.stage2_epochs);
        let _ = writeln!(s, "stage2_batch={}", self.stage2_batch);
        let _ = writeln!(s, "lambda_route={}", self.lambda_route);
        let _ = writeln!(s, "lambda_reg={}", self.lambda_reg);
        let _ = writeln!(s, "p_fuse={}", self.p_fuse);
        let _ = writeln!(s, "# eval");
        let _ = writeln!(s, "eval_threshold={}", self.eval_threshold);
        s
    }

    /// FNV-1a over the resolved text; stored in checkpoints to bind them
    /// to the configuration that produced them.
    pub fn hash(&self) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for b in self.resolved_text().bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        h
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.resolved_text())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
