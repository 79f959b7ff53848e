//! Two-stage training orchestration.
//!
//! Stage 1 (branch specialization): one adapter branch and a throwaway
//! head receive gradients from single-generator data; everything else is
//! frozen and verified frozen by bit-hash.
//!
//! Stage 2 (router alignment): branches freeze, a fresh head and the
//! shared router train on the mixed stream with
//! total = L_cls + λ_route·L_route + λ_reg·L_reg, where fake pairs fuse
//! with probability p_fuse and fused routing targets interpolate the two
//! generator identities.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::backbone;
use crate::config::RunConfig;
use crate::data::{augment, genmix, normalize, AugmentationConfig, Dataset, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::head::one_hot_labels;
use crate::metrics::{self, evaluate, MetricsReport, ScoredSet};
use crate::model::{ForwardMode, Model};
use crate::numeric::gradcheck::{finite_diff_gradcheck, GradcheckOptions, GradcheckReport};
use crate::numeric::optim::{adamw_step, AdamWParams, OptimState};
use crate::numeric::params::ParamStore;
use crate::numeric::rng::{derive_seed, DetRng};
use crate::numeric::tape::Tape;
use crate::numeric::tensor::Tensor;
use crate::router::{routing_target, ROUTER_NAMES};

const WARMUP_TAG: u64 = 0x11;
const S1_SHUFFLE_TAG: u64 = 0x21;
const S1_AUG_TAG: u64 = 0x22;
const S2_SHUFFLE_TAG: u64 = 0x31;
const S2_AUG_TAG: u64 = 0x32;
const S2_FUSE_TAG: u64 = 0x33;
const HEAD_TAG: u64 = 0x41;
const ROUTER_TAG: u64 = 0x42;
const BRANCH_TAG: u64 = 0x43;
const EXTEND_TAG: u64 = 0x52;

#[derive(Clone, Debug)]
pub struct Stage1Config {
    pub generator: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWParams,
    pub augment: Option<AugmentationConfig>,
}

impl Stage1Config {
    pub fn from_run(cfg: &RunConfig, generator: &str) -> Self {
        Stage1Config {
            generator: generator.to_string(),
            epochs: cfg.stage1_epochs,
            batch_size: cfg.stage1_batch,
            optim: cfg.optimizer(),
            augment: cfg.augmentation(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AblationFlags {
    pub no_router: bool,
    pub no_route_loss: bool,
    pub no_fusion: bool,
    pub joint_single_stage: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.no_router && !self.no_route_loss {
            return Err(Error::Config(
                "no_router without no_route_loss is contradictory: there is no router output to supervise"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWParams,
    pub lambda_route: f64,
    pub lambda_reg: f64,
    pub p_fuse: f64,
    pub augment: Option<AugmentationConfig>,
    /// Stage 2 normally trains a fresh head; extension continues it.
    pub reinit_head: bool,
    pub flags: AblationFlags,
}

impl Stage2Config {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Stage2Config {
            epochs: cfg.stage2_epochs,
            batch_size: cfg.stage2_batch,
            optim: cfg.optimizer(),
            lambda_route: cfg.lambda_route,
            lambda_reg: cfg.lambda_reg,
            p_fuse: cfg.p_fuse,
            augment: cfg.augmentation(),
            reinit_head: true,
            flags: AblationFlags::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_cls: f64,
    pub l_route: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Batches whose routing loss had every sample masked out.
    pub no_signal_batches: usize,
}

impl TrainLog {
    fn push(&mut self, record: StepRecord) -> Result<()> {
        if !(record.l_cls.is_finite()
            && record.l_route.is_finite()
            && record.l_reg.is_finite()
            && record.total.is_finite())
        {
            return Err(Error::Training {
                step: record.step,
                msg: format!("non-finite loss: {record:?}"),
            });
        }
        self.steps.push(record);
        Ok(())
    }

    pub fn epoch_mean_total(&self, epoch: usize) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0);
        for s in self.steps.iter().filter(|s| s.epoch == epoch) {
            sum += s.total;
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn last_epoch(&self) -> usize {
        self.steps.last().map(|s| s.epoch).unwrap_or(0)
    }

    /// One JSON object per step.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(
                &serde_json::to_string(s)
                    .map_err(|e| Error::Data(format!("log serialization failed: {e}")))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn prepare_image(
    sample: &Sample,
    aug: &Option<AugmentationConfig>,
    seed: u64,
) -> Result<Tensor<f32>> {
    let staged = match aug {
        Some(cfg) => augment(&sample.image, cfg, seed)?,
        None => sample.image.clone(),
    };
    normalize(&staged)
}

/// Brief self-supervised warmup so the frozen features are non-degenerate:
/// the encoder reconstructs its own (normalized) input patches through a
/// throwaway linear decoder, then every backbone tensor freezes for good.
pub fn warmup_backbone(model: &mut Model<f32>, epochs: usize, seed: u64) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    let vit = model.cfg.vit.clone();
    let patch_dim = vit.patch_dim();
    let d = vit.embed_dim;
    let n_images = 256;
    let batch = 16;

    let mut rng = DetRng::new(derive_seed(seed, &[WARMUP_TAG]));
    let dec_w: Vec<f32> = (0..d * patch_dim)
        .map(|_| (rng.trunc_normal(backbone::INIT_STD, 2.0)) as f32)
        .collect();
    model
        .store
        .insert("warmup.dec.w", Tensor::new(vec![d, patch_dim], dec_w)?, true)?;
    model
        .store
        .insert("warmup.dec.b", Tensor::zeros(&[1, patch_dim]), true)?;
    model.store.unfreeze_prefix("backbone.");

    let images: Vec<Tensor<f32>> = (0..n_images)
        .map(|i| {
            let s = derive_seed(seed, &[WARMUP_TAG, 1, i as u64]);
            normalize(&crate::data::make_real(s, vit.channels, vit.image_size))
        })
        .collect::<Result<_>>()?;

    let mut optim = OptimState::new(AdamWParams {
        lr: 1e-3,
        weight_decay: 0.0,
        ..AdamWParams::default()
    });
    for _epoch in 0..epochs {
        for chunk in images.chunks(batch) {
            let mut tape = Tape::new();
            let leaves = model.store.stage_all(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for img in chunk {
                let tokens = backbone::tokenize_on_tape(&mut tape, &leaves, &vit, img)?;
                let encoded = backbone::encode_on_tape(
                    &mut tape,
                    &leaves,
                    &vit,
                    &mut backbone::NoInjection,
                    tokens,
                )?;
                let patch_tokens = tape.slice_rows(encoded, 1, vit.tokens() - 1)?;
                let w = leaves.node("warmup.dec.w")?;
                let b = leaves.node("warmup.dec.b")?;
                let recon = tape.matmul(patch_tokens, w)?;
                let recon = tape.add_row(recon, b)?;
                let target = backbone::extract_patches(&vit, img)?;
                losses.push(tape.mse(recon, target)?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let total = tape.scale(total, 1.0 / losses.len() as f32);
            tape.backward(total)?;
            model.store.zero_grads();
            model.store.harvest_grads(&tape, &leaves)?;
            adamw_step(&mut model.store, &mut optim)?;
        }
    }

    model.store.remove("warmup.dec.w")?;
    model.store.remove("warmup.dec.b")?;
    model.store.freeze_all();
    Ok(())
}

/// Backbone init plus warmup, returning a model with no branches, router
/// or head. Clones of this are the starting point for every run.
pub fn build_base_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let mut model = Model::new(cfg.to_model_config()?)?;
    model.init_backbone(cfg.backbone_seed)?;
    warmup_backbone(&mut model, cfg.warmup_epochs, cfg.backbone_seed)?;
    model.config_hash = cfg.hash();
    Ok(model)
}

pub fn clone_model(model: &Model<f32>) -> Model<f32> {
    Model {
        cfg: model.cfg.clone(),
        store: model.store.convert::<f32>(),
        generators: model.generators.clone(),
        has_router: model.has_router,
        config_hash: model.config_hash,
    }
}

/// Generator-specific specialization: only the named branch and the
/// (temporary) head receive updates.
pub fn train_stage1(
    model: &mut Model<f32>,
    data: &[Sample],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<TrainLog> {
    let branch_idx = model
        .generators
        .iter()
        .position(|g| *g == cfg.generator)
        .ok_or_else(|| Error::Registry(format!("model has no branch '{}'", cfg.generator)))?;
    if data.is_empty() {
        return Err(Error::Data("stage-1 dataset is empty".into()));
    }
    let mut fake_gens: Vec<usize> = data
        .iter()
        .filter(|s| s.label == 1)
        .map(|s| s.generator)
        .collect();
    fake_gens.sort_unstable();
    fake_gens.dedup();
    if fake_gens.len() > 1 {
        return Err(Error::Data(format!(
            "stage-1 data must come from one generator family, found ids {fake_gens:?}"
        )));
    }

    model.store.freeze_all();
    model
        .store
        .unfreeze_prefix(&format!("lora.{}.", cfg.generator));
    model.store.unfreeze_prefix("head.");

    let mut optim = OptimState::new(cfg.optim);
    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = DetRng::new(derive_seed(seed, &[S1_SHUFFLE_TAG, epoch as u64]));
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for (i, &idx) in chunk.iter().enumerate() {
                let aug_seed = derive_seed(seed, &[S1_AUG_TAG, epoch as u64, step, i as u64]);
                images.push(prepare_image(&data[idx], &cfg.augment, aug_seed)?);
                labels.push(data[idx].label);
            }
            let mut tape = Tape::new();
            let fwd =
                model.forward_batch(&mut tape, &images, ForwardMode::SingleBranch(branch_idx))?;
            let targets = one_hot_labels::<f32>(&labels)?;
            let loss = tape.cross_entropy_soft(fwd.probs, targets)?;
            tape.backward(loss)?;
            model.store.zero_grads();
            model.store.harvest_grads(&tape, &fwd.leaves)?;
            adamw_step(&mut model.store, &mut optim)?;

            step += 1;
            let l_cls = tape.scalar_value(loss) as f64;
            log.push(StepRecord {
                step,
                epoch,
                l_cls,
                l_route: 0.0,
                l_reg: 0.0,
                total: l_cls,
            })?;
        }
    }
    model.store.freeze_all();
    Ok(log)
}

/// Indices of fake samples grouped by generator id.
fn fake_pool(data: &[Sample]) -> Vec<Vec<usize>> {
    let max_gen = data.iter().map(|s| s.generator).max().unwrap_or(0);
    let mut pool = vec![Vec::new(); max_gen + 1];
    for (i, s) in data.iter().enumerate() {
        if s.label == 1 {
            pool[s.generator].push(i);
        }
    }
    pool
}

struct MixedLoop {
    epochs: usize,
    batch_size: usize,
    optim: AdamWParams,
    lambda_route: f64,
    lambda_reg: f64,
    p_fuse: f64,
    augment: Option<AugmentationConfig>,
    use_route_loss: bool,
    train_branches: bool,
    train_router: bool,
}

/// The mixed-data loop shared by stage 2 and the joint ablation
/// baselines. The trainable set is fixed by the caller before entry.
fn mixed_training_loop(
    model: &mut Model<f32>,
    data: &[Sample],
    lp: &MixedLoop,
    seed: u64,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let k = model.k();
    let pool = fake_pool(data);
    let multi_gen = pool.iter().skip(1).filter(|p| !p.is_empty()).count() > 1;
    let fusing = lp.p_fuse > 0.0 && multi_gen;

    model.store.freeze_all();
    if lp.train_branches {
        model.store.unfreeze_prefix("lora.");
    }
    if lp.train_router {
        model.store.unfreeze_prefix("router.");
    }
    model.store.unfreeze_prefix("head.");

    let mut optim = OptimState::new(lp.optim);
    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    for epoch in 0..lp.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = DetRng::new(derive_seed(seed, &[S2_SHUFFLE_TAG, epoch as u64]));
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(lp.batch_size) {
            let mut fuse_rng =
                DetRng::new(derive_seed(seed, &[S2_FUSE_TAG, epoch as u64, step]));
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            let mut route_targets = Vec::with_capacity(chunk.len());
            for (i, &idx) in chunk.iter().enumerate() {
                let mut sample = data[idx].clone();
                if fusing && sample.label == 1 && fuse_rng.bernoulli(lp.p_fuse) {
                    let other_gens: Vec<usize> = (1..pool.len())
                        .filter(|&g| g != sample.generator && !pool[g].is_empty())
                        .collect();
                    if !other_gens.is_empty() {
                        let g = other_gens[fuse_rng.index(other_gens.len())];
                        let partner = &data[pool[g][fuse_rng.index(pool[g].len())]];
                        let lambda = fuse_rng.next_f32();
                        sample = genmix(&sample, partner, lambda)?;
                    }
                }
                let aug_seed = derive_seed(seed, &[S2_AUG_TAG, epoch as u64, step, i as u64]);
                images.push(prepare_image(&sample, &lp.augment, aug_seed)?);
                labels.push(sample.label);
                if lp.use_route_loss {
                    let fusion = sample.fusion.map(|f| (f.a, f.b, f.lambda as f64));
                    route_targets.push(routing_target(sample.generator, fusion, k)?);
                }
            }

            let mut tape = Tape::new();
            let fwd = model.forward_batch(&mut tape, &images, ForwardMode::Routed)?;
            let targets = one_hot_labels::<f32>(&labels)?;
            let cls_node = tape.cross_entropy_soft(fwd.probs, targets)?;

            // every routing decision of a masked-in sample shares its target
            let route_node = if !lp.use_route_loss {
                None
            } else {
                let mut pi_nodes = Vec::new();
                let mut target_rows: Vec<Vec<f32>> = Vec::new();
                for (i, (target, mask)) in route_targets.iter().enumerate() {
                    if !mask {
                        continue;
                    }
                    for &pi in &fwd.pis[i] {
                        pi_nodes.push(pi);
                        target_rows.push(target.0.iter().map(|&v| v as f32).collect());
                    }
                }
                if pi_nodes.is_empty() {
                    log.no_signal_batches += 1;
                    None
                } else {
                    let pis = tape.concat_rows(&pi_nodes)?;
                    let t = Tensor::from_rows(&target_rows)?;
                    Some(tape.cross_entropy_soft(pis, t)?)
                }
            };

            let reg_node = if !lp.train_router {
                None
            } else {
                let mut acc = None;
                for name in ROUTER_NAMES {
                    let leaf = fwd.leaves.node(name)?;
                    let term = tape.l1(leaf);
                    acc = Some(match acc {
                        None => term,
                        Some(prev) => tape.add(prev, term)?,
                    });
                }
                acc
            };

            let mut total_node = cls_node;
            if let Some(r) = route_node {
                let scaled = tape.scale(r, lp.lambda_route as f32);
                total_node = tape.add(total_node, scaled)?;
            }
            if let Some(g) = reg_node {
                let scaled = tape.scale(g, lp.lambda_reg as f32);
                total_node = tape.add(total_node, scaled)?;
            }
            tape.backward(total_node)?;
            model.store.zero_grads();
            model.store.harvest_grads(&tape, &fwd.leaves)?;
            adamw_step(&mut model.store, &mut optim)?;

            step += 1;
            let l_cls = tape.scalar_value(cls_node) as f64;
            let l_route = route_node
                .map(|n| tape.scalar_value(n) as f64)
                .unwrap_or(0.0);
            let l_reg = reg_node.map(|n| tape.scalar_value(n) as f64).unwrap_or(0.0);
            log.push(StepRecord {
                step,
                epoch,
                l_cls,
                l_route,
                l_reg,
                total: l_cls + lp.lambda_route * l_route + lp.lambda_reg * l_reg,
            })?;
        }
    }
    model.store.freeze_all();
    if log.no_signal_batches > 0 {
        let _ = writeln!(
            std::io::stderr(),
            "warning: {} batches carried no routing signal",
            log.no_signal_batches
        );
    }
    Ok(log)
}

/// Router alignment on the mixed stream. Branches and backbone stay
/// bit-frozen; only router (unless ablated away) and head train.
pub fn train_stage2(
    model: &mut Model<f32>,
    data: &[Sample],
    cfg: &Stage2Config,
    seed: u64,
) -> Result<TrainLog> {
    cfg.flags.validate()?;
    if model.k() == 0 {
        return Err(Error::Config("stage 2 needs a populated hub".into()));
    }
    if cfg.flags.no_router {
        if model.has_router {
            return Err(Error::Config(
                "no_router ablation expects a model built without a router".into(),
            ));
        }
    } else {
        if !model.has_router {
            return Err(Error::Config("stage 2 needs a router".into()));
        }
        model.check_router_width()?;
    }
    if cfg.reinit_head {
        model.reinit_head(derive_seed(seed, &[HEAD_TAG]))?;
    }
    let lp = MixedLoop {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optim: cfg.optim,
        lambda_route: cfg.lambda_route,
        lambda_reg: cfg.lambda_reg,
        p_fuse: if cfg.flags.no_fusion { 0.0 } else { cfg.p_fuse },
        augment: cfg.augment.clone(),
        use_route_loss: !cfg.flags.no_route_loss,
        train_branches: false,
        train_router: !cfg.flags.no_router,
    };
    mixed_training_loop(model, data, &lp, seed)
}

/// Joint single-stage training for ablation baselines: branches, head,
/// and (when present) the router learn together on mixed data.
#[derive(Clone, Debug)]
pub struct JointConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWParams,
    pub use_route_loss: bool,
    pub lambda_route: f64,
    pub lambda_reg: f64,
    pub p_fuse: f64,
    pub augment: Option<AugmentationConfig>,
}

pub fn train_joint(
    model: &mut Model<f32>,
    data: &[Sample],
    cfg: &JointConfig,
    seed: u64,
) -> Result<TrainLog> {
    if model.k() == 0 {
        return Err(Error::Config("joint training needs at least one branch".into()));
    }
    if cfg.use_route_loss && !model.has_router {
        return Err(Error::Config("routing supervision needs a router".into()));
    }
    let lp = MixedLoop {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optim: cfg.optim,
        lambda_route: cfg.lambda_route,
        lambda_reg: cfg.lambda_reg,
        p_fuse: cfg.p_fuse,
        augment: cfg.augment.clone(),
        use_route_loss: cfg.use_route_loss,
        train_branches: true,
        train_router: model.has_router,
    };
    mixed_training_loop(model, data, &lp, seed)
}

/// Everything a full in-process run produces.
pub struct PipelineRun {
    pub model: Model<f32>,
    pub stage1_logs: Vec<(String, TrainLog)>,
    pub stage2_log: TrainLog,
}

/// Full pipeline in process: stage 1 per generator, then assembly and
/// stage 2. Used by ablations and acceptance runs.
pub fn run_full_pipeline(
    run_cfg: &RunConfig,
    ds: &Dataset,
    seed: u64,
    base: &Model<f32>,
) -> Result<PipelineRun> {
    let names = ds.generator_names();
    let mut trained_branches: Vec<(String, ParamStore<f32>)> = Vec::new();
    let mut stage1_logs = Vec::new();
    for (gi, name) in names.iter().enumerate() {
        let mut m = clone_model(base);
        m.add_branch(name, derive_seed(seed, &[BRANCH_TAG, gi as u64]))?;
        m.init_head(derive_seed(seed, &[HEAD_TAG, gi as u64]))?;
        let cfg = Stage1Config::from_run(run_cfg, name);
        let log = train_stage1(
            &mut m,
            &ds.stage1_subset(gi + 1),
            &cfg,
            derive_seed(seed, &[gi as u64]),
        )?;
        stage1_logs.push((name.clone(), log));
        trained_branches.push((name.clone(), m.store));
    }

    let mut model = clone_model(base);
    for (name, store) in &trained_branches {
        model.add_branch(name, 0)?;
        let hub = model.hub();
        for tensor_name in hub.branch_names(name) {
            let trained = store.tensor(&tensor_name)?.clone();
            model.store.replace_tensor(&tensor_name, trained)?;
        }
    }
    model.init_router(derive_seed(seed, &[ROUTER_TAG]))?;
    model.init_head(derive_seed(seed, &[HEAD_TAG, 99]))?;
    let cfg = Stage2Config::from_run(run_cfg);
    let stage2_log = train_stage2(&mut model, &ds.train, &cfg, seed)?;
    Ok(PipelineRun {
        model,
        stage1_logs,
        stage2_log,
    })
}

/// Add one generator to a trained model: specialize the new branch
/// (stage 1 against a snapshot-restored head), widen the router with a
/// zero column, and re-run stage 2 on the mixed data.
pub fn extend_with_generator(
    model: &mut Model<f32>,
    ds: &Dataset,
    new_generator: &str,
    run_cfg: &RunConfig,
    seed: u64,
) -> Result<(TrainLog, TrainLog)> {
    let names = ds.generator_names();
    let new_idx = names
        .iter()
        .position(|n| n == new_generator)
        .ok_or_else(|| Error::Registry(format!("dataset has no generator '{new_generator}'")))?;
    if model.generators.iter().any(|g| g == new_generator) {
        return Err(Error::Registry(format!(
            "model already has a branch '{new_generator}'"
        )));
    }
    if names[..model.k()] != model.generators[..] {
        return Err(Error::Config(format!(
            "dataset registry {names:?} does not extend model registry {:?}",
            model.generators
        )));
    }

    // snapshot the trained head; stage 1 trains a throwaway one
    let head_snapshot: Vec<(String, Tensor<f32>)> = crate::head::HEAD_NAMES
        .iter()
        .map(|n| Ok((n.to_string(), model.store.tensor(n)?.clone())))
        .collect::<Result<_>>()?;

    model.add_branch(
        new_generator,
        derive_seed(seed, &[BRANCH_TAG, new_idx as u64]),
    )?;
    let s1 = Stage1Config::from_run(run_cfg, new_generator);
    let log1 = train_stage1(
        model,
        &ds.stage1_subset(new_idx + 1),
        &s1,
        derive_seed(seed, &[new_idx as u64]),
    )?;
    for (name, tensor) in head_snapshot {
        model.store.replace_tensor(&name, tensor)?;
    }

    let new_k = model.k();
    crate::router::redimension_router(&mut model.store, new_k)?;
    let mut s2 = Stage2Config::from_run(run_cfg);
    s2.reinit_head = false;
    let log2 = train_stage2(model, &ds.train, &s2, derive_seed(seed, &[EXTEND_TAG]))?;
    Ok((log1, log2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    /// One shared adapter, no router, joint training.
    SingleLora,
    /// Per-generator branches, uniform composition, joint training.
    Hub,
    /// Branches + learned router, no routing supervision, joint training.
    HubRouter,
    /// Branches + router + routing loss, still single-stage.
    HubRouterLoss,
    /// The full two-stage protocol.
    Full,
    /// Full, with train-time augmentation disabled.
    NoAugment,
    /// Full, with fake-fake fusion disabled.
    NoFusion,
    /// Full, with both disabled.
    NoBoth,
}

impl AblationVariant {
    pub fn tag(self) -> &'static str {
        match self {
            AblationVariant::SingleLora => "single_lora",
            AblationVariant::Hub => "hub",
            AblationVariant::HubRouter => "hub_router",
            AblationVariant::HubRouterLoss => "hub_router_loss",
            AblationVariant::Full => "full",
            AblationVariant::NoAugment => "no_augment",
            AblationVariant::NoFusion => "no_fusion",
            AblationVariant::NoBoth => "no_both",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        Ok(match s {
            "single_lora" => AblationVariant::SingleLora,
            "hub" => AblationVariant::Hub,
            "hub_router" => AblationVariant::HubRouter,
            "hub_router_loss" => AblationVariant::HubRouterLoss,
            "full" => AblationVariant::Full,
            "no_augment" => AblationVariant::NoAugment,
            "no_fusion" => AblationVariant::NoFusion,
            "no_both" => AblationVariant::NoBoth,
            other => return Err(Error::Usage(format!("unknown ablation variant '{other}'"))),
        })
    }

    /// Core design comparison: single adapter → hub → router → routing
    /// supervision → full two-stage.
    pub const CORE_SUITE: [AblationVariant; 5] = [
        AblationVariant::SingleLora,
        AblationVariant::Hub,
        AblationVariant::HubRouter,
        AblationVariant::HubRouterLoss,
        AblationVariant::Full,
    ];

    /// Training/data strategy comparison.
    pub const DATA_SUITE: [AblationVariant; 4] = [
        AblationVariant::NoBoth,
        AblationVariant::NoAugment,
        AblationVariant::NoFusion,
        AblationVariant::Full,
    ];
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub acc: f64,
    pub ap: f64,
    pub auc: f64,
    pub eer: f64,
}

fn joint_epochs(run_cfg: &RunConfig) -> usize {
    run_cfg.stage1_epochs + run_cfg.stage2_epochs
}

/// Train one ablation variant and evaluate it on the dataset's test split.
pub fn run_variant(
    run_cfg: &RunConfig,
    ds: &Dataset,
    base: &Model<f32>,
    variant: AblationVariant,
    seed: u64,
) -> Result<MetricsReport> {
    let model = match variant {
        AblationVariant::Full => run_full_pipeline(run_cfg, ds, seed, base)?.model,
        AblationVariant::NoAugment => {
            let mut cfg = run_cfg.clone();
            cfg.augment = false;
            run_full_pipeline(&cfg, ds, seed, base)?.model
        }
        AblationVariant::NoFusion => {
            let mut cfg = run_cfg.clone();
            cfg.p_fuse = 0.0;
            run_full_pipeline(&cfg, ds, seed, base)?.model
        }
        AblationVariant::NoBoth => {
            let mut cfg = run_cfg.clone();
            cfg.augment = false;
            cfg.p_fuse = 0.0;
            run_full_pipeline(&cfg, ds, seed, base)?.model
        }
        AblationVariant::SingleLora => {
            let mut m = clone_model(base);
            m.add_branch("shared", derive_seed(seed, &[BRANCH_TAG]))?;
            m.init_head(derive_seed(seed, &[HEAD_TAG]))?;
            let cfg = JointConfig {
                epochs: joint_epochs(run_cfg),
                batch_size: run_cfg.stage2_batch,
                optim: run_cfg.optimizer(),
                use_route_loss: false,
                lambda_route: 0.0,
                lambda_reg: 0.0,
                p_fuse: 0.0,
                augment: run_cfg.augmentation(),
            };
            train_joint(&mut m, &ds.train, &cfg, seed)?;
            m
        }
        AblationVariant::Hub | AblationVariant::HubRouter | AblationVariant::HubRouterLoss => {
            let mut m = clone_model(base);
            for (gi, name) in ds.generator_names().iter().enumerate() {
                m.add_branch(name, derive_seed(seed, &[BRANCH_TAG, gi as u64]))?;
            }
            if variant != AblationVariant::Hub {
                m.init_router(derive_seed(seed, &[ROUTER_TAG]))?;
            }
            m.init_head(derive_seed(seed, &[HEAD_TAG]))?;
            let cfg = JointConfig {
                epochs: joint_epochs(run_cfg),
                batch_size: run_cfg.stage2_batch,
                optim: run_cfg.optimizer(),
                use_route_loss: variant == AblationVariant::HubRouterLoss,
                lambda_route: run_cfg.lambda_route,
                lambda_reg: run_cfg.lambda_reg,
                p_fuse: run_cfg.p_fuse,
                augment: run_cfg.augmentation(),
            };
            train_joint(&mut m, &ds.train, &cfg, seed)?;
            m
        }
    };
    evaluate(&model, &ds.test)
}

/// One metrics row per variant per seed.
pub fn run_ablation(
    run_cfg: &RunConfig,
    ds: &Dataset,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs variants and seeds".into()));
    }
    let base = build_base_model(run_cfg)?;
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let report = run_variant(run_cfg, ds, &base, variant, seed)?;
            rows.push(AblationRow {
                variant: variant.tag().to_string(),
                seed,
                acc: report.acc,
                ap: report.ap,
                auc: report.auc,
                eer: report.eer,
            });
        }
    }
    Ok(rows)
}

/// Branch-count sweep: the pipeline trains with the first K generators'
/// data while the full mixed test split stays fixed.
pub fn run_k_sweep(
    run_cfg: &RunConfig,
    ds: &Dataset,
    ks: &[usize],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs branch counts and seeds".into()));
    }
    let base = build_base_model(run_cfg)?;
    let mut rows = Vec::new();
    for &k in ks {
        if k == 0 || k > ds.k() {
            return Err(Error::Config(format!("sweep k={k} outside 1..={}", ds.k())));
        }
        let restricted = Dataset {
            spec: DatasetSpec {
                generators: ds.spec.generators[..k].to_vec(),
                ..ds.spec.clone()
            },
            train: ds
                .train
                .iter()
                .filter(|s| s.generator <= k)
                .cloned()
                .collect(),
            test: ds.test.clone(),
        };
        for &seed in seeds {
            let model = run_full_pipeline(run_cfg, &restricted, seed, &base)?.model;
            let report = score_only(&model, &ds.test)?;
            rows.push(AblationRow {
                variant: format!("k={k}"),
                seed,
                acc: report.acc,
                ap: report.ap,
                auc: report.auc,
                eer: report.eer,
            });
        }
    }
    Ok(rows)
}

/// Metrics without per-generator breakdowns, for test splits containing
/// generators the model has no branch for.
fn score_only(model: &Model<f32>, test: &[Sample]) -> Result<MetricsReport> {
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for s in test {
        let normalized = normalize(&s.image)?;
        let pred = model.predict(&normalized)?;
        scores.push(pred.fake_prob);
        labels.push(s.label);
    }
    let set = ScoredSet::new(scores, labels)?;
    Ok(MetricsReport {
        acc: metrics::accuracy(&set, 0.5)?,
        ap: metrics::average_precision(&set)?,
        auc: metrics::roc_auc(&set)?,
        eer: metrics::eer(&set)?,
        threshold: 0.5,
        n_real: set.negatives(),
        n_fake: set.positives(),
        per_generator: Default::default(),
        router_means: Default::default(),
    })
}

/// Stage-loss gradient checks on a small configuration, run in 64-bit.
pub struct StageGradchecks {
    pub stage1: GradcheckReport,
    pub stage2: GradcheckReport,
}

pub fn gradcheck_stage_losses(run_cfg: &RunConfig, seed: u64) -> Result<StageGradchecks> {
    let mut model32: Model<f32> = Model::new(run_cfg.to_model_config()?)?;
    model32.init_backbone(run_cfg.backbone_seed)?;
    model32.add_branch("gen1", derive_seed(seed, &[BRANCH_TAG, 0]))?;
    model32.add_branch("gen2", derive_seed(seed, &[BRANCH_TAG, 1]))?;
    model32.init_router(derive_seed(seed, &[ROUTER_TAG]))?;
    model32.init_head(derive_seed(seed, &[HEAD_TAG]))?;

    let mut model = model32.convert::<f64>();
    // B starts at zero, which zeroes every A gradient; give the branches
    // real values so the check exercises both factors
    let hub = model.hub();
    let mut rng = DetRng::new(derive_seed(seed, &[0x99]));
    for gen in model.generators.clone() {
        for (l, p) in hub.slots().collect::<Vec<_>>() {
            let name = hub.b_name(&gen, l, p);
            let shape = model.store.tensor(&name)?.shape().to_vec();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.normal() * 0.02)
                .collect();
            model.store.replace_tensor(&name, Tensor::new(shape, data)?)?;
        }
    }

    let vit = model.cfg.vit.clone();
    let gens = crate::data::default_generators(2, run_cfg.fingerprint_amplitude as f32)?;
    let real = normalize(&crate::data::make_real(
        derive_seed(seed, &[1]),
        vit.channels,
        vit.image_size,
    ))?
    .convert::<f64>();
    let fake_a = Sample {
        image: crate::data::apply_fingerprint(
            &crate::data::make_real(derive_seed(seed, &[2]), vit.channels, vit.image_size),
            &gens[0].1,
        )?,
        label: 1,
        generator: 1,
        fusion: None,
    };
    let fake_b = Sample {
        image: crate::data::apply_fingerprint(
            &crate::data::make_real(derive_seed(seed, &[3]), vit.channels, vit.image_size),
            &gens[1].1,
        )?,
        label: 1,
        generator: 2,
        fusion: None,
    };
    let fused = genmix(&fake_a, &fake_b, 0.25)?;
    let fused_info = fused.fusion.unwrap();
    let fused_img = normalize(&fused.image)?.convert::<f64>();
    let plain_fake = normalize(&fake_a.image)?.convert::<f64>();

    // (a) stage-1 loss w.r.t. one branch + temp head
    model.store.freeze_all();
    model.store.unfreeze_prefix("lora.gen1.");
    model.store.unfreeze_prefix("head.");
    let images1 = vec![real.clone(), plain_fake];
    let labels1 = [0u8, 1u8];
    let cfg1 = model.cfg.clone();
    let gens1 = model.generators.clone();
    let stage1 = finite_diff_gradcheck(
        &mut model.store,
        &GradcheckOptions::default(),
        |store, with_grad| {
            let probe = Model {
                cfg: cfg1.clone(),
                store: store.convert::<f64>(),
                generators: gens1.clone(),
                has_router: true,
                config_hash: 0,
            };
            let mut tape = Tape::new();
            let fwd = probe.forward_batch(&mut tape, &images1, ForwardMode::SingleBranch(0))?;
            let targets = one_hot_labels::<f64>(&labels1)?;
            let loss = tape.cross_entropy_soft(fwd.probs, targets)?;
            if with_grad {
                tape.backward(loss)?;
                store.harvest_grads(&tape, &fwd.leaves)?;
            }
            Ok(tape.scalar_value(loss))
        },
    )?;

    // (b) full stage-2 objective w.r.t. router + head
    model.store.freeze_all();
    model.store.unfreeze_prefix("router.");
    model.store.unfreeze_prefix("head.");
    let images2 = vec![real, fused_img];
    let labels2 = [0u8, 1u8];
    let (fused_target, _) = routing_target(
        0,
        Some((fused_info.a, fused_info.b, fused_info.lambda as f64)),
        2,
    )?;
    let target2 = fused_target.0;
    let (lambda_route, lambda_reg) = (run_cfg.lambda_route, run_cfg.lambda_reg);
    let cfg2 = model.cfg.clone();
    let gens2 = model.generators.clone();
    let stage2 = finite_diff_gradcheck(
        &mut model.store,
        &GradcheckOptions::default(),
        |store, with_grad| {
            let probe = Model {
                cfg: cfg2.clone(),
                store: store.convert::<f64>(),
                generators: gens2.clone(),
                has_router: true,
                config_hash: 0,
            };
            let mut tape = Tape::new();
            let fwd = probe.forward_batch(&mut tape, &images2, ForwardMode::Routed)?;
            let targets = one_hot_labels::<f64>(&labels2)?;
            let cls = tape.cross_entropy_soft(fwd.probs, targets)?;
            // only the fused sample contributes routing supervision
            let pis = tape.concat_rows(&fwd.pis[1])?;
            let trows: Vec<Vec<f64>> = fwd.pis[1].iter().map(|_| target2.clone()).collect();
            let route = tape.cross_entropy_soft(pis, Tensor::from_rows(&trows)?)?;
            let mut reg = None;
            for name in ROUTER_NAMES {
                let leaf = fwd.leaves.node(name)?;
                let term = tape.l1(leaf);
                reg = Some(match reg {
                    None => term,
                    Some(prev) => tape.add(prev, term)?,
                });
            }
            let reg = reg.expect("router present");
            let route_scaled = tape.scale(route, lambda_route);
            let reg_scaled = tape.scale(reg, lambda_reg);
            let mut total = tape.add(cls, route_scaled)?;
            total = tape.add(total, reg_scaled)?;
            if with_grad {
                tape.backward(total)?;
                store.harvest_grads(&tape, &fwd.leaves)?;
            }
            Ok(tape.scalar_value(total))
        },
    )?;

    Ok(StageGradchecks { stage1, stage2 })
}
