//! Assembles backbone, adapter hub, router and head into one model with a
//! single differentiable forward path. Training, evaluation and inference
//! all run the same tape program; evaluation simply never calls backward.

use crate::backbone::{self, Proj, ViTConfig};
use crate::error::{Error, Result};
use crate::head::{self, HeadKind};
use crate::lora::{self, BranchInjector, LoraHub, PiSource, RoutedInjector};
use crate::numeric::params::{LeafMap, ParamStore};
use crate::numeric::scalar::Scalar;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::tensor::Tensor;
use crate::router;

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub rank: usize,
    pub alpha: f64,
    pub lora_targets: Vec<Proj>,
    pub router_hidden: usize,
    pub route_per_layer: bool,
    pub head: HeadKind,
    pub backbone_seed: u64,
    pub warmup_epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: ViTConfig::default(),
            rank: 4,
            alpha: 8.0,
            lora_targets: vec![Proj::Q, Proj::V],
            router_hidden: 128,
            // per-layer routing: pooled raw patch embeddings are linear in
            // the pixels, so block-averaging fingerprints cancel out of the
            // layer-0 descriptor exactly; deeper descriptors are past a
            // nonlinearity and can carry them
            route_per_layer: true,
            head: HeadKind::AttnPool,
            backbone_seed: 17,
            warmup_epochs: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.rank == 0 || self.rank > self.vit.embed_dim {
            return Err(Error::Config(format!(
                "rank {} must be in 1..={}",
                self.rank, self.vit.embed_dim
            )));
        }
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if self.router_hidden == 0 {
            return Err(Error::Config("router_hidden must be positive".into()));
        }
        if self.lora_targets.is_empty() {
            return Err(Error::Config("lora_targets must name at least one projection".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Model<E: Scalar = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub generators: Vec<String>,
    pub has_router: bool,
    pub config_hash: u32,
}

/// Which composition the forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum ForwardMode {
    /// Stage 1: exactly one branch active, router ignored.
    SingleBranch(usize),
    /// Routed composition; uniform weights when no router is present.
    Routed,
}

pub struct BatchForward {
    pub leaves: LeafMap,
    /// [B,2] probability rows, fake probability at column 1.
    pub probs: NodeId,
    /// Per sample: every routing decision taken ([1,K] nodes). One entry
    /// per sample unless per-layer routing is enabled. Empty in stage 1.
    pub pis: Vec<Vec<NodeId>>,
}

pub struct Prediction {
    pub fake_prob: f64,
    pub merge_weights: Vec<f64>,
}

impl<E: Scalar> Model<E> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg,
            store: ParamStore::new(),
            generators: Vec::new(),
            has_router: false,
            config_hash: 0,
        })
    }

    pub fn hub(&self) -> LoraHub {
        let mut hub = LoraHub::new(
            self.cfg.rank,
            self.cfg.alpha,
            &self.cfg.lora_targets,
            self.cfg.vit.depth,
        );
        hub.generators = self.generators.clone();
        hub
    }

    pub fn k(&self) -> usize {
        self.generators.len()
    }

    pub fn init_backbone(&mut self, seed: u64) -> Result<()> {
        backbone::init_backbone(&mut self.store, &self.cfg.vit, seed)
    }

    pub fn add_branch(&mut self, name: &str, seed: u64) -> Result<()> {
        let mut hub = self.hub();
        lora::add_branch(&mut self.store, &mut hub, name, self.cfg.vit.embed_dim, seed)?;
        self.generators = hub.generators;
        Ok(())
    }

    pub fn init_router(&mut self, seed: u64) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::Config("cannot initialize a router over zero branches".into()));
        }
        router::init_router(
            &mut self.store,
            self.cfg.vit.embed_dim,
            self.cfg.router_hidden,
            k,
            seed,
        )?;
        self.has_router = true;
        Ok(())
    }

    pub fn init_head(&mut self, seed: u64) -> Result<()> {
        head::init_head(&mut self.store, self.cfg.vit.embed_dim, seed)
    }

    pub fn reinit_head(&mut self, seed: u64) -> Result<()> {
        head::reinit_head(&mut self.store, self.cfg.vit.embed_dim, seed)
    }

    /// Router output width must track the hub size.
    pub fn check_router_width(&self) -> Result<()> {
        if !self.has_router {
            return Ok(());
        }
        let w = self.store.tensor("router.l2.w")?;
        if w.cols() != self.k() {
            return Err(Error::Config(format!(
                "router width {} does not match {} branches",
                w.cols(),
                self.k()
            )));
        }
        Ok(())
    }

    pub fn convert<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.convert(),
            generators: self.generators.clone(),
            has_router: self.has_router,
            config_hash: self.config_hash,
        }
    }

    /// One differentiable forward over a batch of normalized images.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<E>,
        images: &[Tensor<E>],
        mode: ForwardMode,
    ) -> Result<BatchForward> {
        if images.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let leaves = self.store.stage_all(tape);
        let hub = self.hub();
        let vit = &self.cfg.vit;
        let d = vit.embed_dim;

        if let ForwardMode::SingleBranch(idx) = mode {
            if idx >= self.k() {
                return Err(Error::Registry(format!(
                    "branch index {idx} out of range for {} branches",
                    self.k()
                )));
            }
        }
        if matches!(mode, ForwardMode::Routed) {
            if self.k() == 0 {
                return Err(Error::Config("routed forward needs at least one branch".into()));
            }
            self.check_router_width()?;
        }

        // shared uniform-weight constant for router-less composition
        let uniform = if matches!(mode, ForwardMode::Routed) && !self.has_router {
            Some(tape.constant(Tensor::full(&[1, self.k()], E::ONE / E::from_f64(self.k() as f64))))
        } else {
            None
        };

        let mut logit_rows = Vec::with_capacity(images.len());
        let mut pis: Vec<Vec<NodeId>> = Vec::with_capacity(images.len());
        for image in images {
            let tokens0 = backbone::tokenize_on_tape(tape, &leaves, vit, image)?;
            let (encoded, sample_pis) = match mode {
                ForwardMode::SingleBranch(idx) => {
                    let mut inj = BranchInjector {
                        hub: &hub,
                        gen: self.generators[idx].clone(),
                    };
                    let out = backbone::encode_on_tape(tape, &leaves, vit, &mut inj, tokens0)?;
                    (out, Vec::new())
                }
                ForwardMode::Routed => {
                    let source = if let Some(u) = uniform {
                        PiSource::Fixed(u)
                    } else if self.cfg.route_per_layer {
                        PiSource::PerLayer {
                            hidden: self.cfg.router_hidden,
                        }
                    } else {
                        let pooled = tape.mean_rows(tokens0)?;
                        let pi = router::route_on_tape(
                            tape,
                            &leaves,
                            pooled,
                            self.cfg.router_hidden,
                            self.k(),
                        )?;
                        PiSource::Fixed(pi)
                    };
                    let mut inj = RoutedInjector::new(&hub, source);
                    let out = backbone::encode_on_tape(tape, &leaves, vit, &mut inj, tokens0)?;
                    (out, inj.into_seen())
                }
            };
            let feat = head::head_feature_on_tape(tape, &leaves, encoded, d, self.cfg.head)?;
            logit_rows.push(head::classify_logits_on_tape(tape, &leaves, feat)?);
            pis.push(sample_pis);
        }

        let logits = tape.concat_rows(&logit_rows)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(BatchForward { leaves, probs, pis })
    }

    /// Inference on one normalized image: fake probability plus the merge
    /// weights the composition actually used (averaged over routing
    /// decisions when routing is per-layer).
    pub fn predict(&self, image: &Tensor<E>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, std::slice::from_ref(image), ForwardMode::Routed)?;
        let probs = tape.value(fwd.probs);
        let fake_prob = probs.at(0, 1).to_f64();
        let decisions = &fwd.pis[0];
        let merge_weights = if decisions.is_empty() {
            Vec::new()
        } else {
            let k = self.k();
            let mut mean = vec![0.0f64; k];
            for &pi in decisions {
                for (m, v) in mean.iter_mut().zip(tape.value(pi).data()) {
                    *m += v.to_f64();
                }
            }
            for m in mean.iter_mut() {
                *m /= decisions.len() as f64;
            }
            mean
        };
        Ok(Prediction {
            fake_prob,
            merge_weights,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numeric::rng::DetRng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vit: ViTConfig {
                image_size: 16,
                patch_size: 4,
                channels: 3,
                embed_dim: 16,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
            },
            rank: 2,
            alpha: 4.0,
            router_hidden: 12,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_model(k: usize, seed: u64) -> Model<f32> {
        let mut m = Model::new(tiny_config()).unwrap();
        m.init_backbone(seed).unwrap();
        for i in 0..k {
            m.add_branch(&format!("gen{}", i + 1), seed + 10 + i as u64).unwrap();
        }
        if k > 0 {
            m.init_router(seed + 50).unwrap();
        }
        m.init_head(seed + 60).unwrap();
        m
    }

    pub(crate) fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor<f32> {
        let mut rng = DetRng::new(seed);
        let numel = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![cfg.channels, cfg.image_size, cfg.image_size],
            (0..numel).map(|_| rng.next_f32()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn routed_forward_produces_probabilities_and_weights() {
        let m = tiny_model(3, 5);
        let img = random_image(&m.cfg.vit, 1);
        let p = m.predict(&img).unwrap();
        assert!((0.0..=1.0).contains(&p.fake_prob));
        assert_eq!(p.merge_weights.len(), 3);
        let sum: f64 = p.merge_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = tiny_model(2, 6);
        let img = random_image(&m.cfg.vit, 2);
        let a = m.predict(&img).unwrap();
        let b = m.predict(&img).unwrap();
        assert_eq!(a.fake_prob.to_bits(), b.fake_prob.to_bits());
        for (x, y) in a.merge_weights.iter().zip(&b.merge_weights) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fresh_branches_leave_backbone_behavior_unchanged() {
        // B = 0 ⇒ routed forward equals the injection-free encoder pass,
        // so the classifier sees identical features
        let mut bare = Model::new(tiny_config()).unwrap();
        bare.init_backbone(7).unwrap();
        bare.init_head(67).unwrap();
        let mut with_branches = Model::new(tiny_config()).unwrap();
        with_branches.init_backbone(7).unwrap();
        with_branches.add_branch("g1", 100).unwrap();
        with_branches.add_branch("g2", 101).unwrap();
        with_branches.init_router(102).unwrap();
        with_branches.init_head(67).unwrap();

        let img = random_image(&bare.cfg.vit, 3);
        let mut tape = Tape::new();
        let leaves = bare.store.stage_all(&mut tape);
        let toks = backbone::tokenize_on_tape(&mut tape, &leaves, &bare.cfg.vit, &img).unwrap();
        let enc = backbone::encode_on_tape(
            &mut tape,
            &leaves,
            &bare.cfg.vit,
            &mut backbone::NoInjection,
            toks,
        )
        .unwrap();
        let feat =
            head::head_feature_on_tape(&mut tape, &leaves, enc, 16, HeadKind::AttnPool).unwrap();
        let logits = head::classify_logits_on_tape(&mut tape, &leaves, feat).unwrap();
        let plain = tape.value(logits).clone();

        let mut tape2 = Tape::new();
        let fwd = with_branches
            .forward_batch(&mut tape2, &[img.clone()], ForwardMode::Routed)
            .unwrap();
        let _ = fwd;
        let routed_prob = with_branches.predict(&img).unwrap();
        let p0 = crate::numeric::ops::softmax_rows(&plain).unwrap().at(0, 1) as f64;
        assert!((routed_prob.fake_prob - p0).abs() < 1e-6);
    }

    #[test]
    fn single_branch_mode_ignores_router() {
        let m = tiny_model(2, 9);
        let img = random_image(&m.cfg.vit, 4);
        let mut tape = Tape::new();
        let fwd = m
            .forward_batch(&mut tape, &[img], ForwardMode::SingleBranch(0))
            .unwrap();
        assert!(fwd.pis[0].is_empty());
        assert_eq!(tape.value(fwd.probs).shape(), [1, 2]);
    }

    #[test]
    fn branch_index_out_of_range() {
        let m = tiny_model(1, 10);
        let img = random_image(&m.cfg.vit, 5);
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward_batch(&mut tape, &[img], ForwardMode::SingleBranch(3)),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn router_width_mismatch_rejected() {
        let mut m = tiny_model(2, 11);
        // grow the hub without re-dimensioning the router
        m.add_branch("late", 999).unwrap();
        let img = random_image(&m.cfg.vit, 6);
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward_batch(&mut tape, &[img], ForwardMode::Routed),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn per_layer_routing_records_one_decision_per_layer() {
        let mut m = tiny_model(2, 12);
        m.cfg.route_per_layer = true;
        let img = random_image(&m.cfg.vit, 7);
        let mut tape = Tape::new();
        let fwd = m
            .forward_batch(&mut tape, &[img], ForwardMode::Routed)
            .unwrap();
        assert_eq!(fwd.pis[0].len(), m.cfg.vit.depth);
    }

    #[test]
    fn uniform_weights_without_router() {
        let mut m = tiny_model(2, 13);
        // strip the router
        for name in crate::router::ROUTER_NAMES {
            m.store.remove(name).unwrap();
        }
        m.has_router = false;
        let img = random_image(&m.cfg.vit, 8);
        let p = m.predict(&img).unwrap();
        assert_eq!(p.merge_weights, vec![0.5, 0.5]);
    }
}
