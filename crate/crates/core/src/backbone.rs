//! Frozen vision-transformer encoder with injection points on the
//! self-attention projections.
//!
//! The encoder is a desk-scale stand-in for a large pretrained backbone:
//! seeded truncated-normal init, optionally warmed up with one epoch of
//! patch reconstruction (see the trainer), then permanently frozen. Blocks
//! are pre-norm; positional embeddings are learned; a class token is
//! prepended and participates in mean pooling downstream.

use crate::error::{Error, Result};
use crate::numeric::params::{LeafMap, ParamStore};
use crate::numeric::rng::DetRng;
use crate::numeric::scalar::Scalar;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::tensor::Tensor;

/// Init scale for every learned backbone tensor except layernorm affines.
pub const INIT_STD: f64 = 0.02;

/// Truncation at ±2σ (resampled) shrinks the realized standard deviation
/// by this factor; sample-statistics tests compare against it.
pub const TRUNC_STD_FACTOR: f64 = 0.879_625_66;

/// Attention projections that can carry adapter residuals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub fn tag(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
        }
    }

    pub fn from_tag(s: &str) -> Result<Proj> {
        match s {
            "q" => Ok(Proj::Q),
            "k" => Ok(Proj::K),
            "v" => Ok(Proj::V),
            "o" => Ok(Proj::O),
            other => Err(Error::Config(format!("unknown projection '{other}'"))),
        }
    }

    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];
}

#[derive(Clone, Debug)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.channels == 0
            || self.embed_dim == 0
            || self.depth == 0
            || self.heads == 0
            || self.mlp_ratio == 0
        {
            return Err(Error::Config("all backbone extents must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Canonical backbone tensor names, in serialization order.
pub fn backbone_names(cfg: &ViTConfig) -> Vec<String> {
    let mut names = vec![
        "backbone.patch.w".to_string(),
        "backbone.patch.b".to_string(),
        "backbone.cls".to_string(),
        "backbone.pos".to_string(),
    ];
    for l in 0..cfg.depth {
        for part in [
            "ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1",
            "mlp.w2", "mlp.b2",
        ] {
            names.push(format!("backbone.l{l}.{part}"));
        }
    }
    names.push("backbone.lnf.g".to_string());
    names.push("backbone.lnf.b".to_string());
    names
}

fn trunc_normal_tensor<E: Scalar>(rng: &mut DetRng, shape: &[usize], std: f64) -> Tensor<E> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.trunc_normal(std, 2.0)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

/// Deterministically initialize all backbone weights (non-trainable).
pub fn init_backbone<E: Scalar>(
    store: &mut ParamStore<E>,
    cfg: &ViTConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = DetRng::new(seed);
    let d = cfg.embed_dim;
    let n1 = cfg.tokens();
    let hidden = cfg.mlp_ratio * d;

    store.insert(
        "backbone.patch.w",
        trunc_normal_tensor(&mut rng, &[cfg.patch_dim(), d], INIT_STD),
        false,
    )?;
    store.insert("backbone.patch.b", Tensor::zeros(&[1, d]), false)?;
    store.insert(
        "backbone.cls",
        trunc_normal_tensor(&mut rng, &[1, d], INIT_STD),
        false,
    )?;
    store.insert(
        "backbone.pos",
        trunc_normal_tensor(&mut rng, &[n1, d], INIT_STD),
        false,
    )?;
    for l in 0..cfg.depth {
        store.insert(&format!("backbone.l{l}.ln1.g"), Tensor::full(&[1, d], E::ONE), false)?;
        store.insert(&format!("backbone.l{l}.ln1.b"), Tensor::zeros(&[1, d]), false)?;
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("backbone.l{l}.{w}"),
                trunc_normal_tensor(&mut rng, &[d, d], INIT_STD),
                false,
            )?;
        }
        store.insert(&format!("backbone.l{l}.ln2.g"), Tensor::full(&[1, d], E::ONE), false)?;
        store.insert(&format!("backbone.l{l}.ln2.b"), Tensor::zeros(&[1, d]), false)?;
        store.insert(
            &format!("backbone.l{l}.mlp.w1"),
            trunc_normal_tensor(&mut rng, &[d, hidden], INIT_STD),
            false,
        )?;
        store.insert(&format!("backbone.l{l}.mlp.b1"), Tensor::zeros(&[1, hidden]), false)?;
        store.insert(
            &format!("backbone.l{l}.mlp.w2"),
            trunc_normal_tensor(&mut rng, &[hidden, d], INIT_STD),
            false,
        )?;
        store.insert(&format!("backbone.l{l}.mlp.b2"), Tensor::zeros(&[1, d]), false)?;
    }
    // final layernorm: brings encoder output to unit row scale for the
    // head, matching standard pre-norm encoder designs
    store.insert("backbone.lnf.g", Tensor::full(&[1, d], E::ONE), false)?;
    store.insert("backbone.lnf.b", Tensor::zeros(&[1, d]), false)?;
    Ok(())
}

/// Flatten an image [C,H,W] into patch rows [N, P·P·C], grid row-major,
/// each patch laid out channel-major then y then x.
pub fn extract_patches<E: Scalar>(cfg: &ViTConfig, image: &Tensor<E>) -> Result<Tensor<E>> {
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != want {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match configured {:?}",
            image.shape(),
            want
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let hw = cfg.image_size;
    let data = image.data();
    let mut out = Vec::with_capacity(g * g * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        out.push(data[(c * hw + y) * hw + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g * g, cfg.patch_dim()], out)
}

/// Patchify, project, prepend the class token, add positional embeddings.
pub fn tokenize_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    cfg: &ViTConfig,
    image: &Tensor<E>,
) -> Result<NodeId> {
    let patches = extract_patches(cfg, image)?;
    let pid = tape.constant(patches);
    let w = leaves.node("backbone.patch.w")?;
    let b = leaves.node("backbone.patch.b")?;
    let t = tape.matmul(pid, w)?;
    let t = tape.add_row(t, b)?;
    let cls = leaves.node("backbone.cls")?;
    let full = tape.concat_rows(&[cls, t])?;
    let pos = leaves.node("backbone.pos")?;
    tape.add(full, pos)
}

/// Supplies (or declines to supply) a residual for each designated
/// projection of each layer.
pub trait Injector<E: Scalar> {
    /// Sees the layer input before normalization; per-layer routing hooks in
    /// here.
    fn begin_layer(
        &mut self,
        tape: &mut Tape<E>,
        leaves: &LeafMap,
        x: NodeId,
        layer: usize,
    ) -> Result<()> {
        let _ = (tape, leaves, x, layer);
        Ok(())
    }

    fn residual(
        &mut self,
        tape: &mut Tape<E>,
        leaves: &LeafMap,
        input: NodeId,
        layer: usize,
        proj: Proj,
    ) -> Result<Option<NodeId>>;
}

/// The plain frozen forward: every slot declines.
pub struct NoInjection;

impl<E: Scalar> Injector<E> for NoInjection {
    fn residual(
        &mut self,
        _tape: &mut Tape<E>,
        _leaves: &LeafMap,
        _input: NodeId,
        _layer: usize,
        _proj: Proj,
    ) -> Result<Option<NodeId>> {
        Ok(None)
    }
}

fn project<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    inj: &mut dyn Injector<E>,
    input: NodeId,
    weight: NodeId,
    layer: usize,
    proj: Proj,
) -> Result<NodeId> {
    let base = tape.matmul(input, weight)?;
    match inj.residual(tape, leaves, input, layer, proj)? {
        Some(delta) => tape.add(base, delta),
        None => Ok(base),
    }
}

/// Run the token sequence through all transformer blocks, injecting
/// adapter residuals at the designated projections.
pub fn encode_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    cfg: &ViTConfig,
    inj: &mut dyn Injector<E>,
    tokens: NodeId,
) -> Result<NodeId> {
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let attn_scale = E::from_f64(1.0 / (dh as f64).sqrt());

    let mut x = tokens;
    for l in 0..cfg.depth {
        inj.begin_layer(tape, leaves, x, l)?;
        let ln1g = leaves.node(&format!("backbone.l{l}.ln1.g"))?;
        let ln1b = leaves.node(&format!("backbone.l{l}.ln1.b"))?;
        let xn = tape.layernorm(x, ln1g, ln1b)?;

        let wq = leaves.node(&format!("backbone.l{l}.wq"))?;
        let wk = leaves.node(&format!("backbone.l{l}.wk"))?;
        let wv = leaves.node(&format!("backbone.l{l}.wv"))?;
        let q = project(tape, leaves, inj, xn, wq, l, Proj::Q)?;
        let k = project(tape, leaves, inj, xn, wk, l, Proj::K)?;
        let v = project(tape, leaves, inj, xn, wv, l, Proj::V)?;

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, attn_scale);
            let attn = tape.softmax_rows(scaled)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let wo = leaves.node(&format!("backbone.l{l}.wo"))?;
        let attn_out = project(tape, leaves, inj, merged, wo, l, Proj::O)?;
        x = tape.add(x, attn_out)?;

        let ln2g = leaves.node(&format!("backbone.l{l}.ln2.g"))?;
        let ln2b = leaves.node(&format!("backbone.l{l}.ln2.b"))?;
        let xn2 = tape.layernorm(x, ln2g, ln2b)?;
        let w1 = leaves.node(&format!("backbone.l{l}.mlp.w1"))?;
        let b1 = leaves.node(&format!("backbone.l{l}.mlp.b1"))?;
        let w2 = leaves.node(&format!("backbone.l{l}.mlp.w2"))?;
        let b2 = leaves.node(&format!("backbone.l{l}.mlp.b2"))?;
        let h1 = tape.matmul(xn2, w1)?;
        let h1 = tape.add_row(h1, b1)?;
        let act = tape.gelu(h1);
        let m = tape.matmul(act, w2)?;
        let m = tape.add_row(m, b2)?;
        x = tape.add(x, m)?;
        let _ = d;
    }
    let lnfg = leaves.node("backbone.lnf.g")?;
    let lnfb = leaves.node("backbone.lnf.b")?;
    tape.layernorm(x, lnfg, lnfb)
}

/// Convenience non-tape wrappers for tests and plain inference paths.
pub fn tokenize<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    image: &Tensor<E>,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let leaves = store.stage_all(&mut tape);
    let id = tokenize_on_tape(&mut tape, &leaves, cfg, image)?;
    Ok(tape.value(id).clone())
}

pub fn encode<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    image: &Tensor<E>,
    inj: &mut dyn Injector<E>,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let leaves = store.stage_all(&mut tape);
    let tokens = tokenize_on_tape(&mut tape, &leaves, cfg, image)?;
    let out = encode_on_tape(&mut tape, &leaves, cfg, inj, tokens)?;
    Ok(tape.value(out).clone())
}
