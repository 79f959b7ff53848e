//! Forgery detection head: single-query attention pooling over encoder
//! tokens, then a linear real/fake classifier. The fake score is always
//! probability index 1.

use crate::error::{Error, Result};
use crate::numeric::ops;
use crate::numeric::params::{LeafMap, ParamStore};
use crate::numeric::rng::DetRng;
use crate::numeric::scalar::Scalar;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::tensor::Tensor;

pub const HEAD_NAMES: [&str; 5] = [
    "head.attn.q",
    "head.attn.wk",
    "head.attn.wv",
    "head.clf.w",
    "head.clf.b",
];

/// Pooling ablation: attention pooling (default) or class token only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    AttnPool,
    ClsToken,
}

impl HeadKind {
    pub fn tag(self) -> &'static str {
        match self {
            HeadKind::AttnPool => "attn_pool",
            HeadKind::ClsToken => "cls_token",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "attn_pool" => Ok(HeadKind::AttnPool),
            "cls_token" => Ok(HeadKind::ClsToken),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }
}

pub fn init_head<E: Scalar>(store: &mut ParamStore<E>, embed_dim: usize, seed: u64) -> Result<()> {
    let mut rng = DetRng::new(seed);
    // fan-in scaled init keeps the head's outputs at unit order from the
    // start, which a short training budget depends on
    let mut tn = |shape: &[usize]| -> Tensor<E> {
        let numel: usize = shape.iter().product();
        let std = 1.0 / (shape[0].max(1) as f64).sqrt();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.trunc_normal(std, 2.0)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("consistent")
    };
    store.insert("head.attn.q", tn(&[1, embed_dim]), false)?;
    store.insert("head.attn.wk", tn(&[embed_dim, embed_dim]), false)?;
    store.insert("head.attn.wv", tn(&[embed_dim, embed_dim]), false)?;
    store.insert("head.clf.w", tn(&[embed_dim, 2]), false)?;
    store.insert("head.clf.b", Tensor::zeros(&[1, 2]), false)?;
    Ok(())
}

/// Re-seed the head in place (stage 2 trains a fresh head).
pub fn reinit_head<E: Scalar>(store: &mut ParamStore<E>, embed_dim: usize, seed: u64) -> Result<()> {
    for name in HEAD_NAMES {
        if store.contains(name) {
            store.remove(name)?;
        }
    }
    init_head(store, embed_dim, seed)
}

/// scores = softmax(q·(T·Wk)ᵀ/√d); output = scores·(T·Wv).
pub fn attn_pool_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    tokens: NodeId,
    embed_dim: usize,
) -> Result<NodeId> {
    let q = leaves.node("head.attn.q")?;
    let wk = leaves.node("head.attn.wk")?;
    let wv = leaves.node("head.attn.wv")?;
    let keys = tape.matmul(tokens, wk)?;
    let kt = tape.transpose(keys)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, E::from_f64(1.0 / (embed_dim as f64).sqrt()));
    let attn = tape.softmax_rows(scaled)?;
    let values = tape.matmul(tokens, wv)?;
    tape.matmul(attn, values)
}

/// Feature for the configured head kind: pooled attention or the class
/// token row.
pub fn head_feature_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    tokens: NodeId,
    embed_dim: usize,
    kind: HeadKind,
) -> Result<NodeId> {
    match kind {
        HeadKind::AttnPool => attn_pool_on_tape(tape, leaves, tokens, embed_dim),
        HeadKind::ClsToken => tape.slice_rows(tokens, 0, 1),
    }
}

/// Linear classifier logits [1,2]; softmax is applied per batch.
pub fn classify_logits_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    feature: NodeId,
) -> Result<NodeId> {
    let w = leaves.node("head.clf.w")?;
    let b = leaves.node("head.clf.b")?;
    let logits = tape.matmul(feature, w)?;
    tape.add_row(logits, b)
}

/// Plain attention pooling for tests and inference checks.
pub fn attn_pool<E: Scalar>(
    store: &ParamStore<E>,
    tokens: &Tensor<E>,
    embed_dim: usize,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let leaves = store.stage_all(&mut tape);
    let t = tape.constant(tokens.clone());
    let out = attn_pool_on_tape(&mut tape, &leaves, t, embed_dim)?;
    Ok(tape.value(out).clone())
}

/// Plain probability pair for one feature row.
pub fn classify<E: Scalar>(store: &ParamStore<E>, feature: &Tensor<E>) -> Result<Tensor<E>> {
    let logits = ops::add_row_broadcast(
        &ops::matmul(feature, store.tensor("head.clf.w")?)?,
        store.tensor("head.clf.b")?,
    )?;
    ops::softmax_rows(&logits)
}

pub fn one_hot_labels<E: Scalar>(labels: &[u8]) -> Result<Tensor<E>> {
    let mut rows = Vec::with_capacity(labels.len());
    for &y in labels {
        match y {
            0 => rows.push(vec![E::ONE, E::ZERO]),
            1 => rows.push(vec![E::ZERO, E::ONE]),
            other => {
                return Err(Error::Data(format!(
                    "authenticity label must be 0 or 1, got {other}"
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("empty label batch".into()));
    }
    Tensor::from_rows(&rows)
}

/// −(1/B)·Σ log p_{i, y_i} over a batch of probability rows.
pub fn cls_loss<E: Scalar>(probabilities: &Tensor<E>, labels: &[u8]) -> Result<E> {
    if probabilities.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows vs {} labels",
            probabilities.rows(),
            labels.len()
        )));
    }
    let targets = one_hot_labels::<E>(labels)?;
    ops::cross_entropy_soft(probabilities, &targets)
}
