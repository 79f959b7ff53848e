//! Bit-exact model persistence. Tensors are written in a canonical order
//! (backbone, branches in registry order, router, head, meta) so saving
//! the same model twice yields byte-identical files.
//!
//! `meta.arch` holds integer-valued architecture fields so a checkpoint
//! alone can rebuild the model; `meta.config_hash` binds the file to the
//! resolved run configuration.

use std::path::Path;

use crate::backbone::{backbone_names, Proj, ViTConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::head::{HeadKind, HEAD_NAMES};
use crate::model::{Model, ModelConfig};
use crate::numeric::tensor::Tensor;
use crate::router::ROUTER_NAMES;

const ARCH_FIELDS: usize = 14;

fn targets_mask(targets: &[Proj]) -> u32 {
    let mut m = 0;
    for t in targets {
        m |= match t {
            Proj::Q => 1,
            Proj::K => 2,
            Proj::V => 4,
            Proj::O => 8,
        };
    }
    m
}

fn targets_from_mask(mask: u32) -> Vec<Proj> {
    let mut out = Vec::new();
    for (bit, p) in [(1, Proj::Q), (2, Proj::K), (4, Proj::V), (8, Proj::O)] {
        if mask & bit != 0 {
            out.push(p);
        }
    }
    out
}

fn arch_tensor(model: &Model<f32>) -> Tensor<f32> {
    let c = &model.cfg;
    let fields: [f32; ARCH_FIELDS] = [
        c.vit.image_size as f32,
        c.vit.patch_size as f32,
        c.vit.channels as f32,
        c.vit.embed_dim as f32,
        c.vit.depth as f32,
        c.vit.heads as f32,
        c.vit.mlp_ratio as f32,
        c.rank as f32,
        c.alpha as f32,
        c.router_hidden as f32,
        if c.route_per_layer { 1.0 } else { 0.0 },
        match c.head {
            HeadKind::AttnPool => 0.0,
            HeadKind::ClsToken => 1.0,
        },
        targets_mask(&c.lora_targets) as f32,
        if model.has_router { 1.0 } else { 0.0 },
    ];
    Tensor::new(vec![ARCH_FIELDS], fields.to_vec()).expect("consistent")
}

fn config_from_arch(t: &Tensor<f32>) -> Result<(ModelConfig, bool)> {
    if t.shape() != [ARCH_FIELDS] {
        return Err(Error::Format {
            offset: 0,
            msg: format!("meta.arch has shape {:?}, expected [{ARCH_FIELDS}]", t.shape()),
        });
    }
    let d = t.data();
    let cfg = ModelConfig {
        vit: ViTConfig {
            image_size: d[0] as usize,
            patch_size: d[1] as usize,
            channels: d[2] as usize,
            embed_dim: d[3] as usize,
            depth: d[4] as usize,
            heads: d[5] as usize,
            mlp_ratio: d[6] as usize,
        },
        rank: d[7] as usize,
        alpha: d[8] as f64,
        router_hidden: d[9] as usize,
        route_per_layer: d[10] != 0.0,
        head: if d[11] != 0.0 {
            HeadKind::ClsToken
        } else {
            HeadKind::AttnPool
        },
        lora_targets: targets_from_mask(d[12] as u32),
        // init-time knobs; a loaded model carries materialized weights
        backbone_seed: 0,
        warmup_epochs: 0,
    };
    Ok((cfg, d[13] != 0.0))
}

/// Canonical tensor name sequence for one model.
fn canonical_names(model: &Model<f32>, with_head: bool) -> Vec<String> {
    let mut names = backbone_names(&model.cfg.vit);
    let hub = model.hub();
    for gen in &model.generators {
        names.extend(hub.branch_names(gen));
    }
    if model.has_router {
        names.extend(ROUTER_NAMES.iter().map(|s| s.to_string()));
    }
    if with_head {
        names.extend(HEAD_NAMES.iter().map(|s| s.to_string()));
    }
    names
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let mut container = Container::new(model.generators.clone());
    for name in canonical_names(model, model.store.contains("head.attn.q")) {
        container.push(&name, model.store.tensor(&name)?.clone())?;
    }
    container.push("meta.arch", arch_tensor(model))?;
    container.push(
        "meta.config_hash",
        Tensor::new(vec![1], vec![f32::from_bits(model.config_hash)])?,
    )?;
    container.write_file(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let mut container = Container::read_file(path)?;
    let arch = container.take("meta.arch").ok_or_else(|| Error::Format {
        offset: 0,
        msg: "checkpoint has no meta.arch tensor".into(),
    })?;
    let (cfg, has_router) = config_from_arch(&arch)?;
    cfg.validate()?;
    let config_hash = container
        .take("meta.config_hash")
        .map(|t| t.data()[0].to_bits())
        .unwrap_or(0);

    let mut model = Model::new(cfg)?;
    model.generators = container.registry.clone();
    model.has_router = has_router;
    model.config_hash = config_hash;
    for gen in &model.generators {
        crate::lora::validate_generator_name(gen)?;
    }

    // head tensors are optional; detect their presence in the file
    let with_head = container.get("head.attn.q").is_some();
    let names = canonical_names(&model, with_head);
    for name in &names {
        let tensor = container.take(name).ok_or_else(|| Error::Format {
            offset: 0,
            msg: format!("checkpoint is missing tensor '{name}'"),
        })?;
        model.store.insert(name, tensor, false)?;
    }
    if let Some((extra, _)) = container.tensors.first() {
        return Err(Error::Format {
            offset: 0,
            msg: format!("checkpoint holds unexpected tensor '{extra}'"),
        });
    }

    // registry order defines router width
    if model.has_router {
        let w = model.store.tensor("router.l2.w")?;
        if w.cols() != model.generators.len() {
            return Err(Error::Config(format!(
                "router width {} does not match registry of {} generators",
                w.cols(),
                model.generators.len()
            )));
        }
    }
    Ok(model)
}
