//! Per-generator low-rank adapter branches and their composition algebra.
//!
//! Each branch holds an (A, B) pair per designated (layer, projection)
//! slot. A single branch contributes (α/r)·X·A·B; the routed composition
//! contributes (α/r)·Σ_k π_k·X·A_k·B_k. The factored form (X·A)·B is the
//! only one ever computed — dense A·B materialization exists solely in
//! test oracles.

use crate::backbone::{Injector, Proj};
use crate::error::{Error, Result};
use crate::numeric::params::{LeafMap, ParamStore};
use crate::numeric::rng::DetRng;
use crate::numeric::scalar::Scalar;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::tensor::Tensor;
use crate::router;

/// Branch A matrices are drawn from normal(0, BRANCH_INIT_STD); B starts
/// at zero so a fresh branch is an exact no-op.
pub const BRANCH_INIT_STD: f64 = 0.02;

/// Off-simplex tolerance at the composition boundary.
pub const SIMPLEX_TOL: f64 = 1e-5;

/// The ordered collection of adapter branches plus the designated slot set.
#[derive(Clone, Debug)]
pub struct LoraHub {
    pub generators: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Proj>,
    pub depth: usize,
}

pub fn validate_generator_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains('.') || name.contains(char::is_whitespace) {
        return Err(Error::Registry(format!(
            "generator name '{name}' must be non-empty and free of dots and whitespace"
        )));
    }
    Ok(())
}

impl LoraHub {
    pub fn new(rank: usize, alpha: f64, targets: &[Proj], depth: usize) -> Self {
        // canonical slot order: layers ascending, projections in Q,K,V,O order
        let mut ts: Vec<Proj> = Proj::ALL.iter().copied().filter(|p| targets.contains(p)).collect();
        if ts.is_empty() {
            ts = vec![Proj::Q, Proj::V];
        }
        LoraHub {
            generators: Vec::new(),
            rank,
            alpha,
            targets: ts,
            depth,
        }
    }

    pub fn k(&self) -> usize {
        self.generators.len()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn slots(&self) -> impl Iterator<Item = (usize, Proj)> + '_ {
        (0..self.depth).flat_map(move |l| self.targets.iter().map(move |&p| (l, p)))
    }

    pub fn is_designated(&self, layer: usize, proj: Proj) -> bool {
        layer < self.depth && self.targets.contains(&proj)
    }

    pub fn a_name(&self, gen: &str, layer: usize, proj: Proj) -> String {
        format!("lora.{gen}.{layer}.{}.A", proj.tag())
    }

    pub fn b_name(&self, gen: &str, layer: usize, proj: Proj) -> String {
        format!("lora.{gen}.{layer}.{}.B", proj.tag())
    }

    /// Tensor names of one branch in canonical order.
    pub fn branch_names(&self, gen: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (l, p) in self.slots() {
            out.push(self.a_name(gen, l, p));
            out.push(self.b_name(gen, l, p));
        }
        out
    }

    pub fn index_of(&self, gen: &str) -> Result<usize> {
        self.generators
            .iter()
            .position(|g| g == gen)
            .ok_or_else(|| Error::Registry(format!("unknown generator '{gen}'")))
    }
}

/// Initialize one branch's tensors in the store: A ~ normal(0, 0.02),
/// B = 0, so the initial residual is exactly zero.
pub fn init_branch_params<E: Scalar>(
    store: &mut ParamStore<E>,
    hub: &LoraHub,
    gen: &str,
    embed_dim: usize,
    seed: u64,
) -> Result<()> {
    validate_generator_name(gen)?;
    if hub.rank == 0 || hub.rank > embed_dim {
        return Err(Error::Config(format!(
            "rank {} must be in 1..={embed_dim}",
            hub.rank
        )));
    }
    let mut rng = DetRng::new(seed);
    for (l, p) in hub.slots() {
        let a_data: Vec<E> = (0..embed_dim * hub.rank)
            .map(|_| E::from_f64(rng.normal() * BRANCH_INIT_STD))
            .collect();
        let a = Tensor::new(vec![embed_dim, hub.rank], a_data)?;
        store.insert(&hub.a_name(gen, l, p), a, false)?;
        store.insert(
            &hub.b_name(gen, l, p),
            Tensor::zeros(&[hub.rank, embed_dim]),
            false,
        )?;
    }
    Ok(())
}

/// Register and initialize a new branch. Existing branches are untouched;
/// the router must be re-dimensioned separately by the trainer.
pub fn add_branch<E: Scalar>(
    store: &mut ParamStore<E>,
    hub: &mut LoraHub,
    gen: &str,
    embed_dim: usize,
    seed: u64,
) -> Result<()> {
    validate_generator_name(gen)?;
    if hub.generators.iter().any(|g| g == gen) {
        return Err(Error::Registry(format!("generator '{gen}' already in hub")));
    }
    init_branch_params(store, hub, gen, embed_dim, seed)?;
    hub.generators.push(gen.to_string());
    Ok(())
}

fn want_slot(hub: &LoraHub, layer: usize, proj: Proj) -> Result<()> {
    if !hub.is_designated(layer, proj) {
        return Err(Error::Injection(format!(
            "slot (layer {layer}, {}) is not designated",
            proj.tag()
        )));
    }
    Ok(())
}

/// Single-branch residual (α/r)·X·A·B for one slot, factored.
pub fn branch_delta<E: Scalar>(
    store: &ParamStore<E>,
    hub: &LoraHub,
    x: &Tensor<E>,
    gen: &str,
    layer: usize,
    proj: Proj,
) -> Result<Tensor<E>> {
    want_slot(hub, layer, proj)?;
    let a = store.tensor(&hub.a_name(gen, layer, proj))?;
    let b = store.tensor(&hub.b_name(gen, layer, proj))?;
    let xa = crate::numeric::ops::matmul(x, a)?;
    let xab = crate::numeric::ops::matmul(&xa, b)?;
    Ok(crate::numeric::ops::scale(&xab, E::from_f64(hub.scaling())))
}

/// Routed composition (α/r)·Σ_k π_k·X·A_k·B_k for one slot. Zero-weight
/// branches are skipped, so they contribute nothing even bitwise.
pub fn integrate<E: Scalar>(
    store: &ParamStore<E>,
    hub: &LoraHub,
    x: &Tensor<E>,
    weights: &[f64],
    layer: usize,
    proj: Proj,
) -> Result<Tensor<E>> {
    want_slot(hub, layer, proj)?;
    check_weights(weights, hub.k())?;
    let mut acc: Option<Tensor<E>> = None;
    for (k, gen) in hub.generators.iter().enumerate() {
        if weights[k] == 0.0 {
            continue;
        }
        let a = store.tensor(&hub.a_name(gen, layer, proj))?;
        let b = store.tensor(&hub.b_name(gen, layer, proj))?;
        let xa = crate::numeric::ops::matmul(x, a)?;
        let xab = crate::numeric::ops::matmul(&xa, b)?;
        let weighted = crate::numeric::ops::scale(&xab, E::from_f64(weights[k]));
        acc = Some(match acc {
            None => weighted,
            Some(prev) => crate::numeric::ops::add(&prev, &weighted)?,
        });
    }
    let total = acc.unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok(crate::numeric::ops::scale(&total, E::from_f64(hub.scaling())))
}

pub fn check_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::Routing(format!(
            "merge weights have length {}, hub has {k} branches",
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !w.is_finite() || w < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL
    {
        return Err(Error::Routing(format!(
            "merge weights off the simplex: sum {sum}, values {weights:?}"
        )));
    }
    Ok(())
}

/// Tape-side residual of one branch for one slot, without scaling.
fn factored_delta_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    hub: &LoraHub,
    gen: &str,
    layer: usize,
    proj: Proj,
    x: NodeId,
) -> Result<NodeId> {
    let a = leaves.node(&hub.a_name(gen, layer, proj))?;
    let b = leaves.node(&hub.b_name(gen, layer, proj))?;
    let xa = tape.matmul(x, a)?;
    tape.matmul(xa, b)
}

/// Stage-1 injector: exactly one branch active, no router involved.
pub struct BranchInjector<'h> {
    pub hub: &'h LoraHub,
    pub gen: String,
}

impl<E: Scalar> Injector<E> for BranchInjector<'_> {
    fn residual(
        &mut self,
        tape: &mut Tape<E>,
        leaves: &LeafMap,
        input: NodeId,
        layer: usize,
        proj: Proj,
    ) -> Result<Option<NodeId>> {
        if !self.hub.is_designated(layer, proj) {
            return Ok(None);
        }
        let raw = factored_delta_on_tape(tape, leaves, self.hub, &self.gen, layer, proj, input)?;
        Ok(Some(tape.scale(raw, E::from_f64(self.hub.scaling()))))
    }
}

/// Where the merge weights come from during an encoded pass.
pub enum PiSource {
    /// One [1,K] node reused at every layer (per-image routing).
    Fixed(NodeId),
    /// Re-routed from each layer's input with the shared router MLP.
    PerLayer { hidden: usize },
}

/// Stage-2 / inference injector: the routed convex combination.
pub struct RoutedInjector<'h> {
    pub hub: &'h LoraHub,
    pub pi: PiSource,
    current: Option<NodeId>,
    seen: Vec<NodeId>,
}

impl<'h> RoutedInjector<'h> {
    pub fn new(hub: &'h LoraHub, pi: PiSource) -> Self {
        let (current, seen) = match pi {
            PiSource::Fixed(id) => (Some(id), vec![id]),
            PiSource::PerLayer { .. } => (None, Vec::new()),
        };
        RoutedInjector {
            hub,
            pi,
            current,
            seen,
        }
    }

    /// Every routing decision taken, in layer order (a single entry when
    /// routing is per-image).
    pub fn into_seen(self) -> Vec<NodeId> {
        self.seen
    }
}

impl<E: Scalar> Injector<E> for RoutedInjector<'_> {
    fn begin_layer(
        &mut self,
        tape: &mut Tape<E>,
        leaves: &LeafMap,
        x: NodeId,
        _layer: usize,
    ) -> Result<()> {
        if let PiSource::PerLayer { hidden } = self.pi {
            let pooled = tape.mean_rows(x)?;
            let pi = router::route_on_tape(tape, leaves, pooled, hidden, self.hub.k())?;
            self.current = Some(pi);
            self.seen.push(pi);
        }
        Ok(())
    }

    fn residual(
        &mut self,
        tape: &mut Tape<E>,
        leaves: &LeafMap,
        input: NodeId,
        layer: usize,
        proj: Proj,
    ) -> Result<Option<NodeId>> {
        if !self.hub.is_designated(layer, proj) {
            return Ok(None);
        }
        let pi = self
            .current
            .ok_or_else(|| Error::Routing("no merge weights available at injection".into()))?;
        if tape.value(pi).cols() != self.hub.k() {
            return Err(Error::Routing(format!(
                "merge weights width {} does not match hub size {}",
                tape.value(pi).cols(),
                self.hub.k()
            )));
        }
        let mut acc: Option<NodeId> = None;
        for (k, gen) in self.hub.generators.clone().iter().enumerate() {
            let raw = factored_delta_on_tape(tape, leaves, self.hub, gen, layer, proj, input)?;
            let wk = tape.slice_cols(pi, k, 1)?;
            let weighted = tape.mul_scalar_node(raw, wk)?;
            acc = Some(match acc {
                None => weighted,
                Some(prev) => tape.add(prev, weighted)?,
            });
        }
        let total = acc.ok_or_else(|| Error::Routing("hub has no branches".into()))?;
        Ok(Some(tape.scale(total, E::from_f64(self.hub.scaling()))))
    }
}
