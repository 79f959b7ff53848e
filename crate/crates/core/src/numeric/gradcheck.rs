//! Finite-difference verification of analytic gradients. Every trainable
//! module must pass this gate in 64-bit before it is trusted.

use crate::error::{Error, Result};
use crate::numeric::params::ParamStore;
use crate::numeric::rng::DetRng;
use crate::numeric::tensor::Tensor;

/// Relative-error threshold the acceptance gate uses.
pub const REL_TOLERANCE: f64 = 1e-4;

/// Coordinates where both gradients sit below this floor are skipped:
/// a relative test on two near-zero numbers measures only roundoff.
pub const ABS_FLOOR: f64 = 1e-8;

/// Disagreements below this are unresolvable by the probe itself: an f64
/// loss of order one carries ~1e-11 of slope noise through the stencil,
/// while a genuinely wrong adjoint shows up proportional to the gradient,
/// far above this line.
pub const ABS_GAP_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter group (all, if the group is smaller).
    pub coords_per_group: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-4,
            coords_per_group: 32,
            seed: 0x6fd2_c1e5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel < REL_TOLERANCE
    }
}

/// Compare analytic gradients against central differences.
///
/// `loss` is called with `with_grad = true` once to populate analytic
/// gradients in the store, and with `with_grad = false` for value probes.
/// It must be deterministic; this is verified by evaluating twice.
pub fn finite_diff_gradcheck<F>(
    store: &mut ParamStore<f64>,
    opts: &GradcheckOptions,
    mut loss: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    let l1 = loss(store, false)?;
    let l2 = loss(store, false)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Check(format!(
            "loss is not deterministic under a fixed seed: {l1} vs {l2}"
        )));
    }

    store.zero_grads();
    loss(store, true)?;
    let trainable: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    if trainable.is_empty() {
        return Err(Error::Check("no trainable parameters to check".into()));
    }
    let analytic: Vec<Tensor<f64>> = trainable
        .iter()
        .map(|n| store.get(n).map(|e| e.grad.clone()))
        .collect::<Result<_>>()?;

    let mut rng = DetRng::new(opts.seed);
    let mut groups = Vec::with_capacity(trainable.len());
    let mut max_rel = 0.0f64;

    for (name, grads) in trainable.iter().zip(analytic.iter()) {
        let numel = grads.numel();
        let coords: Vec<usize> = if numel <= opts.coords_per_group {
            (0..numel).collect()
        } else {
            // sample without replacement
            let mut idx: Vec<usize> = (0..numel).collect();
            rng.shuffle(&mut idx);
            idx.truncate(opts.coords_per_group);
            idx
        };

        let mut group_max = 0.0f64;
        let mut skipped = 0;
        for &c in &coords {
            let orig = store.get(name)?.tensor.data()[c];
            let mut central = |eps: f64| -> Result<f64> {
                store.get_mut(name)?.tensor.data_mut()[c] = orig + eps;
                let plus = loss(store, false)?;
                store.get_mut(name)?.tensor.data_mut()[c] = orig - eps;
                let minus = loss(store, false)?;
                store.get_mut(name)?.tensor.data_mut()[c] = orig;
                Ok((plus - minus) / (2.0 * eps))
            };
            // step-halved central differences, Richardson-combined to
            // fourth order so truncation cannot mask true mismatches on
            // small gradients
            let coarse = central(2.0 * opts.eps)?;
            let fine = central(opts.eps)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let ana = grads.data()[c];
            let denom = ana.abs().max(numeric.abs());
            if denom < ABS_FLOOR || (ana - numeric).abs() < ABS_GAP_FLOOR {
                skipped += 1;
                continue;
            }
            let rel = (ana - numeric).abs() / denom;
            group_max = group_max.max(rel);
        }
        max_rel = max_rel.max(group_max);
        groups.push(GroupReport {
            name: name.clone(),
            checked: coords.len() - skipped,
            skipped,
            max_rel: group_max,
        });
    }

    Ok(GradcheckReport { max_rel, groups })
}
