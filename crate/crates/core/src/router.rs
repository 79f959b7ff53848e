//! The shared router: pools token features into a descriptor, maps it
//! through a two-layer MLP to simplex merge weights, and scores routing
//! predictions against generator target distributions.
//!
//! Real samples carry no generator identity, so they are masked out of the
//! routing loss rather than given an invented target.

use crate::error::{Error, Result};
use crate::numeric::ops;
use crate::numeric::params::{LeafMap, ParamStore};
use crate::numeric::rng::DetRng;
use crate::numeric::scalar::Scalar;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::tensor::Tensor;

/// Merge weights may drift off the simplex by at most this much.
pub const MERGE_TOL: f64 = 1e-6;

pub const ROUTER_NAMES: [&str; 4] = ["router.l1.w", "router.l1.b", "router.l2.w", "router.l2.b"];

/// A point on the K-simplex: the convex coefficients over branches.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeWeights {
    values: Vec<f64>,
}

impl MergeWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.iter().any(|&v| !v.is_finite() || v < -MERGE_TOL)
            || (sum - 1.0).abs() > MERGE_TOL
        {
            return Err(Error::Routing(format!(
                "merge weights off the simplex: sum {sum}, values {values:?}"
            )));
        }
        Ok(MergeWeights { values })
    }

    pub fn uniform(k: usize) -> Self {
        MergeWeights {
            values: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(k: usize, hot: usize) -> Self {
        let mut values = vec![0.0; k];
        values[hot] = 1.0;
        MergeWeights { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Routing target distribution: one-hot for plain fakes, two-point for
/// fused fakes.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTarget(pub Vec<f64>);

/// Seeded router init: fan-in scaled weights, zero biases. Zero biases
/// with centered weights start the router near uniform.
pub fn init_router<E: Scalar>(
    store: &mut ParamStore<E>,
    embed_dim: usize,
    hidden: usize,
    k: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = DetRng::new(seed);
    let mut tn = |shape: &[usize]| -> Tensor<E> {
        let numel: usize = shape.iter().product();
        let std = 1.0 / (shape[0].max(1) as f64).sqrt();
        let data = (0..numel)
            .map(|_| E::from_f64(rng.trunc_normal(std, 2.0)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("consistent")
    };
    store.insert("router.l1.w", tn(&[embed_dim, hidden]), false)?;
    store.insert("router.l1.b", Tensor::zeros(&[1, hidden]), false)?;
    store.insert("router.l2.w", tn(&[hidden, k]), false)?;
    store.insert("router.l2.b", Tensor::zeros(&[1, k]), false)?;
    Ok(())
}

/// Widen the router output from K to K+1: old columns copied, new column
/// and bias entry zero, so pre-retraining logits extend with a zero.
pub fn redimension_router<E: Scalar>(store: &mut ParamStore<E>, new_k: usize) -> Result<()> {
    let w = store.tensor("router.l2.w")?.clone();
    let b = store.tensor("router.l2.b")?.clone();
    let (hidden, old_k) = (w.rows(), w.cols());
    if new_k != old_k + 1 {
        return Err(Error::Config(format!(
            "router re-dimension must grow by one column: {old_k} -> {new_k}"
        )));
    }
    let mut w2 = Tensor::zeros(&[hidden, new_k]);
    for i in 0..hidden {
        for j in 0..old_k {
            w2.set(i, j, w.at(i, j));
        }
    }
    let mut b2 = Tensor::zeros(&[1, new_k]);
    for j in 0..old_k {
        b2.set(0, j, b.at(0, j));
    }
    store.replace_tensor("router.l2.w", w2)?;
    store.replace_tensor("router.l2.b", b2)?;
    Ok(())
}

/// Pooled descriptor: the arithmetic mean over all token rows (class token
/// included).
pub fn pool<E: Scalar>(tokens: &Tensor<E>) -> Result<Tensor<E>> {
    ops::mean_rows(tokens)
}

/// softmax(MLP(descriptor)) with the shared two-layer router.
pub fn route<E: Scalar>(store: &ParamStore<E>, descriptor: &Tensor<E>) -> Result<MergeWeights> {
    let w1 = store.tensor("router.l1.w")?;
    if descriptor.shape() != [1, w1.rows()] {
        return Err(Error::Dimension(format!(
            "descriptor shape {:?} does not match router input width {}",
            descriptor.shape(),
            w1.rows()
        )));
    }
    let h = ops::gelu(&ops::add_row_broadcast(
        &ops::matmul(descriptor, w1)?,
        store.tensor("router.l1.b")?,
    )?);
    let logits = ops::add_row_broadcast(
        &ops::matmul(&h, store.tensor("router.l2.w")?)?,
        store.tensor("router.l2.b")?,
    )?;
    let pi = ops::softmax_rows(&logits)?;
    MergeWeights::new(pi.data().iter().map(|v| v.to_f64()).collect())
}

/// Tape-side router forward for training paths.
pub fn route_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &LeafMap,
    descriptor: NodeId,
    hidden: usize,
    k: usize,
) -> Result<NodeId> {
    let w1 = leaves.node("router.l1.w")?;
    let b1 = leaves.node("router.l1.b")?;
    let w2 = leaves.node("router.l2.w")?;
    let b2 = leaves.node("router.l2.b")?;
    if tape.value(w1).cols() != hidden || tape.value(w2).cols() != k {
        return Err(Error::Config(format!(
            "router tensors are {}x{} / {}x{}, expected hidden {hidden} and width {k}",
            tape.value(w1).rows(),
            tape.value(w1).cols(),
            tape.value(w2).rows(),
            tape.value(w2).cols(),
        )));
    }
    let h = tape.matmul(descriptor, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h);
    let logits = tape.matmul(h, w2)?;
    let logits = tape.add_row(logits, b2)?;
    tape.softmax_rows(logits)
}

/// Target distribution and mask for one sample. Real samples (generator 0)
/// are excluded from the routing loss.
pub fn routing_target(
    generator: usize,
    fusion: Option<(usize, usize, f64)>,
    k: usize,
) -> Result<(GeneratorTarget, bool)> {
    match fusion {
        Some((a, b, lambda)) => {
            if a == b {
                return Err(Error::Data(format!(
                    "fused pair must span two generators, got ({a}, {b})"
                )));
            }
            if a == 0 || b == 0 || a > k || b > k {
                return Err(Error::Data(format!(
                    "fused generators ({a}, {b}) out of range 1..={k}"
                )));
            }
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Data(format!("mixing ratio {lambda} outside [0,1]")));
            }
            let mut q = vec![0.0; k];
            q[a - 1] = lambda;
            q[b - 1] += 1.0 - lambda;
            Ok((GeneratorTarget(q), true))
        }
        None => {
            if generator == 0 {
                // masked: the target is never read
                Ok((GeneratorTarget(vec![0.0; k]), false))
            } else if generator > k {
                Err(Error::Data(format!(
                    "generator id {generator} out of range 1..={k}"
                )))
            } else {
                let mut q = vec![0.0; k];
                q[generator - 1] = 1.0;
                Ok((GeneratorTarget(q), true))
            }
        }
    }
}

pub struct RoutingLoss {
    pub value: f64,
    /// True when every sample was masked out and the loss is a hard zero.
    pub no_signal: bool,
}

/// Soft cross-entropy over the masked samples.
pub fn routing_loss(
    predicted: &[MergeWeights],
    targets: &[GeneratorTarget],
    mask: &[bool],
) -> Result<RoutingLoss> {
    if predicted.len() != targets.len() || predicted.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "routing loss batch lengths disagree: {} / {} / {}",
            predicted.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut rows_p = Vec::new();
    let mut rows_q = Vec::new();
    for ((p, q), &m) in predicted.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        if p.len() != q.0.len() {
            return Err(Error::Dimension(format!(
                "prediction width {} vs target width {}",
                p.len(),
                q.0.len()
            )));
        }
        rows_p.push(p.values().to_vec());
        rows_q.push(q.0.clone());
    }
    if rows_p.is_empty() {
        return Ok(RoutingLoss {
            value: 0.0,
            no_signal: true,
        });
    }
    let p = Tensor::from_rows(&rows_p)?;
    let q = Tensor::from_rows(&rows_q)?;
    Ok(RoutingLoss {
        value: ops::cross_entropy_soft(&p, &q)?,
        no_signal: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn router_store(d: usize, hidden: usize, k: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_router(&mut s, d, hidden, k, seed).unwrap();
        s
    }

    #[test]
    fn pool_constant_rows() {
        let v = vec![1.0f64, -2.0, 3.0];
        let x = Tensor::from_rows(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert_eq!(pool(&x).unwrap().data(), v.as_slice());

        let anti = Tensor::from_rows(&[v.clone(), v.iter().map(|x| -x).collect()]).unwrap();
        assert!(pool(&anti).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pool_matches_column_mean_oracle() {
        let mut rng = DetRng::new(2);
        let data: Vec<f64> = (0..65 * 64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x = Tensor::new(vec![65, 64], data).unwrap();
        let p = pool(&x).unwrap();
        for j in 0..64 {
            let want: f64 = (0..65).map(|i| x.at(i, j)).sum::<f64>() / 65.0;
            assert!((p.at(0, j) - want).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_final_layer_routes_uniform() {
        let mut s = router_store(8, 16, 4, 3);
        s.replace_tensor("router.l2.w", Tensor::zeros(&[16, 4])).unwrap();
        let desc = Tensor::new(vec![1, 8], vec![0.3; 8]).unwrap();
        let pi = route(&s, &desc).unwrap();
        for &v in pi.values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_shift_invariance() {
        let s = router_store(8, 16, 3, 5);
        let mut rng = DetRng::new(6);
        let desc =
            Tensor::new(vec![1, 8], (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let base = route(&s, &desc).unwrap();
        let mut shifted = router_store(8, 16, 3, 5);
        shifted
            .replace_tensor("router.l2.b", Tensor::full(&[1, 3], 4.2))
            .unwrap();
        let after = route(&shifted, &desc).unwrap();
        for (a, b) in base.values().iter().zip(after.values()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn route_matches_reevaluation_oracle() {
        let s = router_store(6, 10, 3, 9);
        let mut rng = DetRng::new(10);
        let desc: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let pi = route(&s, &Tensor::new(vec![1, 6], desc.clone()).unwrap()).unwrap();

        // oracle: re-evaluate the MLP with explicit loops
        let w1 = s.tensor("router.l1.w").unwrap();
        let w2 = s.tensor("router.l2.w").unwrap();
        let mut h = vec![0.0f64; 10];
        for j in 0..10 {
            for i in 0..6 {
                h[j] += desc[i] * w1.at(i, j);
            }
            h[j] = ops::gelu_scalar(h[j]);
        }
        let mut logits = vec![0.0f64; 3];
        for j in 0..3 {
            for i in 0..10 {
                logits[j] += h[i] * w2.at(i, j);
            }
        }
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, e) in pi.values().iter().zip(exps) {
            assert!((got - e / z).abs() < 1e-6);
        }
    }

    #[test]
    fn route_output_always_on_simplex() {
        let s = router_store(8, 16, 5, 11);
        let mut rng = DetRng::new(12);
        for _ in 0..500 {
            let desc: Vec<f64> = (0..8).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let pi = route(&s, &Tensor::new(vec![1, 8], desc).unwrap()).unwrap();
            let sum: f64 = pi.values().iter().sum();
            assert!((sum - 1.0).abs() < MERGE_TOL);
            assert!(pi.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn descriptor_width_checked() {
        let s = router_store(8, 16, 3, 13);
        let desc = Tensor::new(vec![1, 5], vec![0.0; 5]).unwrap();
        assert!(matches!(route(&s, &desc), Err(Error::Dimension(_))));
    }

    #[test]
    fn targets_one_hot_fused_and_masked() {
        let (q, m) = routing_target(2, None, 3).unwrap();
        assert_eq!(q.0, vec![0.0, 1.0, 0.0]);
        assert!(m);

        let (q, m) = routing_target(0, Some((1, 3, 0.25)), 3).unwrap();
        assert_eq!(q.0, vec![0.25, 0.0, 0.75]);
        assert!(m);

        let (_, m) = routing_target(0, None, 3).unwrap();
        assert!(!m);

        assert!(matches!(
            routing_target(0, Some((2, 2, 0.5)), 3),
            Err(Error::Data(_))
        ));
        assert!(matches!(routing_target(4, None, 3), Err(Error::Data(_))));
    }

    #[test]
    fn target_interpolation_endpoints_exact() {
        let (qa, _) = routing_target(0, Some((1, 2, 1.0)), 2).unwrap();
        assert_eq!(qa.0, vec![1.0, 0.0]);
        let (qb, _) = routing_target(0, Some((1, 2, 0.0)), 2).unwrap();
        assert_eq!(qb.0, vec![0.0, 1.0]);
    }

    #[test]
    fn routing_loss_perfect_uniform_and_oracle() {
        let one_hot = MergeWeights::one_hot(3, 1);
        let t = GeneratorTarget(vec![0.0, 1.0, 0.0]);
        let l = routing_loss(&[one_hot], &[t], &[true]).unwrap();
        assert!(l.value.abs() <= 1e-11);

        let half = MergeWeights::new(vec![0.5, 0.5]).unwrap();
        let t = GeneratorTarget(vec![0.5, 0.5]);
        let l = routing_loss(&[half], &[t], &[true]).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);

        // direct per-sample summation oracle over random simplex pairs
        let mut rng = DetRng::new(20);
        for _ in 0..30 {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut mask = Vec::new();
            let mut want = 0.0;
            let n = 4;
            for _ in 0..n {
                let raw: Vec<f64> = (0..3).map(|_| rng.next_f64() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let rawq: Vec<f64> = (0..3).map(|_| rng.next_f64() + 1e-3).collect();
                let sq: f64 = rawq.iter().sum();
                let q: Vec<f64> = rawq.iter().map(|v| v / sq).collect();
                for j in 0..3 {
                    want -= q[j] * p[j].max(1e-12).ln();
                }
                preds.push(MergeWeights::new(p).unwrap());
                targets.push(GeneratorTarget(q));
                mask.push(true);
            }
            want /= n as f64;
            let got = routing_loss(&preds, &targets, &mask).unwrap();
            assert!((got.value - want).abs() < 1e-9);
        }
    }

    #[test]
    fn routing_loss_all_masked_flags_no_signal() {
        let p = MergeWeights::uniform(3);
        let t = GeneratorTarget(vec![0.0; 3]);
        let l = routing_loss(&[p], &[t], &[false]).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.no_signal);
    }

    #[test]
    fn routing_loss_minimized_at_target() {
        let mut rng = DetRng::new(30);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..4).map(|_| rng.next_f64() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let qt = GeneratorTarget(q.clone());
            let at_q = routing_loss(
                &[MergeWeights::new(q.clone()).unwrap()],
                &[qt.clone()],
                &[true],
            )
            .unwrap()
            .value;
            for _ in 0..100 {
                let raw: Vec<f64> = (0..4).map(|_| rng.next_f64() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                let probe: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let at_probe = routing_loss(
                    &[MergeWeights::new(probe).unwrap()],
                    &[qt.clone()],
                    &[true],
                )
                .unwrap()
                .value;
                assert!(at_q <= at_probe + 1e-12);
            }
        }
    }

    #[test]
    fn redimension_copies_columns() {
        let mut s = router_store(6, 8, 2, 40);
        let w_before = s.tensor("router.l2.w").unwrap().clone();
        redimension_router(&mut s, 3).unwrap();
        let w = s.tensor("router.l2.w").unwrap();
        assert_eq!(w.shape(), [8, 3]);
        for i in 0..8 {
            assert_eq!(w.at(i, 0), w_before.at(i, 0));
            assert_eq!(w.at(i, 1), w_before.at(i, 1));
            assert_eq!(w.at(i, 2), 0.0);
        }
        assert!(redimension_router(&mut s, 5).is_err());
    }

    #[test]
    fn merge_weights_validation() {
        assert!(MergeWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(MergeWeights::new(vec![0.6, 0.5]).is_err());
        assert!(MergeWeights::new(vec![1.1, -0.1]).is_err());
    }
}
