//! Reverse-mode differentiation over a fixed operation set.
//!
//! A `Tape` records the forward pass of one batch; `backward` walks the
//! record once and accumulates vector-Jacobian products into per-node
//! gradient buffers. This is not a general autodiff graph — it covers
//! exactly the operations the model computation needs, which keeps every
//! adjoint small enough to verify against finite differences.

use crate::error::{Error, Result};
use crate::numeric::ops;
use crate::numeric::scalar::Scalar;
use crate::numeric::tensor::Tensor;

pub type NodeId = usize;

enum Op<E: Scalar> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: E },
    MulScalarNode { a: NodeId, s: NodeId },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    MeanRows { a: NodeId },
    SliceCols { a: NodeId, start: usize },
    SliceRows { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    CrossEntropySoft { pred: NodeId, target: Tensor<E> },
    L1 { a: NodeId },
    Mse { pred: NodeId, target: Tensor<E> },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` root w.r.t. node `id`, if any was
    /// accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul { a, b }, ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::transpose(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Transpose { a }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_row_broadcast(self.value(a), self.value(bias))?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddRow { a, bias }, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: E) -> NodeId {
        let v = ops::scale(self.value(a), c);
        let ng = self.needs(a);
        self.push(v, Op::Scale { a, c }, ng)
    }

    /// Multiply a tensor node by a [1,1] scalar node; gradients flow into
    /// both. Used to weight branch residuals by router outputs.
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != [1, 1] {
            return Err(Error::Dimension(format!(
                "scalar node must be [1,1], got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        let v = ops::scale(self.value(a), sv);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(v, Op::MulScalarNode { a, s }, ng))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = ops::gelu(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::Gelu { a }, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::SoftmaxRows { a }, ng))
    }

    pub fn layernorm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::layernorm(self.value(a), self.value(gain), self.value(bias))?;
        let ng = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(v, Op::LayerNorm { a, gain, bias }, ng))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::mean_rows(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::MeanRows { a }, ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_cols(self.value(a), start, len)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceCols { a, start }, ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_rows(self.value(a), start, len)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::SliceRows { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_rows(&vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_cols(&vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn cross_entropy_soft(&mut self, pred: NodeId, target: Tensor<E>) -> Result<NodeId> {
        let v = ops::cross_entropy_soft(self.value(pred), &target)?;
        let ng = self.needs(pred);
        let val = Tensor::new(vec![1, 1], vec![v])?;
        Ok(self.push(val, Op::CrossEntropySoft { pred, target }, ng))
    }

    pub fn l1(&mut self, a: NodeId) -> NodeId {
        let v = ops::l1(self.value(a));
        let ng = self.needs(a);
        self.push(
            Tensor::new(vec![1, 1], vec![v]).expect("scalar"),
            Op::L1 { a },
            ng,
        )
    }

    pub fn mse(&mut self, pred: NodeId, target: Tensor<E>) -> Result<NodeId> {
        let v = ops::mse(self.value(pred), &target)?;
        let ng = self.needs(pred);
        let val = Tensor::new(vec![1, 1], vec![v])?;
        Ok(self.push(val, Op::Mse { pred, target }, ng))
    }

    pub fn scalar_value(&self, id: NodeId) -> E {
        debug_assert_eq!(self.value(id).shape(), [1, 1]);
        self.value(id).data()[0]
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor<E>) {
        if !self.needs(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            slot => {
                *slot = Some(delta.clone());
            }
        }
    }

    /// Backpropagate from a scalar root. Gradients land in per-node buffers
    /// readable through `grad`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != [1, 1] {
            return Err(Error::Dimension(format!(
                "backward root must be a [1,1] scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root] = Some(Tensor::full(&[1, 1], E::ONE));

        for id in (0..=root).rev() {
            if !self.needs(id) {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backprop_one(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backprop_one(&mut self, id: NodeId, g: &Tensor<E>) -> Result<()> {
        // Ops that read multiple stored tensors clone what they need before
        // mutating the grad buffers; tensors are small at desk scale.
        enum Pending<E: Scalar> {
            One(NodeId, Tensor<E>),
            Two((NodeId, Tensor<E>), (NodeId, Tensor<E>)),
            Three((NodeId, Tensor<E>), (NodeId, Tensor<E>), (NodeId, Tensor<E>)),
            Many(Vec<(NodeId, Tensor<E>)>),
            None,
        }

        let pending: Pending<E> = match &self.nodes[id].op {
            Op::Leaf => Pending::None,
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let da = ops::matmul(g, &ops::transpose(bv)?)?;
                let db = ops::matmul(&ops::transpose(av)?, g)?;
                Pending::Two((a, da), (b, db))
            }
            Op::Transpose { a } => Pending::One(*a, ops::transpose(g)?),
            Op::Add { a, b } => Pending::Two((*a, g.clone()), (*b, g.clone())),
            Op::AddRow { a, bias } => {
                let d = g.cols();
                let mut bsum = vec![E::ZERO; d];
                for i in 0..g.rows() {
                    for (j, v) in g.row(i).iter().enumerate() {
                        bsum[j] += *v;
                    }
                }
                Pending::Two((*a, g.clone()), (*bias, Tensor::new(vec![1, d], bsum)?))
            }
            Op::Scale { a, c } => Pending::One(*a, ops::scale(g, *c)),
            Op::MulScalarNode { a, s } => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s].value.data()[0];
                let da = ops::scale(g, sv);
                let mut ds = E::ZERO;
                for (gv, av) in g.data().iter().zip(self.nodes[a].value.data()) {
                    ds += *gv * *av;
                }
                Pending::Two((a, da), (s, Tensor::new(vec![1, 1], vec![ds])?))
            }
            Op::Gelu { a } => {
                let a = *a;
                let av = &self.nodes[a].value;
                let mut da = g.clone();
                for (dv, &x) in da.data_mut().iter_mut().zip(av.data()) {
                    *dv *= ops::gelu_grad_scalar(x);
                }
                Pending::One(a, da)
            }
            Op::SoftmaxRows { a } => {
                // dx_i = y_i · (g_i − Σ_j g_j·y_j), rows independent
                let a = *a;
                let y = &self.nodes[id].value;
                let mut da = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mut dot = E::ZERO;
                    for (gv, yv) in gr.iter().zip(yr.iter()) {
                        dot += *gv * *yv;
                    }
                    let dr = da.row_mut(i);
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                Pending::One(a, da)
            }
            Op::LayerNorm { a, gain, bias } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let x = &self.nodes[a].value;
                let gv = &self.nodes[gain].value;
                let d = x.cols();
                let inv_d = E::ONE / E::from_f64(d as f64);
                let eps = E::from_f64(ops::LAYERNORM_EPS);
                let mut da = Tensor::zeros(x.shape());
                let mut dgain = vec![E::ZERO; d];
                let mut dbias = vec![E::ZERO; d];
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let gr = g.row(i);
                    let mut mean = E::ZERO;
                    for &v in xr {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = E::ZERO;
                    for &v in xr {
                        let c = v - mean;
                        var += c * c;
                    }
                    var *= inv_d;
                    let rstd = E::ONE / (var + eps).sqrt();
                    // xhat and the two row-level reductions
                    let mut sum_dxhat = E::ZERO;
                    let mut sum_dxhat_xhat = E::ZERO;
                    let mut dxhat = vec![E::ZERO; d];
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxh = gr[j] * gv.data()[j];
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat;
                        dxhat[j] = dxh;
                    }
                    let dr = da.row_mut(i);
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        dr[j] = rstd
                            * (dxhat[j] - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                Pending::Three(
                    (a, da),
                    (gain, Tensor::new(vec![1, d], dgain)?),
                    (bias, Tensor::new(vec![1, d], dbias)?),
                )
            }
            Op::MeanRows { a } => {
                let a = *a;
                let n = self.nodes[a].value.rows();
                let inv = E::ONE / E::from_f64(n as f64);
                let mut da = Tensor::zeros(self.nodes[a].value.shape());
                for i in 0..n {
                    let dr = da.row_mut(i);
                    for (j, v) in g.row(0).iter().enumerate() {
                        dr[j] = *v * inv;
                    }
                }
                Pending::One(a, da)
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let mut da = Tensor::zeros(self.nodes[a].value.shape());
                for i in 0..g.rows() {
                    let dr = da.row_mut(i);
                    for (j, v) in g.row(i).iter().enumerate() {
                        dr[start + j] = *v;
                    }
                }
                Pending::One(a, da)
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let mut da = Tensor::zeros(self.nodes[a].value.shape());
                for i in 0..g.rows() {
                    let dr = da.row_mut(start + i);
                    dr.copy_from_slice(g.row(i));
                }
                Pending::One(a, da)
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let rows = self.nodes[p].value.rows();
                    out.push((p, ops::slice_rows(g, offset, rows)?));
                    offset += rows;
                }
                Pending::Many(out)
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let cols = self.nodes[p].value.cols();
                    out.push((p, ops::slice_cols(g, offset, cols)?));
                    offset += cols;
                }
                Pending::Many(out)
            }
            Op::CrossEntropySoft { pred, target } => {
                // d/dp of −(1/B)·Σ t·ln(max(p, clamp)): zero below the clamp
                let pred = *pred;
                let pv = &self.nodes[pred].value;
                let clamp = E::from_f64(ops::LOG_CLAMP);
                let inv_b = E::ONE / E::from_f64(pv.rows() as f64);
                let g0 = g.data()[0];
                let mut dp = Tensor::zeros(pv.shape());
                for ((d, &p), &t) in dp
                    .data_mut()
                    .iter_mut()
                    .zip(pv.data())
                    .zip(target.data())
                {
                    if p > clamp {
                        *d = -g0 * inv_b * t / p;
                    }
                }
                Pending::One(pred, dp)
            }
            Op::L1 { a } => {
                let a = *a;
                let g0 = g.data()[0];
                let da = self.nodes[a].value.map(|v| {
                    if v > E::ZERO {
                        g0
                    } else if v < E::ZERO {
                        -g0
                    } else {
                        E::ZERO
                    }
                });
                Pending::One(a, da)
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                let pv = &self.nodes[pred].value;
                let scale = E::from_f64(2.0 / pv.numel() as f64) * g.data()[0];
                let mut dp = Tensor::zeros(pv.shape());
                for ((d, &p), &t) in dp
                    .data_mut()
                    .iter_mut()
                    .zip(pv.data())
                    .zip(target.data())
                {
                    *d = scale * (p - t);
                }
                Pending::One(pred, dp)
            }
        };

        match pending {
            Pending::None => {}
            Pending::One(a, da) => self.accumulate(a, &da),
            Pending::Two((a, da), (b, db)) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Pending::Three((a, da), (b, db), (c, dc)) => {
                self.accumulate(a, &da);
                self.accumulate(b, &db);
                self.accumulate(c, &dc);
            }
            Pending::Many(items) => {
                for (n, d) in items {
                    self.accumulate(n, &d);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::DetRng;

    /// Central-difference probe of a scalar tape program, rebuilt per probe.
    fn numeric_grad(
        build: impl Fn(&mut Tape<f64>, &[f64]) -> NodeId,
        at: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(at.len());
        for i in 0..at.len() {
            let mut plus = at.to_vec();
            plus[i] += eps;
            let mut minus = at.to_vec();
            minus[i] -= eps;
            let mut tp = Tape::new();
            let rp = build(&mut tp, &plus);
            let mut tm = Tape::new();
            let rm = build(&mut tm, &minus);
            out.push((tp.scalar_value(rp) - tm.scalar_value(rm)) / (2.0 * eps));
        }
        out
    }

    fn check_program(
        build: impl Fn(&mut Tape<f64>, &[f64]) -> (Vec<NodeId>, NodeId),
        at: &[f64],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let (leaves, root) = build(&mut tape, at);
        tape.backward(root).unwrap();
        let mut analytic = Vec::new();
        for id in leaves {
            let g = tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()));
            analytic.extend_from_slice(g.data());
        }
        let numeric = numeric_grad(
            |t, xs| build(t, xs).1,
            at,
            1e-5,
        );
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let denom = a.abs().max(n.abs());
            if denom < 1e-8 {
                continue;
            }
            let rel = (a - n).abs() / denom;
            assert!(rel < tol, "coord {i}: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = DetRng::new(1);
        let at: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        check_program(
            |tape, xs| {
                let a = tape.leaf(Tensor::new(vec![2, 3], xs[..6].to_vec()).unwrap(), true);
                let b = tape.leaf(Tensor::new(vec![3, 2], xs[6..].to_vec()).unwrap(), true);
                let c = tape.matmul(a, b).unwrap();
                let sq = tape.mse(c, Tensor::zeros(&[2, 2])).unwrap();
                (vec![a, b], sq)
            },
            &at,
            1e-6,
        );
    }

    #[test]
    fn softmax_ce_gradients() {
        let mut rng = DetRng::new(2);
        let at: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        check_program(
            |tape, xs| {
                let logits = tape.leaf(Tensor::new(vec![2, 3], xs.to_vec()).unwrap(), true);
                let p = tape.softmax_rows(logits).unwrap();
                let target =
                    Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
                let loss = tape.cross_entropy_soft(p, target).unwrap();
                (vec![logits], loss)
            },
            &at,
            1e-6,
        );
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = DetRng::new(3);
        let at: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        check_program(
            |tape, xs| {
                let x = tape.leaf(Tensor::new(vec![2, 4], xs[..8].to_vec()).unwrap(), true);
                let g = tape.leaf(Tensor::new(vec![1, 4], xs[8..12].to_vec()).unwrap(), true);
                let b = tape.leaf(Tensor::new(vec![1, 4], xs[12..].to_vec()).unwrap(), true);
                let y = tape.layernorm(x, g, b).unwrap();
                let loss = tape
                    .mse(y, Tensor::full(&[2, 4], 0.3))
                    .unwrap();
                (vec![x, g, b], loss)
            },
            &at,
            1e-5,
        );
    }

    #[test]
    fn attention_shaped_gradients() {
        // one head of scaled dot-product attention end to end
        let mut rng = DetRng::new(4);
        let at: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        check_program(
            |tape, xs| {
                let q = tape.leaf(Tensor::new(vec![2, 4], xs[..8].to_vec()).unwrap(), true);
                let k = tape.leaf(Tensor::new(vec![2, 4], xs[8..16].to_vec()).unwrap(), true);
                let v = tape.leaf(Tensor::new(vec![2, 4], xs[16..].to_vec()).unwrap(), true);
                let kt = tape.transpose(k).unwrap();
                let scores = tape.matmul(q, kt).unwrap();
                let scaled = tape.scale(scores, 0.5);
                let attn = tape.softmax_rows(scaled).unwrap();
                let out = tape.matmul(attn, v).unwrap();
                let loss = tape.mse(out, Tensor::full(&[2, 4], 0.1)).unwrap();
                (vec![q, k, v], loss)
            },
            &at,
            1e-5,
        );
    }

    #[test]
    fn gelu_mean_slice_concat_gradients() {
        let mut rng = DetRng::new(5);
        let at: Vec<f64> = (0..12).map(|_| rng.uniform(-1.5, 1.5)).collect();
        check_program(
            |tape, xs| {
                let x = tape.leaf(Tensor::new(vec![3, 4], xs.to_vec()).unwrap(), true);
                let g = tape.gelu(x);
                let left = tape.slice_cols(g, 0, 2).unwrap();
                let right = tape.slice_cols(g, 2, 2).unwrap();
                let swapped = tape.concat_cols(&[right, left]).unwrap();
                let top = tape.slice_rows(swapped, 0, 2).unwrap();
                let pooled = tape.mean_rows(top).unwrap();
                let loss = tape.mse(pooled, Tensor::full(&[1, 4], 0.2)).unwrap();
                (vec![x], loss)
            },
            &at,
            1e-5,
        );
    }

    #[test]
    fn scalar_weighting_gradients() {
        let mut rng = DetRng::new(6);
        let at: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        check_program(
            |tape, xs| {
                let a = tape.leaf(Tensor::new(vec![2, 2], xs[..4].to_vec()).unwrap(), true);
                let s = tape.leaf(Tensor::new(vec![1, 1], xs[4..].to_vec()).unwrap(), true);
                let w = tape.mul_scalar_node(a, s).unwrap();
                let loss = tape.mse(w, Tensor::full(&[2, 2], -0.4)).unwrap();
                (vec![a, s], loss)
            },
            &at,
            1e-6,
        );
    }

    #[test]
    fn l1_and_bias_broadcast_gradients() {
        let at = vec![0.5, -0.7, 0.2, 0.9, -0.3, 0.4];
        check_program(
            |tape, xs| {
                let x = tape.leaf(Tensor::new(vec![2, 2], xs[..4].to_vec()).unwrap(), true);
                let b = tape.leaf(Tensor::new(vec![1, 2], xs[4..].to_vec()).unwrap(), true);
                let y = tape.add_row(x, b).unwrap();
                let l = tape.l1(y);
                (vec![x, b], l)
            },
            &at,
            1e-6,
        );
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 2], 1.0), false);
        let b = tape.leaf(Tensor::full(&[2, 2], 2.0), true);
        let c = tape.add(a, b).unwrap();
        let loss = tape.mse(c, Tensor::zeros(&[2, 2])).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).is_none());
        assert!(tape.grad(b).is_some());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::full(&[2, 2], 1.0), true);
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = mse(x + x) → d/dx = 4·x·... compare against probe
        let at = vec![0.3, -0.8, 0.1, 0.6];
        check_program(
            |tape, xs| {
                let x = tape.leaf(Tensor::new(vec![2, 2], xs.to_vec()).unwrap(), true);
                let y = tape.add(x, x).unwrap();
                let loss = tape.mse(y, Tensor::zeros(&[2, 2])).unwrap();
                (vec![x], loss)
            },
            &at,
            1e-6,
        );
    }
}
