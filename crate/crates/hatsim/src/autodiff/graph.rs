//! The computation tape: eager forward, reverse sweep for gradients.

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{HatError, Result};
use crate::perturb::ir_drop::{
    coupled_attenuation, simplified_scaling, CoupledParams, CoupledState, SimplifiedState,
};
use crate::perturb::quantize::{QuantKernel, Surrogate};
use crate::tensor::TensorValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant or input leaf.
    Leaf,
    /// Leaf bound to a parameter slot.
    Param(ParamId),
    /// a · b
    MatMul,
    /// x · wᵀ (layer orientation: x [b,n], w [m,n])
    Linear,
    /// z [b,m] + bias [m], broadcast over rows
    AddBias,
    Add,
    Sub,
    Mul,
    Neg,
    Relu,
    Abs,
    Square,
    Scale(f64),
    AddScalar,
    Clip {
        lo: f64,
        hi: f64,
    },
    ClampMin(f64),
    /// max |a_ij| → [1]; subgradient at the (first) argmax entry
    MaxAbs,
    MeanAll,
    /// t ⊙ s, s scalar node [1]
    MulScalarNode,
    /// t / s, s scalar node [1]
    DivScalarNode,
    AddConst,
    MulConst(TensorValue),
    /// active ⊙ a + (1 − active) ⊙ pinned; gradient masked by `active`
    StuckSelect {
        active: TensorValue,
    },
    /// Forward replaced by a precomputed value, backward identity.
    SurrogateIdentity,
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    HalfSquaredError {
        targets: TensorValue,
    },
    Quantize {
        kernel: Option<QuantKernel>,
        surrogate: Surrogate,
    },
    /// inputs [w_eff, x]
    IrDropSimplified {
        beta: f64,
        state: SimplifiedState,
    },
    /// inputs [w_eff, gsum, x]
    IrDropCoupled {
        state: CoupledState,
    },
    /// Mean of K same-shape inputs.
    AvgN,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: TensorValue,
    needs_grad: bool,
}

/// Gradients of the root with respect to every node that needed them.
pub struct BackwardResult {
    grads: Vec<Option<Vec<f64>>>,
}

impl BackwardResult {
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorValue {
        &self.nodes[id.0].value
    }

    /// Output of the (already evaluated) graph rooted at `id`. Values are
    /// computed eagerly at insertion, so this is a cached lookup.
    pub fn forward_eval(&self, id: NodeId) -> &TensorValue {
        self.value(id)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: TensorValue) -> NodeId {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ----- leaves -----

    pub fn leaf(&mut self, value: TensorValue) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn input(&mut self, value: TensorValue) -> NodeId {
        self.leaf(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        let value = p.value.clone();
        if p.trainable {
            self.push(Op::Param(id), vec![], value)
        } else {
            self.push(Op::Leaf, vec![], value)
        }
    }

    // ----- binary -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let value = crate::tensor::matmul_nt(self.value(x), self.value(w))?;
        Ok(self.push(Op::Linear, vec![x, w], value))
    }

    pub fn add_bias(&mut self, z: NodeId, bias: NodeId) -> Result<NodeId> {
        let zv = self.value(z);
        let bv = self.value(bias);
        if zv.shape().len() != 2 || bv.shape() != [zv.cols()] {
            return Err(HatError::ShapeMismatch {
                op: "add_bias",
                lhs: zv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (b, m) = (zv.rows(), zv.cols());
        let value = TensorValue::from_fn(&[b, m], |i| zv.data()[i] + bv.data()[i % m]);
        Ok(self.push(Op::AddBias, vec![z, bias], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub, vec![a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn mul_scalar_node(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        self.expect_scalar(s, "mul_scalar_node")?;
        let sv = self.value(s).data()[0];
        let value = self.value(t).map(|v| v * sv);
        Ok(self.push(Op::MulScalarNode, vec![t, s], value))
    }

    pub fn div_scalar_node(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        self.expect_scalar(s, "div_scalar_node")?;
        let sv = self.value(s).data()[0];
        debug_assert!(sv != 0.0, "division by zero scale");
        let value = self.value(t).map(|v| v / sv);
        Ok(self.push(Op::DivScalarNode, vec![t, s], value))
    }

    // ----- unary -----

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| -v);
        self.push(Op::Neg, vec![a], value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu, vec![a], value)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs, vec![a], value)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * v);
        self.push(Op::Square, vec![a], value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar, vec![a], value)
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(Op::Clip { lo, hi }, vec![a], value)
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let value = self.value(a).map(|v| v.max(lo));
        self.push(Op::ClampMin(lo), vec![a], value)
    }

    pub fn max_abs(&mut self, a: NodeId) -> NodeId {
        let value = TensorValue::scalar(self.value(a).max_abs());
        self.push(Op::MaxAbs, vec![a], value)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = TensorValue::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(Op::MeanAll, vec![a], value)
    }

    pub fn add_const(&mut self, a: NodeId, c: TensorValue) -> Result<NodeId> {
        let value = self.value(a).zip_map(&c, |x, y| x + y)?;
        Ok(self.push(Op::AddConst, vec![a], value))
    }

    pub fn mul_const(&mut self, a: NodeId, c: TensorValue) -> Result<NodeId> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(Op::MulConst(c), vec![a], value))
    }

    /// `active ⊙ a + (1 − active) ⊙ pinned`; `active` is 1.0 on live entries
    /// and 0.0 on stuck ones, which also masks the backward pass.
    pub fn stuck_select(
        &mut self,
        a: NodeId,
        active: TensorValue,
        pinned: TensorValue,
    ) -> Result<NodeId> {
        let value = self
            .value(a)
            .zip_map(&active, |g, s| g * s)?
            .zip_map(&pinned.zip_map(&active, |c, s| c * (1.0 - s))?, |x, y| x + y)?;
        Ok(self.push(Op::StuckSelect { active }, vec![a], value))
    }

    /// Replace the forward value (e.g. by a pulse-programmed conductance
    /// matrix) while keeping an identity backward: deviations from the target
    /// are treated as constants.
    pub fn surrogate_identity(&mut self, a: NodeId, value: TensorValue) -> Result<NodeId> {
        if value.shape() != self.value(a).shape() {
            return Err(HatError::ShapeMismatch {
                op: "surrogate_identity",
                lhs: self.value(a).shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        Ok(self.push(Op::SurrogateIdentity, vec![a], value))
    }

    // ----- losses -----

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(HatError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (lv.rows(), lv.cols());
        let mut total = 0.0;
        for r in 0..b {
            if labels[r] >= c {
                return Err(HatError::InvalidConfig(format!(
                    "label {} out of range for {} classes",
                    labels[r], c
                )));
            }
            let row = &lv.data()[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[r]];
        }
        let value = TensorValue::scalar(total / b as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            value,
        ))
    }

    /// Mean over entries of `½ (pred − target)²`.
    pub fn half_squared_error(&mut self, pred: NodeId, targets: TensorValue) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != targets.shape() {
            return Err(HatError::ShapeMismatch {
                op: "half_squared_error",
                lhs: pv.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let n = pv.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(p, t)| 0.5 * (p - t) * (p - t))
            .sum();
        let value = TensorValue::scalar(total / n);
        Ok(self.push(Op::HalfSquaredError { targets }, vec![pred], value))
    }

    // ----- perturbation operators -----

    /// Uniform quantizer with a surrogate backward. `kernel: None` denotes a
    /// degenerate per-batch range (all inputs equal) and acts as identity.
    /// For the stochastic surrogate the forward is `a + noise` instead.
    pub fn quantize(
        &mut self,
        a: NodeId,
        kernel: Option<QuantKernel>,
        surrogate: Surrogate,
        noise: Option<TensorValue>,
    ) -> Result<NodeId> {
        let value = match (&kernel, surrogate) {
            (None, _) => self.value(a).clone(),
            (Some(_), Surrogate::Stochastic) => {
                let n = noise.as_ref().ok_or_else(|| {
                    HatError::InvalidSpec("stochastic surrogate requires drawn noise".into())
                })?;
                self.value(a).zip_map(n, |v, e| v + e)?
            }
            (Some(k), _) => self.value(a).map(|v| k.quantize(v)),
        };
        Ok(self.push(Op::Quantize { kernel, surrogate }, vec![a], value))
    }

    /// `z̃ = w_eff (D(x) x)` with the diagonal input-scaling model.
    pub fn ir_drop_simplified(
        &mut self,
        w_eff: NodeId,
        x: NodeId,
        beta: f64,
        array_size: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let state = simplified_scaling(xv, beta, array_size, eps);
        let xs = xv.zip_map(&state.d, |v, d| v * d)?;
        let value = crate::tensor::matmul_nt(&xs, self.value(w_eff))?;
        Ok(self.push(Op::IrDropSimplified { beta, state }, vec![w_eff, x], value))
    }

    /// Coupled IR-drop fixed point; `parasitic` is the per-read wire noise
    /// multiplier (None for the deterministic model).
    pub fn ir_drop_coupled(
        &mut self,
        w_eff: NodeId,
        gsum: NodeId,
        x: NodeId,
        params: &CoupledParams,
        array_size: usize,
        parasitic: Option<TensorValue>,
    ) -> Result<NodeId> {
        let state = coupled_attenuation(
            self.value(gsum),
            self.value(x),
            params,
            array_size,
            parasitic.as_ref(),
        )?;
        let v = self.value(x).zip_map(&state.phi, |xv, f| xv * f)?;
        let value = crate::tensor::matmul_nt(&v, self.value(w_eff))?;
        Ok(self.push(Op::IrDropCoupled { state }, vec![w_eff, gsum, x], value))
    }

    /// Mean of same-shape nodes.
    pub fn avg_n(&mut self, items: &[NodeId]) -> Result<NodeId> {
        assert!(!items.is_empty(), "avg_n of nothing");
        let shape = self.value(items[0]).shape().to_vec();
        for &it in items {
            if self.value(it).shape() != shape {
                return Err(HatError::ShapeMismatch {
                    op: "avg_n",
                    lhs: shape,
                    rhs: self.value(it).shape().to_vec(),
                });
            }
        }
        let k = items.len() as f64;
        let mut acc = vec![0.0; self.value(items[0]).len()];
        for &it in items {
            for (dst, &v) in acc.iter_mut().zip(self.value(it).data()) {
                *dst += v;
            }
        }
        for v in &mut acc {
            *v /= k;
        }
        let value = TensorValue::new(shape, acc)?;
        Ok(self.push(Op::AvgN, items.to_vec(), value))
    }

    fn expect_scalar(&self, s: NodeId, op: &'static str) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(HatError::ShapeMismatch {
                op,
                lhs: self.value(s).shape().to_vec(),
                rhs: vec![1],
            });
        }
        Ok(())
    }

    // ----- backward -----

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, root: NodeId) -> Result<BackwardResult> {
        if self.value(root).len() != 1 {
            return Err(HatError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(BackwardResult { grads })
    }

    /// Add this graph's parameter gradients into the store, zeroing entries
    /// masked by each parameter's freeze mask.
    pub fn accumulate_param_grads(&self, bw: &BackwardResult, store: &mut ParamStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &bw.grads[idx] {
                    let p = store.get_mut(pid);
                    let freeze = p.freeze.clone();
                    for (k, dst) in p.grad.data_mut().iter_mut().enumerate() {
                        let frozen = freeze.as_ref().is_some_and(|f| f[k]);
                        if !frozen {
                            *dst += g[k];
                        }
                    }
                }
            }
        }
    }

    fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl Fn(&mut [f64])) {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        f(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let want = |graph: &Graph, i: usize| graph.nodes[ins[i].0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}

            Op::MatMul => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                if want(self, 0) {
                    Self::add_into(grads, ins[0], a.len(), |da| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * b.data()[p * n + j];
                                }
                                da[i * k + p] += acc;
                            }
                        }
                    });
                }
                if want(self, 1) {
                    Self::add_into(grads, ins[1], b.len(), |db| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += a.data()[i * k + p] * g[i * n + j];
                                }
                                db[p * n + j] += acc;
                            }
                        }
                    });
                }
            }

            Op::Linear => {
                let x = self.value(ins[0]);
                let w = self.value(ins[1]);
                let (b, n) = (x.rows(), x.cols());
                let m = w.rows();
                if want(self, 0) {
                    Self::add_into(grads, ins[0], x.len(), |dx| {
                        for r in 0..b {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for o in 0..m {
                                    acc += g[r * m + o] * w.data()[o * n + j];
                                }
                                dx[r * n + j] += acc;
                            }
                        }
                    });
                }
                if want(self, 1) {
                    Self::add_into(grads, ins[1], w.len(), |dw| {
                        for o in 0..m {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for r in 0..b {
                                    acc += g[r * m + o] * x.data()[r * n + j];
                                }
                                dw[o * n + j] += acc;
                            }
                        }
                    });
                }
            }

            Op::AddBias => {
                let z = self.value(ins[0]);
                let (b, m) = (z.rows(), z.cols());
                if want(self, 0) {
                    Self::add_into(grads, ins[0], z.len(), |dz| {
                        for (dst, &gv) in dz.iter_mut().zip(g) {
                            *dst += gv;
                        }
                    });
                }
                if want(self, 1) {
                    Self::add_into(grads, ins[1], m, |db| {
                        for r in 0..b {
                            for o in 0..m {
                                db[o] += g[r * m + o];
                            }
                        }
                    });
                }
            }

            Op::Add => {
                for side in 0..2 {
                    if want(self, side) {
                        Self::add_into(grads, ins[side], g.len(), |d| {
                            for (dst, &gv) in d.iter_mut().zip(g) {
                                *dst += gv;
                            }
                        });
                    }
                }
            }

            Op::Sub => {
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for (dst, &gv) in d.iter_mut().zip(g) {
                            *dst += gv;
                        }
                    });
                }
                if want(self, 1) {
                    Self::add_into(grads, ins[1], g.len(), |d| {
                        for (dst, &gv) in d.iter_mut().zip(g) {
                            *dst -= gv;
                        }
                    });
                }
            }

            Op::Mul => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                if want(self, 0) {
                    Self::add_into(grads, ins[0], a.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * b.data()[i];
                        }
                    });
                }
                if want(self, 1) {
                    Self::add_into(grads, ins[1], b.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * a.data()[i];
                        }
                    });
                }
            }

            Op::Neg => {
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for (dst, &gv) in d.iter_mut().zip(g) {
                            *dst -= gv;
                        }
                    });
                }
            }

            Op::Relu => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for i in 0..d.len() {
                            if a.data()[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }

            Op::Abs => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for i in 0..d.len() {
                            let s = if a.data()[i] > 0.0 {
                                1.0
                            } else if a.data()[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d[i] += g[i] * s;
                        }
                    });
                }
            }

            Op::Square => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * 2.0 * a.data()[i];
                        }
                    });
                }
            }

            Op::Scale(c) => {
                if want(self, 0) {
                    let c = *c;
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for (dst, &gv) in d.iter_mut().zip(g) {
                            *dst += c * gv;
                        }
                    });
                }
            }

            Op::AddScalar | Op::AddConst => {
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for (dst, &gv) in d.iter_mut().zip(g) {
                            *dst += gv;
                        }
                    });
                }
            }

            Op::MulConst(c) => {
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * c.data()[i];
                        }
                    });
                }
            }

            Op::Clip { lo, hi } => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    let (lo, hi) = (*lo, *hi);
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for i in 0..d.len() {
                            let v = a.data()[i];
                            if v >= lo && v <= hi {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }

            Op::ClampMin(lo) => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    let lo = *lo;
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for i in 0..d.len() {
                            if a.data()[i] >= lo {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }

            Op::MaxAbs => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    let (k, v) = a.argmax_abs();
                    let s = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    Self::add_into(grads, ins[0], a.len(), |d| {
                        d[k] += g[0] * s;
                    });
                }
            }

            Op::MeanAll => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    let n = a.len() as f64;
                    Self::add_into(grads, ins[0], a.len(), |d| {
                        for dst in d.iter_mut() {
                            *dst += g[0] / n;
                        }
                    });
                }
            }

            Op::MulScalarNode => {
                let t = self.value(ins[0]);
                let s = self.value(ins[1]).data()[0];
                if want(self, 0) {
                    Self::add_into(grads, ins[0], t.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * s;
                        }
                    });
                }
                if want(self, 1) {
                    let acc: f64 = g.iter().zip(t.data()).map(|(&gv, &tv)| gv * tv).sum();
                    Self::add_into(grads, ins[1], 1, |d| {
                        d[0] += acc;
                    });
                }
            }

            Op::DivScalarNode => {
                let t = self.value(ins[0]);
                let s = self.value(ins[1]).data()[0];
                if want(self, 0) {
                    Self::add_into(grads, ins[0], t.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] / s;
                        }
                    });
                }
                if want(self, 1) {
                    let acc: f64 = g
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &tv)| -gv * tv / (s * s))
                        .sum();
                    Self::add_into(grads, ins[1], 1, |d| {
                        d[0] += acc;
                    });
                }
            }

            Op::StuckSelect { active, .. } => {
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * active.data()[i];
                        }
                    });
                }
            }

            Op::SurrogateIdentity => {
                if want(self, 0) {
                    Self::add_into(grads, ins[0], g.len(), |d| {
                        for (dst, &gv) in d.iter_mut().zip(g) {
                            *dst += gv;
                        }
                    });
                }
            }

            Op::SoftmaxCrossEntropy { labels } => {
                let logits = self.value(ins[0]);
                let (b, c) = (logits.rows(), logits.cols());
                if want(self, 0) {
                    Self::add_into(grads, ins[0], logits.len(), |d| {
                        for r in 0..b {
                            let row = &logits.data()[r * c..(r + 1) * c];
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                            for j in 0..c {
                                let p = (row[j] - mx).exp() / denom;
                                let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                                d[r * c + j] += g[0] * (p - onehot) / b as f64;
                            }
                        }
                    });
                }
            }

            Op::HalfSquaredError { targets } => {
                let pred = self.value(ins[0]);
                if want(self, 0) {
                    let n = pred.len() as f64;
                    Self::add_into(grads, ins[0], pred.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[0] * (pred.data()[i] - targets.data()[i]) / n;
                        }
                    });
                }
            }

            Op::Quantize { kernel, surrogate } => {
                let a = self.value(ins[0]);
                if want(self, 0) {
                    match (kernel, surrogate) {
                        (None, _) | (_, Surrogate::Stochastic) => {
                            Self::add_into(grads, ins[0], g.len(), |d| {
                                for (dst, &gv) in d.iter_mut().zip(g) {
                                    *dst += gv;
                                }
                            });
                        }
                        (Some(_), Surrogate::None) => {}
                        (Some(k), Surrogate::Ste) => {
                            Self::add_into(grads, ins[0], g.len(), |d| {
                                for i in 0..d.len() {
                                    if k.in_range(a.data()[i]) {
                                        d[i] += g[i];
                                    }
                                }
                            });
                        }
                        (Some(k), Surrogate::Smooth { alpha_smooth }) => {
                            let alpha = *alpha_smooth;
                            Self::add_into(grads, ins[0], g.len(), |d| {
                                for i in 0..d.len() {
                                    d[i] += g[i] * k.smooth_derivative(a.data()[i], alpha);
                                }
                            });
                        }
                    }
                }
            }

            Op::IrDropSimplified { beta, state } => {
                let w = self.value(ins[0]);
                let x = self.value(ins[1]);
                let (b, n) = (x.rows(), x.cols());
                let m = w.rows();
                // gw[b,j] = Σ_o g[b,o]·w[o,j]
                let mut gw = vec![0.0; b * n];
                for r in 0..b {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for o in 0..m {
                            acc += g[r * m + o] * w.data()[o * n + j];
                        }
                        gw[r * n + j] = acc;
                    }
                }
                if want(self, 0) {
                    Self::add_into(grads, ins[0], w.len(), |dw| {
                        for o in 0..m {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for r in 0..b {
                                    acc += g[r * m + o] * x.data()[r * n + j] * state.d.at(r, j);
                                }
                                dw[o * n + j] += acc;
                            }
                        }
                    });
                }
                if want(self, 1) {
                    let beta = *beta;
                    Self::add_into(grads, ins[1], x.len(), |dx| {
                        for r in 0..b {
                            // Direct path through D entries.
                            for j in 0..n {
                                dx[r * n + j] += gw[r * n + j] * state.d.at(r, j);
                            }
                            // Path through the input statistic m(x).
                            let mut dm = 0.0;
                            for j in 0..n {
                                if state.d.at(r, j) > 0.0 {
                                    dm -= gw[r * n + j]
                                        * x.data()[r * n + j]
                                        * beta
                                        * state.depth_ratio[j];
                                }
                            }
                            if dm != 0.0 {
                                let denom = state.max_abs[r] + crate::perturb::ir_drop::STAT_EPS;
                                for k in 0..n {
                                    let xv = x.data()[r * n + k];
                                    let s = if xv > 0.0 {
                                        1.0
                                    } else if xv < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    };
                                    let mut dmdx = s / (n as f64 * denom);
                                    if k == state.argmax[r] {
                                        dmdx -= state.mean_abs[r] * s / (denom * denom);
                                    }
                                    dx[r * n + k] += dm * dmdx;
                                }
                            }
                        }
                    });
                }
            }

            Op::IrDropCoupled { state } => {
                let w = self.value(ins[0]);
                let gsum = self.value(ins[1]);
                let x = self.value(ins[2]);
                let (b, n) = (x.rows(), x.cols());
                let m = w.rows();
                let mut gw = vec![0.0; b * n];
                for r in 0..b {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for o in 0..m {
                            acc += g[r * m + o] * w.data()[o * n + j];
                        }
                        gw[r * n + j] = acc;
                    }
                }
                if want(self, 0) {
                    Self::add_into(grads, ins[0], w.len(), |dw| {
                        for o in 0..m {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for r in 0..b {
                                    acc += g[r * m + o] * x.data()[r * n + j] * state.phi.at(r, j);
                                }
                                dw[o * n + j] += acc;
                            }
                        }
                    });
                }
                if want(self, 1) {
                    // dL/dc_j routed to every entry of column j.
                    let mut dc = vec![0.0; n];
                    for r in 0..b {
                        for j in 0..n {
                            dc[j] += gw[r * n + j]
                                * x.data()[r * n + j]
                                * state.dphi_da.at(r, j)
                                * state.lambda.at(r, j);
                        }
                    }
                    Self::add_into(grads, ins[1], gsum.len(), |dg| {
                        for i in 0..gsum.rows() {
                            for j in 0..n {
                                dg[i * n + j] += dc[j];
                            }
                        }
                    });
                }
                if want(self, 2) {
                    Self::add_into(grads, ins[2], x.len(), |dx| {
                        for r in 0..b {
                            for j in 0..n {
                                dx[r * n + j] += gw[r * n + j] * state.phi.at(r, j);
                            }
                        }
                    });
                }
            }

            Op::AvgN => {
                let k = ins.len() as f64;
                for i in 0..ins.len() {
                    if want(self, i) {
                        Self::add_into(grads, ins[i], g.len(), |d| {
                            for (dst, &gv) in d.iter_mut().zip(g) {
                                *dst += gv / k;
                            }
                        });
                    }
                }
            }
        }
    }
}
