//! Reverse-mode differentiation over a closed op-set.
//!
//! Nodes hold vector values. The op-set covers exactly what the training
//! objectives need: affine maps reading weights in place from a parameter
//! node, activations, a few elementwise maps, reductions, the structural ops
//! coupling layers are built from, a batched kernel-mean op, and the
//! Euler-Maruyama transition log-likelihood. Values are computed eagerly at
//! construction through the same helpers the plain evaluation paths use, so
//! a tape forward matches a plain forward bitwise.
//!
//! Gradient accumulation order is fixed by construction (reverse node order,
//! fixed inner loops), so gradients are bitwise reproducible.

use std::sync::Arc;

use crate::kernel::{accumulate_kernel_mean_into, KernelOp};
use crate::likelihood::{gaussian_loglik_grad_into, gaussian_transition_loglik, TransitionData};
use crate::mlp::affine;
use crate::scalar::Scalar;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Activation functions available to networks on and off the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Tanh => x.tanh(),
            // Stable softplus: max(x, 0) + ln(1 + exp(-|x|)).
            Activation::Softplus => x.max(F::zero()) + (F::one() + (-x.abs()).exp()).ln(),
            Activation::Relu => x.max(F::zero()),
        }
    }

    /// Derivative given input `x` and output `y`.
    ///
    /// relu uses subgradient 0 at 0.
    #[inline]
    fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            Activation::Tanh => F::one() - y * y,
            Activation::Softplus => F::one() / (F::one() + (-x).exp()),
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Softplus),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Elementwise maps.
#[derive(Debug, Clone, Copy)]
pub enum MapOp<F> {
    Exp,
    Ln,
    Square,
    Neg,
    Scale(F),
    AddConst(F),
    /// Hard clamp; gradient passes only strictly inside the interval.
    Clamp(F, F),
    PowInt(i32),
}

impl<F: Scalar> MapOp<F> {
    #[inline]
    pub fn apply(self, x: F) -> F {
        match self {
            MapOp::Exp => x.exp(),
            MapOp::Ln => x.ln(),
            MapOp::Square => x * x,
            MapOp::Neg => -x,
            MapOp::Scale(c) => c * x,
            MapOp::AddConst(c) => x + c,
            MapOp::Clamp(lo, hi) => x.max(lo).min(hi),
            MapOp::PowInt(k) => x.powi(k),
        }
    }

    #[inline]
    fn derivative(self, x: F, y: F) -> F {
        match self {
            MapOp::Exp => y,
            MapOp::Ln => F::one() / x,
            MapOp::Square => F::c(2.0) * x,
            MapOp::Neg => -F::one(),
            MapOp::Scale(c) => c,
            MapOp::AddConst(_) => F::one(),
            MapOp::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    F::one()
                } else {
                    F::zero()
                }
            }
            MapOp::PowInt(k) => F::from_i32(k).unwrap() * x.powi(k - 1),
        }
    }
}

enum Op<F: Scalar> {
    /// Root parameter leaf (always node 0).
    Params,
    Constant,
    /// Affine map whose weights live at fixed offsets inside another node's
    /// value (typically the parameter root, or a flow output in nested use).
    LinearFrom {
        params: NodeId,
        w_off: usize,
        b_off: usize,
        input: NodeId,
        rows: usize,
        cols: usize,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    Map {
        input: NodeId,
        kind: MapOp<F>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Gather {
        input: NodeId,
        idx: Arc<Vec<usize>>,
    },
    /// Scatter two disjoint index sets into a vector of length `len`.
    AssemblePair {
        a: NodeId,
        idx_a: Arc<Vec<usize>>,
        b: NodeId,
        idx_b: Arc<Vec<usize>>,
    },
    Sum {
        input: NodeId,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    SumSq {
        input: NodeId,
    },
    /// `‖v‖^p` for p > 1.
    NormPow {
        input: NodeId,
        p: F,
    },
    MeanScalars {
        inputs: Vec<NodeId>,
    },
    /// `shift + Σ cᵢ · sᵢ` over scalar nodes (the shift only enters the
    /// value).
    LinComb {
        terms: Vec<(F, NodeId)>,
    },
    /// Monte-Carlo averaged drift on a batch of states:
    /// value[m] = (1/L) Σ_l b(x_m, y_l), flattened over the state batch.
    KernelMean {
        kernel: Arc<dyn KernelOp<F>>,
        xs: Arc<Vec<F>>,
        ys: Vec<NodeId>,
        scratch: Vec<F>,
    },
    /// Euler-Maruyama Gaussian transition log-likelihood given per-transition
    /// drift values.
    EmLogLik {
        drifts: NodeId,
        data: Arc<TransitionData<F>>,
    },
}

struct Node<F: Scalar> {
    value: Vec<F>,
    op: Op<F>,
}

/// Reverse-mode tape. Node 0 is the trainable parameter vector.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new(params: &[F]) -> Self {
        let root = Node { value: params.to_vec(), op: Op::Params };
        Tape { nodes: vec![root], grads: Vec::new() }
    }

    pub fn param_root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<F>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, v: F) -> NodeId {
        self.constant(vec![v])
    }

    pub fn linear_from(
        &mut self,
        params: NodeId,
        w_off: usize,
        b_off: usize,
        input: NodeId,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        let p = &self.nodes[params.0].value;
        let x = &self.nodes[input.0].value;
        debug_assert_eq!(x.len(), cols);
        let mut out = vec![F::zero(); rows];
        affine(&p[w_off..w_off + rows * cols], &p[b_off..b_off + rows], x, &mut out);
        self.push(out, Op::LinearFrom { params, w_off, b_off, input, rows, cols })
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let out: Vec<F> = self.nodes[input.0].value.iter().map(|&x| kind.apply(x)).collect();
        self.push(out, Op::Activation { input, kind })
    }

    pub fn map(&mut self, input: NodeId, kind: MapOp<F>) -> NodeId {
        let out: Vec<F> = self.nodes[input.0].value.iter().map(|&x| kind.apply(x)).collect();
        self.push(out, Op::Map { input, kind })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(out, Op::Mul { a, b })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        let mut out = Vec::new();
        for p in &parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(out, Op::Concat { parts })
    }

    pub fn gather(&mut self, input: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let x = &self.nodes[input.0].value;
        let out: Vec<F> = idx.iter().map(|&i| x[i]).collect();
        self.push(out, Op::Gather { input, idx })
    }

    pub fn assemble_pair(
        &mut self,
        len: usize,
        a: NodeId,
        idx_a: Arc<Vec<usize>>,
        b: NodeId,
        idx_b: Arc<Vec<usize>>,
    ) -> NodeId {
        let mut out = vec![F::zero(); len];
        for (j, &i) in idx_a.iter().enumerate() {
            out[i] = self.nodes[a.0].value[j];
        }
        for (j, &i) in idx_b.iter().enumerate() {
            out[i] = self.nodes[b.0].value[j];
        }
        self.push(out, Op::AssemblePair { a, idx_a, b, idx_b })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in &self.nodes[input.0].value {
            acc += v;
        }
        self.push(vec![acc], Op::Sum { input })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut acc = F::zero();
        for (&x, &y) in self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value) {
            acc += x * y;
        }
        self.push(vec![acc], Op::Dot { a, b })
    }

    pub fn sum_sq(&mut self, input: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in &self.nodes[input.0].value {
            acc += v * v;
        }
        self.push(vec![acc], Op::SumSq { input })
    }

    pub fn norm_pow(&mut self, input: NodeId, p: F) -> NodeId {
        let mut r2 = F::zero();
        for &v in &self.nodes[input.0].value {
            r2 += v * v;
        }
        let val = r2.powf(p / F::c(2.0));
        self.push(vec![val], Op::NormPow { input, p })
    }

    pub fn mean_scalars(&mut self, inputs: Vec<NodeId>) -> NodeId {
        assert!(!inputs.is_empty());
        let mut acc = F::zero();
        for id in &inputs {
            acc += self.scalar(*id);
        }
        let val = acc / F::from_usize(inputs.len()).unwrap();
        self.push(vec![val], Op::MeanScalars { inputs })
    }

    pub fn lin_comb(&mut self, terms: Vec<(F, NodeId)>, shift: F) -> NodeId {
        let mut acc = shift;
        for (c, id) in &terms {
            acc += *c * self.scalar(*id);
        }
        self.push(vec![acc], Op::LinComb { terms })
    }

    /// Batched Monte-Carlo drift: one node covering every `(state, latent)`
    /// pair. `xs` is a flattened batch of slow states; `ys` are the pushed
    /// latent samples. Kernel evaluations may persist scratch for the
    /// backward pass.
    pub fn kernel_mean(
        &mut self,
        kernel: Arc<dyn KernelOp<F>>,
        xs: Arc<Vec<F>>,
        ys: Vec<NodeId>,
    ) -> NodeId {
        let d = kernel.slow_dim();
        let rows = xs.len() / d;
        let mut out = vec![F::zero(); rows * d];
        let mut scratch = Vec::with_capacity(kernel.scratch_len(rows) * ys.len());
        {
            let y_slices: Vec<&[F]> = ys.iter().map(|id| self.nodes[id.0].value.as_slice()).collect();
            accumulate_kernel_mean_into(kernel.as_ref(), &xs, &y_slices, &mut out, Some(&mut scratch));
        }
        self.push(out, Op::KernelMean { kernel, xs, ys, scratch })
    }

    /// Gaussian transition log-likelihood of the trajectory increments in
    /// `data` under per-transition drifts (flattened batch x d).
    pub fn em_loglik(&mut self, drifts: NodeId, data: Arc<TransitionData<F>>) -> NodeId {
        let val = gaussian_transition_loglik(&self.nodes[drifts.0].value, &data);
        self.push(vec![val], Op::EmLogLik { drifts, data })
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate in a fixed
    /// order; repeated calls with the same graph are bitwise identical.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        self.grads = self.nodes.iter().map(|_| Vec::new()).collect();
        self.grads[loss.0] = vec![F::one()];

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            let nodes = &self.nodes;
            let grads = &mut self.grads;
            match &nodes[i].op {
                Op::Params | Op::Constant => {}
                Op::LinearFrom { params, w_off, b_off, input, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    {
                        let gp = Self::touch(grads, params.0, nodes[params.0].value.len());
                        let x = &nodes[input.0].value;
                        for r in 0..rows {
                            let gr = g[r];
                            let wrow = *w_off + r * cols;
                            for c in 0..cols {
                                gp[wrow + c] += gr * x[c];
                            }
                            gp[*b_off + r] += gr;
                        }
                    }
                    let gx = Self::touch(grads, input.0, cols);
                    let w = &nodes[params.0].value[*w_off..*w_off + rows * cols];
                    for r in 0..rows {
                        let gr = g[r];
                        let row = &w[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gx[c] += row[c] * gr;
                        }
                    }
                }
                Op::Activation { input, kind } => {
                    let n = g.len();
                    let gx = Self::touch(grads, input.0, n);
                    let x = &nodes[input.0].value;
                    let y = &nodes[i].value;
                    for j in 0..n {
                        gx[j] += kind.derivative(x[j], y[j]) * g[j];
                    }
                }
                Op::Map { input, kind } => {
                    let n = g.len();
                    let gx = Self::touch(grads, input.0, n);
                    let x = &nodes[input.0].value;
                    let y = &nodes[i].value;
                    for j in 0..n {
                        gx[j] += kind.derivative(x[j], y[j]) * g[j];
                    }
                }
                Op::Add { a, b } => {
                    {
                        let ga = Self::touch(grads, a.0, g.len());
                        for (gj, &v) in ga.iter_mut().zip(&g) {
                            *gj += v;
                        }
                    }
                    let gb = Self::touch(grads, b.0, g.len());
                    for (gj, &v) in gb.iter_mut().zip(&g) {
                        *gj += v;
                    }
                }
                Op::Sub { a, b } => {
                    {
                        let ga = Self::touch(grads, a.0, g.len());
                        for (gj, &v) in ga.iter_mut().zip(&g) {
                            *gj += v;
                        }
                    }
                    let gb = Self::touch(grads, b.0, g.len());
                    for (gj, &v) in gb.iter_mut().zip(&g) {
                        *gj -= v;
                    }
                }
                Op::Mul { a, b } => {
                    {
                        let ga = Self::touch(grads, a.0, g.len());
                        let bv = &nodes[b.0].value;
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    }
                    let gb = Self::touch(grads, b.0, g.len());
                    let av = &nodes[a.0].value;
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        let gp = Self::touch(grads, p.0, n);
                        for j in 0..n {
                            gp[j] += g[off + j];
                        }
                        off += n;
                    }
                }
                Op::Gather { input, idx } => {
                    let n = nodes[input.0].value.len();
                    let gx = Self::touch(grads, input.0, n);
                    for (j, &k) in idx.iter().enumerate() {
                        gx[k] += g[j];
                    }
                }
                Op::AssemblePair { a, idx_a, b, idx_b } => {
                    {
                        let ga = Self::touch(grads, a.0, idx_a.len());
                        for (j, &k) in idx_a.iter().enumerate() {
                            ga[j] += g[k];
                        }
                    }
                    let gb = Self::touch(grads, b.0, idx_b.len());
                    for (j, &k) in idx_b.iter().enumerate() {
                        gb[j] += g[k];
                    }
                }
                Op::Sum { input } => {
                    let n = nodes[input.0].value.len();
                    let gx = Self::touch(grads, input.0, n);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::Dot { a, b } => {
                    {
                        let ga = Self::touch(grads, a.0, nodes[a.0].value.len());
                        for (gj, &bvj) in ga.iter_mut().zip(&nodes[b.0].value) {
                            *gj += g[0] * bvj;
                        }
                    }
                    let gb = Self::touch(grads, b.0, nodes[b.0].value.len());
                    for (gj, &avj) in gb.iter_mut().zip(&nodes[a.0].value) {
                        *gj += g[0] * avj;
                    }
                }
                Op::SumSq { input } => {
                    let x = &nodes[input.0].value;
                    let gx = Self::touch(grads, input.0, x.len());
                    let two = F::c(2.0);
                    for j in 0..x.len() {
                        gx[j] += two * x[j] * g[0];
                    }
                }
                Op::NormPow { input, p } => {
                    let x = &nodes[input.0].value;
                    let mut r2 = F::zero();
                    for &v in x.iter() {
                        r2 += v * v;
                    }
                    let gx = Self::touch(grads, input.0, x.len());
                    if r2 > F::zero() {
                        // d/dxᵢ ‖x‖^p = p ‖x‖^{p-2} xᵢ
                        let coef = *p * r2.powf((*p - F::c(2.0)) / F::c(2.0)) * g[0];
                        for j in 0..x.len() {
                            gx[j] += coef * x[j];
                        }
                    }
                }
                Op::MeanScalars { inputs } => {
                    let w = g[0] / F::from_usize(inputs.len()).unwrap();
                    for id in inputs {
                        let gi = Self::touch(grads, id.0, 1);
                        gi[0] += w;
                    }
                }
                Op::LinComb { terms } => {
                    for (c, id) in terms {
                        let gi = Self::touch(grads, id.0, 1);
                        gi[0] += *c * g[0];
                    }
                }
                Op::KernelMean { kernel, xs, ys, scratch } => {
                    let inv_l = F::one() / F::from_usize(ys.len()).unwrap();
                    // Upstream gradient carries the 1/L of the mean once.
                    let w: Vec<F> = g.iter().map(|&v| v * inv_l).collect();
                    let s_len = kernel.scratch_len(xs.len() / kernel.slow_dim());
                    for (l, y_id) in ys.iter().enumerate() {
                        let y = &nodes[y_id.0].value;
                        let gy = Self::touch(grads, y_id.0, y.len());
                        let sc = &scratch[l * s_len..(l + 1) * s_len];
                        kernel.accum_vjp(xs, y, &w, sc, gy);
                    }
                }
                Op::EmLogLik { drifts, data } => {
                    let beta = &nodes[drifts.0].value;
                    let gd = Self::touch(grads, drifts.0, beta.len());
                    gaussian_loglik_grad_into(beta, data, g[0], gd);
                }
            }
            self.grads[i] = g;
        }
    }

    fn touch(grads: &mut [Vec<F>], idx: usize, len: usize) -> &mut Vec<F> {
        if grads[idx].is_empty() {
            grads[idx] = vec![F::zero(); len];
        }
        &mut grads[idx]
    }

    /// Gradient of the last `backward` loss w.r.t. a node (empty when the
    /// node does not reach the loss).
    pub fn grad(&self, id: NodeId) -> &[F] {
        &self.grads[id.0]
    }

    /// Gradient w.r.t. the parameter root, zero-filled when unreached.
    pub fn param_grad(&self) -> Vec<F> {
        let n = self.nodes[0].value.len();
        if self.grads.is_empty() || self.grads[0].is_empty() {
            vec![F::zero(); n]
        } else {
            self.grads[0].clone()
        }
    }
}

/// Evaluate a scalar objective and its exact reverse-mode gradient.
///
/// `build` assembles the objective from the op-set over a fresh tape whose
/// parameter root holds `params`. The value matches a plain forward
/// evaluation bitwise.
pub fn loss_and_gradient<F: Scalar>(
    params: &[F],
    build: impl FnOnce(&mut Tape<F>) -> NodeId,
) -> (F, Vec<F>) {
    let mut tape = Tape::new(params);
    let loss = build(&mut tape);
    let value = tape.scalar(loss);
    tape.backward(loss);
    (value, tape.param_grad())
}
