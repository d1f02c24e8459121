//! Minimal reverse-mode autodiff tape for the segmentation network.
//!
//! Values are f64 `ndarray` tensors; reductions and batch statistics
//! accumulate in f64. A [`Tape`] is built per forward pass; parameters live
//! in a [`Params`] store and are bound to tape leaves on first use, so one
//! backward pass yields gradients for every bound parameter.
//!
//! Everything is single-threaded and allocation-order deterministic: the same
//! seed and inputs reproduce training bit-for-bit.

pub mod check;
pub mod conv;
pub mod interp;
pub mod norm;

use ndarray::{Array1, Array4, ArrayD, Ix4, IxDyn};
use std::collections::HashMap;

/// Handle to a value node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ValueId(usize);

/// Handle to an entry in a [`Params`] store.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Named parameter store. Insertion order is the construction order and is
/// part of the determinism contract (it fixes RNG consumption and optimizer
/// state layout).
#[derive(Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|i| self.entries[*i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }
}

struct BnCtx {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    training: bool,
}

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Affine { x: ValueId, scale: f64 },
    Relu(ValueId),
    Sigmoid(ValueId),
    Conv2d { x: ValueId, w: ValueId, b: ValueId, stride: usize, padding: usize },
    BatchNorm { x: ValueId, gamma: ValueId, beta: ValueId, ctx: Box<BnCtx> },
    Upsample { x: ValueId, in_hw: (usize, usize) },
    ConcatChannels(Vec<ValueId>),
    SumAll(ValueId),
    DivScalar(ValueId, ValueId),
    /// Gated fusion of per-level logits: F = Z1 + P1*Z1 + (1-P1) * sum_{i>=2} Pi*Zi,
    /// accumulated per pixel in f64.
    AttentionFuse { z: [ValueId; 5], p: [ValueId; 5] },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Deferred running-statistics update produced by a train-mode batch norm.
pub struct BnPending {
    pub mean_param: ParamId,
    pub var_param: ParamId,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
    bindings: HashMap<ParamId, ValueId>,
    bn_pending: Vec<BnPending>,
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("rank-4 tensor expected")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { value, op, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: ValueId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar (0-dim) node value.
    pub fn scalar(&self, id: ValueId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar node expected");
        *v.iter().next().unwrap()
    }

    pub fn grad(&self, id: ValueId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.bindings.get(&id).and_then(|v| self.grad(*v))
    }

    pub fn take_bn_pending(&mut self) -> Vec<BnPending> {
        std::mem::take(&mut self.bn_pending)
    }

    // ---- leaves ----

    /// Constant tensor; no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter (e.g. a network
    /// input whose gradient is wanted).
    pub fn input(&mut self, value: ArrayD<f64>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter to this tape (memoized per parameter).
    pub fn param(&mut self, params: &Params, id: ParamId) -> ValueId {
        if let Some(v) = self.bindings.get(&id) {
            return *v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.bindings.insert(id, v);
        v
    }

    /// Binds a non-trainable buffer as a constant.
    pub fn buffer(&mut self, params: &Params, id: ParamId) -> ValueId {
        if let Some(v) = self.bindings.get(&id) {
            return *v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, false);
        self.bindings.insert(id, v);
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "add: shape mismatch"
        );
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "mul: shape mismatch"
        );
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, x: ValueId, scale: f64, shift: f64) -> ValueId {
        let value = self.nodes[x.0].value.mapv(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push(value, Op::Affine { x, scale }, ng)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let value = self.nodes[x.0].value.mapv(stable_sigmoid);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId, stride: usize, padding: usize) -> ValueId {
        let value = {
            let bias = self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias must be rank 1")
                .to_owned();
            conv::conv2d_forward(as4(&self.nodes[x.0].value), as4(&self.nodes[w.0].value), &bias, stride, padding)
        };
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value.into_dyn(), Op::Conv2d { x, w, b, stride, padding }, ng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: ParamId,
        running_var: ParamId,
        params: &Params,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> ValueId {
        let rm = params
            .value(running_mean)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("running mean rank 1")
            .to_owned();
        let rv = params
            .value(running_var)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("running var rank 1")
            .to_owned();
        let gamma_arr = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma rank 1")
            .to_owned();
        let beta_arr = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta rank 1")
            .to_owned();
        let fwd = norm::batchnorm_forward(
            as4(&self.nodes[x.0].value),
            &gamma_arr,
            &beta_arr,
            &rm,
            &rv,
            training,
            momentum,
            eps,
        );
        if let Some((m, v)) = fwd.new_running {
            self.bn_pending.push(BnPending {
                mean_param: running_mean,
                var_param: running_var,
                mean: m,
                var: v,
            });
        }
        let ctx = Box::new(BnCtx { xhat: fwd.xhat, inv_std: fwd.inv_std, training });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(fwd.y.into_dyn(), Op::BatchNorm { x, gamma, beta, ctx }, ng)
    }

    /// Bilinear upsampling/resampling to `out_hw`.
    pub fn upsample_bilinear(&mut self, x: ValueId, out_hw: (usize, usize)) -> ValueId {
        let in_dim = as4(&self.nodes[x.0].value).dim();
        let value = interp::resize_nchw(as4(&self.nodes[x.0].value), out_hw);
        let ng = self.needs(x);
        self.push(value.into_dyn(), Op::Upsample { x, in_hw: (in_dim.2, in_dim.3) }, ng)
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let dims: Vec<(usize, usize, usize, usize)> =
            parts.iter().map(|p| as4(&self.nodes[p.0].value).dim()).collect();
        let (b, _, h, w) = dims[0];
        for d in &dims {
            assert!(d.0 == b && d.2 == h && d.3 == w, "concat: mismatched shapes");
        }
        let c_total: usize = dims.iter().map(|d| d.1).sum();
        let plane = h * w;
        let mut out = vec![0.0f64; b * c_total * plane];
        for bi in 0..b {
            let mut c_off = 0usize;
            for (p, d) in parts.iter().zip(dims.iter()) {
                let src = self.nodes[p.0].value.as_slice().expect("contiguous part");
                let len = d.1 * plane;
                let s = bi * len;
                let dst = (bi * c_total + c_off) * plane;
                out[dst..dst + len].copy_from_slice(&src[s..s + len]);
                c_off += d.1;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[b, c_total, h, w]), out).unwrap();
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatChannels(parts.to_vec()), ng)
    }

    /// Sum of all elements, accumulated in f64, as a 0-dim node.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: f64 = self.nodes[x.0].value.iter().map(|v| *v as f64).sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s as f64);
        let ng = self.needs(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Scalar division a / b (both 0-dim).
    pub fn div_scalar(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = self.scalar(a);
        let bv = self.scalar(b);
        let value = ArrayD::from_elem(IxDyn(&[]), av / bv);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::DivScalar(a, b), ng)
    }

    pub fn zero_scalar(&mut self) -> ValueId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), 0.0))
    }

    /// Gated fusion of five per-level logit maps with their confidence maps.
    /// `z` and `p` are (B,1,H,W), index 0 is the top level.
    pub fn attention_fuse(&mut self, z: [ValueId; 5], p: [ValueId; 5]) -> ValueId {
        let shape = self.nodes[z[0].0].value.shape().to_vec();
        for id in z.iter().chain(p.iter()) {
            assert_eq!(self.nodes[id.0].value.shape(), &shape[..], "attention_fuse: shape mismatch");
        }
        let n = self.nodes[z[0].0].value.len();
        let mut out = vec![0.0f64; n];
        {
            let zs: Vec<&[f64]> = z
                .iter()
                .map(|id| self.nodes[id.0].value.as_slice().expect("contiguous"))
                .collect();
            let ps: Vec<&[f64]> = p
                .iter()
                .map(|id| self.nodes[id.0].value.as_slice().expect("contiguous"))
                .collect();
            for i in 0..n {
                let z1 = zs[0][i] as f64;
                let p1 = ps[0][i] as f64;
                let mut aux = 0.0f64;
                for lvl in 1..5 {
                    aux += ps[lvl][i] as f64 * zs[lvl][i] as f64;
                }
                out[i] = (z1 + p1 * z1 + (1.0 - p1) * aux) as f64;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        let ng = z.iter().chain(p.iter()).any(|id| self.needs(*id));
        self.push(value, Op::AttentionFuse { z, p }, ng)
    }

    // ---- backward ----

    fn accumulate(grads: &mut [Option<ArrayD<f64>>], nodes: &[Node], id: ValueId, delta: ArrayD<f64>) {
        if !nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss node. Gradients are retrievable via
    /// [`Tape::grad`] / [`Tape::param_grad`] afterwards.
    pub fn backward(&mut self, loss: ValueId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].clone().unwrap();
            let (head, tail) = self.grads.split_at_mut(i);
            let _ = tail; // gradients only flow to earlier nodes
            let nodes = &self.nodes;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    Self::accumulate(head, nodes, *a, g.clone());
                    Self::accumulate(head, nodes, *b, g);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].needs_grad {
                        Self::accumulate(head, nodes, *a, &g * &nodes[b.0].value);
                    }
                    if nodes[b.0].needs_grad {
                        Self::accumulate(head, nodes, *b, &g * &nodes[a.0].value);
                    }
                }
                Op::Affine { x, scale, .. } => {
                    Self::accumulate(head, nodes, *x, g.mapv(|v| v * scale));
                }
                Op::Relu(x) => {
                    let mask = nodes[x.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    Self::accumulate(head, nodes, *x, &g * &mask);
                }
                Op::Sigmoid(x) => {
                    let y = &nodes[i].value;
                    let dy = y.mapv(|s| s * (1.0 - s));
                    Self::accumulate(head, nodes, *x, &g * &dy);
                }
                Op::Conv2d { x, w, b, stride, padding } => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let grads_out = conv::conv2d_backward(
                        as4(&nodes[x.0].value),
                        as4(&nodes[w.0].value),
                        g4,
                        *stride,
                        *padding,
                    );
                    if nodes[x.0].needs_grad {
                        Self::accumulate(head, nodes, *x, grads_out.gx.into_dyn());
                    }
                    if nodes[w.0].needs_grad {
                        Self::accumulate(head, nodes, *w, grads_out.gw.into_dyn());
                    }
                    if nodes[b.0].needs_grad {
                        Self::accumulate(head, nodes, *b, grads_out.gb.into_dyn());
                    }
                }
                Op::BatchNorm { x, gamma, beta, ctx } => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let gamma_arr = nodes[gamma.0]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap()
                        .to_owned();
                    let bn = norm::batchnorm_backward(g4, &ctx.xhat, &ctx.inv_std, &gamma_arr, ctx.training);
                    if nodes[x.0].needs_grad {
                        Self::accumulate(head, nodes, *x, bn.gx.into_dyn());
                    }
                    if nodes[gamma.0].needs_grad {
                        Self::accumulate(head, nodes, *gamma, bn.ggamma.into_dyn());
                    }
                    if nodes[beta.0].needs_grad {
                        Self::accumulate(head, nodes, *beta, bn.gbeta.into_dyn());
                    }
                }
                Op::Upsample { x, in_hw } => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let gx = interp::resize_nchw_backward(g4, *in_hw);
                    Self::accumulate(head, nodes, *x, gx.into_dyn());
                }
                Op::ConcatChannels(parts) => {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let mut offset = 0usize;
                    for p in parts {
                        let c = as4(&nodes[p.0].value).dim().1;
                        if nodes[p.0].needs_grad {
                            let slice = g4
                                .slice(ndarray::s![.., offset..offset + c, .., ..])
                                .to_owned();
                            Self::accumulate(head, nodes, *p, slice.into_dyn());
                        }
                        offset += c;
                    }
                }
                Op::SumAll(x) => {
                    let gv = *g.iter().next().unwrap();
                    let delta = ArrayD::from_elem(nodes[x.0].value.raw_dim(), gv);
                    Self::accumulate(head, nodes, *x, delta);
                }
                Op::DivScalar(a, b) => {
                    let gv = *g.iter().next().unwrap();
                    let av = *nodes[a.0].value.iter().next().unwrap();
                    let bv = *nodes[b.0].value.iter().next().unwrap();
                    if nodes[a.0].needs_grad {
                        Self::accumulate(head, nodes, *a, ArrayD::from_elem(IxDyn(&[]), gv / bv));
                    }
                    if nodes[b.0].needs_grad {
                        Self::accumulate(
                            head,
                            nodes,
                            *b,
                            ArrayD::from_elem(IxDyn(&[]), -gv * av / (bv * bv)),
                        );
                    }
                }
                Op::AttentionFuse { z, p } => {
                    let shape = nodes[i].value.raw_dim();
                    let n = nodes[i].value.len();
                    let gs = g.as_slice().expect("contiguous");
                    let zs: Vec<&[f64]> =
                        z.iter().map(|id| nodes[id.0].value.as_slice().unwrap()).collect();
                    let ps: Vec<&[f64]> =
                        p.iter().map(|id| nodes[id.0].value.as_slice().unwrap()).collect();
                    let mut gz: Vec<Vec<f64>> = (0..5).map(|_| vec![0.0; n]).collect();
                    let mut gp: Vec<Vec<f64>> = (0..5).map(|_| vec![0.0; n]).collect();
                    for idx in 0..n {
                        let gv = gs[idx];
                        let p1 = ps[0][idx];
                        let z1 = zs[0][idx];
                        let mut aux = 0.0f64;
                        for lvl in 1..5 {
                            aux += ps[lvl][idx] * zs[lvl][idx];
                        }
                        gz[0][idx] = gv * (1.0 + p1);
                        gp[0][idx] = gv * (z1 - aux);
                        for lvl in 1..5 {
                            gp[lvl][idx] = gv * (1.0 - p1) * zs[lvl][idx];
                            gz[lvl][idx] = gv * (1.0 - p1) * ps[lvl][idx];
                        }
                    }
                    for lvl in 0..5 {
                        if nodes[z[lvl].0].needs_grad {
                            let arr = ArrayD::from_shape_vec(shape.clone(), std::mem::take(&mut gz[lvl])).unwrap();
                            Self::accumulate(head, nodes, z[lvl], arr);
                        }
                        if nodes[p[lvl].0].needs_grad {
                            let arr = ArrayD::from_shape_vec(shape.clone(), std::mem::take(&mut gp[lvl])).unwrap();
                            Self::accumulate(head, nodes, p[lvl], arr);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
