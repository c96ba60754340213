use std::collections::BTreeMap;
use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, Conv2dSpec, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::scan::kernel;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Sigmoid,
    Silu,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Unary(Unary<T>, NodeId),
    Binary(Binary, NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Expand(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    ChannelNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample2x(NodeId),
    Concat(NodeId, NodeId),
    Scan {
        u: NodeId,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d: NodeId,
        order: Arc<[usize]>,
        states: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(u, _) => match u {
                Unary::Neg => "neg",
                Unary::Scale(_) => "scale",
                Unary::AddScalar(_) => "add_scalar",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sqrt => "sqrt",
                Unary::Square => "square",
                Unary::Abs => "abs",
                Unary::Sigmoid => "sigmoid",
                Unary::Silu => "silu",
                Unary::Softplus => "softplus",
            },
            Op::Binary(b, _, _) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Expand(_) => "expand",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Upsample2x(_) => "upsample_nearest2x",
            Op::Concat(..) => "concat_channels",
            Op::Scan { .. } => "selective_scan",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, for the caller
/// to fold into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

/// Define-by-run computation graph (a tape).
///
/// Nodes are appended in execution order, so every op's inputs precede it
/// and [`Graph::backward`] can visit the tape once in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, NodeId>,
    bn_updates: Vec<(String, BatchNormStats<T>)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (e.g. an input being checked).
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Named trainable leaf. Binding the same name twice returns the first node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Stop-gradient copy of a node's value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn push_bn_update(&mut self, name: &str, stats: BatchNormStats<T>) {
        self.bn_updates.push((name.to_string(), stats));
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchNormStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    // ------------------------------------------------------------------
    // elementwise

    fn unary(&mut self, op: Unary<T>, x: NodeId) -> NodeId {
        let f: Box<dyn Fn(T) -> T> = match op {
            Unary::Neg => Box::new(|v: T| -v),
            Unary::Scale(s) => Box::new(move |v| v * s),
            Unary::AddScalar(s) => Box::new(move |v| v + s),
            Unary::Exp => Box::new(|v: T| v.exp()),
            Unary::Log => Box::new(|v: T| v.ln()),
            Unary::Sqrt => Box::new(|v: T| v.sqrt()),
            Unary::Square => Box::new(|v| v * v),
            Unary::Abs => Box::new(|v: T| v.abs()),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Silu => Box::new(|v| v * sigmoid(v)),
            Unary::Softplus => Box::new(softplus),
        };
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary(op, x), rg)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Neg, x)
    }
    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        self.unary(Unary::Scale(s), x)
    }
    pub fn add_scalar(&mut self, x: NodeId, s: T) -> NodeId {
        self.unary(Unary::AddScalar(s), x)
    }
    /// `s - x`
    pub fn rsub_scalar(&mut self, s: T, x: NodeId) -> NodeId {
        let n = self.neg(x);
        self.add_scalar(n, s)
    }
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Log, x)
    }
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sqrt, x)
    }
    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Square, x)
    }
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Abs, x)
    }
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Silu, x)
    }
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Softplus, x)
    }

    fn binary(&mut self, op: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            let name = match op {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[x.0].value.mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Broadcast size-1 axes up to `shape` (same rank).
    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let src = self.nodes[x.0].value.shape().to_vec();
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1)
        {
            return Err(Error::shape(
                "expand",
                format!("cannot broadcast {src:?} to {shape:?}"),
            ));
        }
        let strides = broadcast_strides(&src);
        let numel: usize = shape.iter().product();
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(xv[off]);
            increment(&mut idx, shape);
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Expand(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ------------------------------------------------------------------
    // neural primitives

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        spec: Conv2dSpec,
    ) -> Result<NodeId> {
        let geom = ConvGeom::resolve(self.shape(x), self.shape(weight), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), geom.c_out),
                ));
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.nodes[b.0].value.data()),
        );
        let value = Tensor::new(&[geom.n, geom.c_out, geom.oh, geom.ow], out)?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel batch normalisation over `N, H, W`.
    ///
    /// Training mode normalises with the (biased) batch statistics and
    /// returns them; eval mode uses `running`.
    pub fn batch_norm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: (&[T], &[T]),
        training: bool,
        eps: T,
    ) -> Result<(NodeId, Option<BatchNormStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(Error::shape(
                    "batch_norm2d",
                    format!("{name} {:?} for {c} channels", self.shape(id)),
                ));
            }
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(Error::shape(
                "batch_norm2d",
                format!("running stats length {} for {c} channels", running.0.len()),
            ));
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let (mut mean, mut var) = (vec![T::zero(); c], vec![T::zero(); c]);
        let mut stats = None;
        if training {
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mu = s / T::of(m as f64);
                let mut ss = T::zero();
                for b in 0..n {
                    for &v in &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        ss += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / T::of(m as f64);
            }
            let unbiased = if m > 1 {
                var.iter().map(|&v| v * T::of(m as f64 / (m - 1) as f64)).collect()
            } else {
                var.clone()
            };
            stats = Some(BatchNormStats {
                mean: mean.clone(),
                var: unbiased,
            });
        } else {
            mean.copy_from_slice(running.0);
            var.copy_from_slice(running.1);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        );
        Ok((id, stats))
    }

    /// Layer normalisation across channels at every spatial position.
    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                return Err(Error::shape(
                    "channel_norm",
                    format!("{name} {:?} for {c} channels", self.shape(id)),
                ));
            }
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * hw];
        let cf = T::of(c as f64);
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                let mu = (0..c).map(|ch| xv[at(ch)]).sum::<T>() / cf;
                let var = (0..c).map(|ch| (xv[at(ch)] - mu) * (xv[at(ch)] - mu)).sum::<T>() / cf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[b * hw + p] = is;
                for ch in 0..c {
                    let xh = (xv[at(ch)] - mu) * is;
                    xhat[at(ch)] = xh;
                    out[at(ch)] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, h2, w2], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// Concatenate along the channel axis, `a`'s channels first.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("N/H/W differ: {:?} vs {:?}", (na, ha, wa), (nb, hb, wb)),
            ));
        }
        let hw = ha * wa;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            out.extend_from_slice(&av[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&bv[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Selective scan over the spatial positions of `N x D x H x W` features,
    /// visited in `order` (a permutation of `0..H*W`).
    ///
    /// `delta` is the positive step size (same shape as `u`), `a` the
    /// `D x S` (negative) state matrix, `b`/`c` the `N x S x H x W`
    /// input-dependent projections and `d` the `D` skip vector.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: NodeId,
        delta: NodeId,
        a: NodeId,
        b: NodeId,
        c: NodeId,
        d: NodeId,
        order: Arc<[usize]>,
    ) -> Result<NodeId> {
        let (n, dim, h, w) = self.value(u).dims4()?;
        let p = h * w;
        let [dim_a, s] = self.shape(a)[..] else {
            return Err(Error::shape("selective_scan", format!("A must be D x S, got {:?}", self.shape(a))));
        };
        let expect_bc = [n, s, h, w];
        if self.shape(delta) != self.shape(u)
            || dim_a != dim
            || self.shape(b) != expect_bc
            || self.shape(c) != expect_bc
            || self.shape(d) != [dim]
        {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                    self.shape(u),
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c),
                    self.shape(d)
                ),
            ));
        }
        if order.len() != p {
            return Err(Error::shape(
                "selective_scan",
                format!("order has {} entries for {p} positions", order.len()),
            ));
        }
        let dims = kernel::ScanDims { batch: n, dim, state: s, len: p };
        let (y, states) = kernel::scan_forward(
            dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            &order,
        );
        let value = Tensor::new(&[n, dim, h, w], y)?;
        let rg = [u, delta, a, b, c, d].iter().any(|&id| self.rg(id));
        Ok(self.push(
            value,
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                d,
                order,
                states,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Populates gradients of `loss` (a single-element node) with respect
    /// to every node that requires one.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.rg(loss) {
            return Err(Error::InvalidArgument(
                "loss does not depend on any gradient-tracking input".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads
            .get(id.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape(id), g.clone()).expect("grad shape"))
    }

    /// Gradients of every bound parameter (zeros for unreachable ones).
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = self
                    .grad(id)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(id)));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&mut self, id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn accumulate_vec(&mut self, id: NodeId, g: Vec<T>) {
        self.accumulate(id, |slot| {
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        });
    }

    fn backward_node(&mut self, i: usize, gy: &[T]) {
        // Take the op out so the tape can be borrowed mutably for accumulation.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Unary(u, x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data();
                let yv = self.nodes[i].value.data();
                let g: Vec<T> = match *u {
                    Unary::Neg => gy.iter().map(|&g| -g).collect(),
                    Unary::Scale(s) => gy.iter().map(|&g| g * s).collect(),
                    Unary::AddScalar(_) => gy.to_vec(),
                    Unary::Exp => gy.iter().zip(yv).map(|(&g, &y)| g * y).collect(),
                    Unary::Log => gy.iter().zip(xv).map(|(&g, &x)| g / x).collect(),
                    Unary::Sqrt => gy
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * T::of(0.5) / y)
                        .collect(),
                    Unary::Square => gy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| g * T::of(2.0) * x)
                        .collect(),
                    Unary::Abs => gy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    Unary::Sigmoid => gy
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                    Unary::Silu => gy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (T::one() - s))
                        })
                        .collect(),
                    Unary::Softplus => gy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| g * sigmoid(x))
                        .collect(),
                };
                self.accumulate_vec(x, g);
            }
            Op::Binary(b, x, y) => {
                let (x, y) = (*x, *y);
                match b {
                    Binary::Add => {
                        self.accumulate_vec(x, gy.to_vec());
                        self.accumulate_vec(y, gy.to_vec());
                    }
                    Binary::Sub => {
                        self.accumulate_vec(x, gy.to_vec());
                        self.accumulate_vec(y, gy.iter().map(|&g| -g).collect());
                    }
                    Binary::Mul => {
                        let gx: Vec<T> = if self.rg(x) {
                            let yv = self.value(y).data();
                            gy.iter().zip(yv).map(|(&g, &v)| g * v).collect()
                        } else {
                            Vec::new()
                        };
                        let gyy: Vec<T> = if self.rg(y) {
                            let xv = self.value(x).data();
                            gy.iter().zip(xv).map(|(&g, &v)| g * v).collect()
                        } else {
                            Vec::new()
                        };
                        self.accumulate_vec(x, gx);
                        self.accumulate_vec(y, gyy);
                    }
                    Binary::Div => {
                        let xv = self.value(x).data();
                        let yv = self.value(y).data();
                        let gx: Vec<T> = gy.iter().zip(yv).map(|(&g, &d)| g / d).collect();
                        let gd: Vec<T> = gy
                            .iter()
                            .zip(xv.iter().zip(yv))
                            .map(|(&g, (&n, &d))| -g * n / (d * d))
                            .collect();
                        self.accumulate_vec(x, gx);
                        self.accumulate_vec(y, gd);
                    }
                }
            }
            Op::Sum(x) => {
                let g = gy[0];
                self.accumulate(*x, |slot| slot.iter_mut().for_each(|s| *s += g));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = gy[0] / T::of(n as f64);
                self.accumulate(*x, |slot| slot.iter_mut().for_each(|s| *s += g));
            }
            Op::Expand(x) => {
                let x = *x;
                let src = self.shape(x).to_vec();
                let dst = self.shape(NodeId(i)).to_vec();
                let strides = broadcast_strides(&src);
                let mut idx = vec![0usize; dst.len()];
                let mut red = vec![T::zero(); src.iter().product()];
                for &g in gy {
                    let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
                    red[off] += g;
                    increment(&mut idx, &dst);
                }
                self.accumulate_vec(x, red);
            }
            Op::Reshape(x) => self.accumulate_vec(*x, gy.to_vec()),
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            } => {
                let (x, weight) = (*x, *weight);
                let (dx, dw, db) = conv2d_backward(
                    geom,
                    self.value(x).data(),
                    self.value(weight).data(),
                    gy,
                    self.rg(x),
                    self.rg(weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate_vec(x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_vec(weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate_vec(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c, h, w) = self.value(x).dims4().expect("bn dims");
                let hw = h * w;
                let m = T::of((n * hw) as f64);
                let gv = self.value(gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dgamma[ch] += gy[k] * xhat[k];
                            dbeta[ch] += gy[k];
                        }
                    }
                }
                if self.rg(x) {
                    let mut dx = vec![T::zero(); gy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for k in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                dx[k] = if *training {
                                    gv[ch] * inv_std[ch] / m
                                        * (m * gy[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                } else {
                                    gv[ch] * inv_std[ch] * gy[k]
                                };
                            }
                        }
                    }
                    self.accumulate_vec(x, dx);
                }
                self.accumulate_vec(gamma, dgamma);
                self.accumulate_vec(beta, dbeta);
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c, h, w) = self.value(x).dims4().expect("norm dims");
                let hw = h * w;
                let cf = T::of(c as f64);
                let gv = self.value(gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gy.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let at = |ch: usize| (b * c + ch) * hw + p;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for ch in 0..c {
                            let k = at(ch);
                            dgamma[ch] += gy[k] * xhat[k];
                            dbeta[ch] += gy[k];
                            let dxh = gy[k] * gv[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[k];
                        }
                        let is = inv_std[b * hw + p];
                        for ch in 0..c {
                            let k = at(ch);
                            let dxh = gy[k] * gv[ch];
                            dx[k] = is / cf * (cf * dxh - s1 - xhat[k] * s2);
                        }
                    }
                }
                self.accumulate_vec(x, dx);
                self.accumulate_vec(gamma, dgamma);
                self.accumulate_vec(beta, dbeta);
            }
            Op::Upsample2x(x) => {
                let x = *x;
                let (n, c, h, w) = self.value(x).dims4().expect("upsample dims");
                let w2 = 2 * w;
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let src = &gy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dx[plane * h * w + (y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                self.accumulate_vec(x, dx);
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.value(a).dims4().expect("concat dims");
                let cb = self.shape(b)[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for k in 0..n {
                    let base = k * (ca + cb) * hw;
                    ga.extend_from_slice(&gy[base..base + ca * hw]);
                    gb.extend_from_slice(&gy[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate_vec(a, ga);
                self.accumulate_vec(b, gb);
            }
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                d,
                order,
                states,
            } => {
                let (n, dim, h, w) = self.value(*u).dims4().expect("scan dims");
                let s = self.shape(*a)[1];
                let dims = kernel::ScanDims { batch: n, dim, state: s, len: h * w };
                let grads = kernel::scan_backward(
                    dims,
                    self.value(*u).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    self.value(*d).data(),
                    order,
                    states,
                    gy,
                );
                self.accumulate_vec(*u, grads.du);
                self.accumulate_vec(*delta, grads.ddelta);
                self.accumulate_vec(*a, grads.da);
                self.accumulate_vec(*b, grads.db);
                self.accumulate_vec(*c, grads.dc);
                self.accumulate_vec(*d, grads.dd);
            }
        }
        self.nodes[i].op = op;
    }
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn broadcast_strides(src: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for k in (0..src.len()).rev() {
        strides[k] = if src[k] == 1 { 0 } else { acc };
        acc *= src[k];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}
