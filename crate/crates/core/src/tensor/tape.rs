use super::{
    argmax, argmin, broadcast_spatial, clamp_prob, concat_channels, cosine, dims3, flip_h, norm,
    same_shape, ConvGeometry, Tensor, PROB_CLAMP,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    ScaleBy,
    Sum,
    Relu,
    Sigmoid,
    FlipH,
    Conv2d,
    MaskedAvgPool,
    Cosine,
    ChannelSoftmax,
    Bce,
    CrossEntropy,
    Concat,
    Channel,
    MinMaxNorm,
    Broadcast,
    MaxReduce,
    Suppress,
    Reshape,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy { x: Var, s: Var },
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    FlipH(Var),
    Conv2d { x: Var, w: Var, b: Var, geo: ConvGeometry, cols: Option<Vec<f64>> },
    MaskedAvgPool { f: Var, mask: Tensor },
    Cosine(Var, Var),
    ChannelSoftmax(Var),
    Bce { pred: Var, gt: Tensor },
    CrossEntropy { probs: Var, labels: Vec<usize> },
    Concat(Vec<Var>),
    Channel { x: Var, c: usize },
    MinMaxNorm { x: Var, lo: usize, hi: usize },
    Broadcast(Var),
    MaxReduce { x: Var, idx: usize },
    Suppress { probs: Var, base: Tensor, theta: Var },
    Reshape(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(..) => OpKind::AddConst,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::Sum(..) => OpKind::Sum,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::FlipH(..) => OpKind::FlipH,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaskedAvgPool { .. } => OpKind::MaskedAvgPool,
            Op::Cosine(..) => OpKind::Cosine,
            Op::ChannelSoftmax(..) => OpKind::ChannelSoftmax,
            Op::Bce { .. } => OpKind::Bce,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Concat(..) => OpKind::Concat,
            Op::Channel { .. } => OpKind::Channel,
            Op::MinMaxNorm { .. } => OpKind::MinMaxNorm,
            Op::Broadcast(..) => OpKind::Broadcast,
            Op::MaxReduce { .. } => OpKind::MaxReduce,
            Op::Suppress { .. } => OpKind::Suppress,
            Op::Reshape(..) => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Values are appended in execution order; [`Tape::backward`] walks them in
/// exact reverse and may run only once per tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    corrupt: Option<OpKind>,
}

/// Gradients of a scalar loss with respect to the leaves that asked for them.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// `Some` exactly for leaves recorded with `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Recorded op kinds, in recording order.
    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    /// Test hook: scale the gradient flowing through every op of `kind` by 1.5,
    /// simulating a broken backward rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddConst(a), rg)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!("scale_by needs a scalar, got {:?}", self.value(s).shape())));
        }
        let k = self.value(s).item();
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleBy { x, s }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = super::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = super::sigmoid(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn flip_h(&mut self, a: Var) -> Result<Var> {
        let value = flip_h(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::FlipH(a), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let (value, cols) = if geo.is_pointwise() {
            (super::conv2d_with_cols(&geo, self.value(x).data(), self.value(w), self.value(b)), None)
        } else {
            let cols = geo.im2col(self.value(x).data());
            (super::conv2d_with_cols(&geo, &cols, self.value(w), self.value(b)), Some(cols))
        };
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geo, cols }, rg))
    }

    pub fn masked_avg_pool(&mut self, f: Var, mask: &Tensor) -> Result<Var> {
        let value = super::masked_avg_pool(self.value(f), mask)?;
        let rg = self.rg(&[f]);
        Ok(self.push(value, Op::MaskedAvgPool { f, mask: mask.clone() }, rg))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let value = Tensor::scalar(cosine(self.value(a).data(), self.value(b).data()));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Cosine(a, b), rg))
    }

    pub fn channel_softmax(&mut self, a: Var) -> Result<Var> {
        let value = super::channel_softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ChannelSoftmax(a), rg))
    }

    pub fn softmax2(&mut self, a: Var) -> Result<Var> {
        let value = super::softmax2(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ChannelSoftmax(a), rg))
    }

    pub fn bce(&mut self, pred: Var, gt: &Tensor) -> Result<Var> {
        let value = Tensor::scalar(super::bce(self.value(pred), gt)?);
        let rg = self.rg(&[pred]);
        Ok(self.push(value, Op::Bce { pred, gt: gt.clone() }, rg))
    }

    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let value = Tensor::scalar(super::cross_entropy(self.value(probs), labels)?);
        let rg = self.rg(&[probs]);
        Ok(self.push(value, Op::CrossEntropy { probs, labels: labels.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let value = concat_channels(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Channel `c` of a `[C, H, W]` value as an `[H, W]` map.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let value = self.value(x).channel(c)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Channel { x, c }, rg))
    }

    pub fn min_max_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (lo, _) = argmin(t.data());
        let (hi, _) = argmax(t.data());
        let value = super::min_max_normalize(t);
        let rg = self.rg(&[x]);
        self.push(value, Op::MinMaxNorm { x, lo, hi }, rg)
    }

    pub fn broadcast(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let value = broadcast_spatial(self.value(v), h, w)?;
        let rg = self.rg(&[v]);
        Ok(self.push(value, Op::Broadcast(v), rg))
    }

    /// Largest element as a scalar; the gradient goes to the first maximiser.
    pub fn max_reduce(&mut self, x: Var) -> Result<(Var, usize)> {
        if self.value(x).is_empty() {
            return Err(Error::shape("max of an empty tensor"));
        }
        let (idx, m) = argmax(self.value(x).data());
        let rg = self.rg(&[x]);
        Ok((self.push(Tensor::scalar(m), Op::MaxReduce { x, idx }, rg), idx))
    }

    /// Damps the foreground channel of a `[2, H, W]` probability map by
    /// `clamp(1 - theta * base, 0, 1)` per pixel and recomputes background as
    /// its complement.
    pub fn suppress(&mut self, probs: Var, base: &Tensor, theta: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(probs))?;
        if c != 2 || base.shape() != [h, w] || self.value(theta).len() != 1 {
            return Err(Error::shape("suppress expects [2, H, W] probs, [H, W] base and scalar theta"));
        }
        let th = self.value(theta).item();
        let plane = h * w;
        let p = self.value(probs).data();
        let mut out = vec![0.0; 2 * plane];
        for i in 0..plane {
            let fg = p[plane + i] * (1.0 - th * base.data()[i]).clamp(0.0, 1.0);
            out[plane + i] = fg;
            out[i] = 1.0 - fg;
        }
        let value = Tensor::new(vec![2, h, w], out)?;
        let rg = self.rg(&[probs, theta]);
        Ok(self.push(value, Op::Suppress { probs, base: base.clone(), theta }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarRoot(root.value.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.corrupt == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backprop_node(i, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => Some(
                    Tensor::new(node.value.shape().to_vec(), g.unwrap_or_else(|| vec![0.0; node.value.len()]))
                        .expect("gradient buffer matches its leaf"),
                ),
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        // Adds into the gradient buffer of `v` if it takes part in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if node.requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
                f(buf);
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::AddConst(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::ScaleBy { x, s } => {
                let k = val(*s).item();
                let xv = val(*x).data();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g));
                acc(*s, &mut |d| d[0] += super::dot(g, xv));
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Relu(a) => {
                let xv = val(*a).data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::FlipH(a) => {
                let w = *out.shape().last().unwrap();
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_mut(w).zip(g.chunks(w)) {
                        for (dv, gv) in drow.iter_mut().zip(grow.iter().rev()) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geo, cols } => {
                let positions = geo.oh * geo.ow;
                let patch = geo.patch_len();
                let cols = cols.as_deref().unwrap_or_else(|| val(*x).data());
                acc(*w, &mut |d| super::gemm(geo.cout, positions, patch, g, false, cols, true, d, 1.0));
                acc(*b, &mut |d| {
                    for (co, dv) in d.iter_mut().enumerate() {
                        *dv += g[co * positions..(co + 1) * positions].iter().sum::<f64>();
                    }
                });
                let wv = val(*w).data();
                acc(*x, &mut |d| {
                    if geo.is_pointwise() {
                        super::gemm(patch, geo.cout, positions, wv, true, g, false, d, 1.0);
                    } else {
                        let mut dcols = vec![0.0; patch * positions];
                        super::gemm(patch, geo.cout, positions, wv, true, g, false, &mut dcols, 0.0);
                        add_into(d, &geo.col2im(&dcols));
                    }
                });
            }
            Op::MaskedAvgPool { f, mask } => {
                let area = mask.sum();
                let plane = mask.len();
                acc(*f, &mut |d| {
                    for (c, gc) in g.iter().enumerate() {
                        for (p, m) in mask.data().iter().enumerate() {
                            d[c * plane + p] += gc * m / area;
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let (na, nb) = (norm(av), norm(bv));
                if na >= super::COSINE_EPS && nb >= super::COSINE_EPS {
                    let c = super::dot(av, bv) / (na * nb);
                    acc(*a, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[0] * (bv[k] / (na * nb) - c * av[k] / (na * na));
                        }
                    });
                    acc(*b, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[0] * (av[k] / (na * nb) - c * bv[k] / (nb * nb));
                        }
                    });
                }
            }
            Op::ChannelSoftmax(a) => {
                let (n, h, w) = dims3(out).unwrap();
                let plane = h * w;
                let y = out.data();
                acc(*a, &mut |d| {
                    for p in 0..plane {
                        let s: f64 = (0..n).map(|c| g[c * plane + p] * y[c * plane + p]).sum();
                        for c in 0..n {
                            let k = c * plane + p;
                            d[k] += y[k] * (g[k] - s);
                        }
                    }
                });
            }
            Op::Bce { pred, gt } => {
                let pv = val(*pred).data();
                let plane = gt.len();
                let scale = -g[0] / plane as f64;
                acc(*pred, &mut |d| {
                    for (p, &t) in gt.data().iter().enumerate() {
                        let (bg, fg) = (pv[p], pv[plane + p]);
                        if interior(fg) {
                            d[plane + p] += scale * t / fg;
                        }
                        if interior(bg) {
                            d[p] += scale * (1.0 - t) / bg;
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = val(*probs).data();
                let plane = labels.len();
                let scale = -g[0] / plane as f64;
                acc(*probs, &mut |d| {
                    for (p, &l) in labels.iter().enumerate() {
                        let k = l * plane + p;
                        if interior(pv[k]) {
                            d[k] += scale / pv[k];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for part in parts {
                    let len = val(*part).len();
                    acc(*part, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Channel { x, c } => {
                let plane = out.len();
                acc(*x, &mut |d| add_into(&mut d[c * plane..(c + 1) * plane], g));
            }
            Op::MinMaxNorm { x, lo, hi } => {
                let xv = val(*x).data();
                let range = xv[*hi] - xv[*lo];
                if range > 0.0 {
                    let y = out.data();
                    let gsum: f64 = g.iter().sum();
                    let gy = super::dot(g, y);
                    acc(*x, &mut |d| {
                        for k in 0..d.len() {
                            d[k] += g[k] / range;
                        }
                        d[*lo] += (gy - gsum) / range;
                        d[*hi] -= gy / range;
                    });
                }
            }
            Op::Broadcast(v) => {
                let plane = out.len() / val(*v).len();
                acc(*v, &mut |d| {
                    for (c, dv) in d.iter_mut().enumerate() {
                        *dv += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
            Op::MaxReduce { x, idx } => acc(*x, &mut |d| d[*idx] += g[0]),
            Op::Suppress { probs, base, theta } => {
                let plane = base.len();
                let pv = val(*probs).data();
                let th = val(*theta).item();
                // d fg' collects both output channels since bg' = 1 - fg'.
                let dfg = |i: usize| g[plane + i] - g[i];
                acc(*probs, &mut |d| {
                    for i in 0..plane {
                        d[plane + i] += dfg(i) * (1.0 - th * base.data()[i]).clamp(0.0, 1.0);
                    }
                });
                acc(*theta, &mut |d| {
                    for i in 0..plane {
                        let s = 1.0 - th * base.data()[i];
                        if s > 0.0 && s < 1.0 {
                            d[0] -= dfg(i) * pv[plane + i] * base.data()[i];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn interior(p: f64) -> bool {
    p > PROB_CLAMP && p < 1.0 - PROB_CLAMP && clamp_prob(p) == p
}
