use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    LeakyRelu(usize, T),
    Tanh(usize),
    InstanceNorm {
        x: usize,
        inv: Vec<T>,
    },
    ConcatChannels(Vec<usize>),
    StackBatch(Vec<usize>),
    SliceBatch {
        x: usize,
        start: usize,
    },
    Separable {
        x: usize,
        a: Rc<Tensor<T>>,
        b: Rc<Tensor<T>>,
    },
    Gather {
        x: usize,
        index: Rc<Vec<usize>>,
    },
    Reshape(usize),
    SpatialMean(usize),
    Mean(usize),
    CrossPool(usize, usize),
    Bce {
        logits: usize,
        targets: Rc<Tensor<T>>,
    },
    InfoNce {
        anchor: usize,
        positive: usize,
        cross: usize,
        temperature: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    mask: u8,
}

/// Append-only record of tensor operations.
///
/// Leaves created with [`Graph::leaf`] carry a group mask; every derived
/// node carries the union of its inputs' masks. [`Graph::backward`] only
/// walks edges whose source mask intersects the requested groups.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by leaf.
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, mask: u8) -> Var {
        self.nodes.push(Node { value, op, mask });
        Var(self.nodes.len() - 1)
    }

    fn mask(&self, i: usize) -> u8 {
        self.nodes[i].mask
    }

    /// Leaf that receives gradients for the groups in `mask`.
    pub fn leaf(&mut self, value: Tensor<T>, mask: u8) -> Var {
        self.push(value, Op::Leaf, mask)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, 0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let m = self.mask(a.0) | self.mask(b.0);
        self.push(v, Op::Add(a.0, b.0), m)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |p, q| p - q);
        let m = self.mask(a.0) | self.mask(b.0);
        self.push(v, Op::Sub(a.0, b.0), m)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q);
        let m = self.mask(a.0) | self.mask(b.0);
        self.push(v, Op::Mul(a.0, b.0), m)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = self.value(a).map(|p| p * s);
        let m = self.mask(a.0);
        self.push(v, Op::Scale(a.0, s), m)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(a).map(|p| p + c);
        let m = self.mask(a.0);
        self.push(v, Op::Offset(a.0), m)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let m = self.mask(x.0) | self.mask(w.0) | b.map_or(0, |b| self.mask(b.0));
        self.push(
            v,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            m,
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let v = self.value(a).map(|p| if p > T::zero() { p } else { p * s });
        let m = self.mask(a.0);
        self.push(v, Op::LeakyRelu(a.0, s), m)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|p| p.tanh());
        let m = self.mask(a.0);
        self.push(v, Op::Tanh(a.0), m)
    }

    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Var {
        let (v, inv) = kernels::instance_norm(self.value(a), T::lit(eps));
        let m = self.mask(a.0);
        self.push(v, Op::InstanceNorm { x: a.0, inv }, m)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let v = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
            kernels::concat_channels(&refs)
        };
        let m = parts.iter().fold(0, |m, p| m | self.mask(p.0));
        self.push(v, Op::ConcatChannels(parts.iter().map(|p| p.0).collect()), m)
    }

    pub fn stack_batch(&mut self, parts: &[Var]) -> Var {
        let v = {
            let owned: Vec<Tensor<T>> = parts.iter().map(|p| self.value(*p).clone()).collect();
            Tensor::stack_batch(&owned)
        };
        let m = parts.iter().fold(0, |m, p| m | self.mask(p.0));
        self.push(v, Op::StackBatch(parts.iter().map(|p| p.0).collect()), m)
    }

    /// Entries `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let per: usize = src.shape()[1..].iter().product();
        let mut shape = src.shape().to_vec();
        assert!(start + len <= shape[0], "slice_batch out of range");
        shape[0] = len;
        let v = Tensor::from_vec(&shape, src.data()[start * per..(start + len) * per].to_vec())
            .expect("slice_batch shape");
        let m = self.mask(x.0);
        self.push(v, Op::SliceBatch { x: x.0, start }, m)
    }

    /// `y = a @ x @ b^T` on every plane; see [`kernels::separable`].
    pub fn separable(&mut self, x: Var, a: Rc<Tensor<T>>, b: Rc<Tensor<T>>) -> Var {
        let v = kernels::separable(self.value(x), &a, &b);
        let m = self.mask(x.0);
        self.push(v, Op::Separable { x: x.0, a, b }, m)
    }

    /// `y[j] = x[index[j]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::from_vec(shape, data).expect("gather shape");
        let m = self.mask(x.0);
        self.push(v, Op::Gather { x: x.0, index }, m)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let m = self.mask(x.0);
        self.push(v, Op::Reshape(x.0), m)
    }

    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let v = kernels::spatial_mean(self.value(x));
        let m = self.mask(x.0);
        self.push(v, Op::SpatialMean(x.0), m)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let m = self.mask(x.0);
        self.push(v, Op::Mean(x.0), m)
    }

    /// `[n, c, h, w] x [m, c, h, w] -> [n, m, c]`; see [`kernels::cross_pool`].
    pub fn cross_pool(&mut self, maps: Var, conds: Var) -> Var {
        let v = kernels::cross_pool(self.value(maps), self.value(conds));
        let m = self.mask(maps.0) | self.mask(conds.0);
        self.push(v, Op::CrossPool(maps.0, conds.0), m)
    }

    /// Mean binary cross entropy of sigmoid(`logits`) against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Tensor<T>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shape mismatch");
        let total: T = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let v = Tensor::scalar(total / T::lit(z.len() as f64));
        let m = self.mask(logits.0);
        self.push(
            v,
            Op::Bce {
                logits: logits.0,
                targets,
            },
            m,
        )
    }

    /// In-batch InfoNCE over cosine similarities.
    ///
    /// `anchor` and `positive` are `[n, d]`; `cross` is `[n, n, d]` and row
    /// `k` holds the negatives `cross[k, q]` for every `q != k` (the diagonal
    /// is ignored). Every vector must have a nonzero norm.
    pub fn info_nce(&mut self, anchor: Var, positive: Var, cross: Var, temperature: f64) -> Var {
        let t = T::lit(temperature);
        let loss = info_nce_value(self.value(anchor), self.value(positive), self.value(cross), t);
        let m = self.mask(anchor.0) | self.mask(positive.0) | self.mask(cross.0);
        self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                anchor: anchor.0,
                positive: positive.0,
                cross: cross.0,
                temperature: t,
            },
            m,
        )
    }

    /// Reverse pass from the scalar `root`, restricted to leaves in `groups`.
    pub fn backward(&self, root: Var, groups: u8) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(gy) = slots[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                slots[i] = Some(gy);
                continue;
            }
            for (input, g) in self.local_grads(node, &gy, groups) {
                match &mut slots[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Grads { slots }
    }

    fn wants(&self, i: usize, groups: u8) -> bool {
        self.nodes[i].mask & groups != 0
    }

    fn local_grads(&self, node: &Node<T>, gy: &Tensor<T>, groups: u8) -> Vec<(usize, Tensor<T>)> {
        let mut out = Vec::new();
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a, groups) {
                    out.push((*a, gy.clone()));
                }
                if self.wants(*b, groups) {
                    out.push((*b, gy.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a, groups) {
                    out.push((*a, gy.clone()));
                }
                if self.wants(*b, groups) {
                    out.push((*b, gy.map(|g| -g)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a, groups) {
                    out.push((*a, gy.zip_map(val(*b), |g, q| g * q)));
                }
                if self.wants(*b, groups) {
                    out.push((*b, gy.zip_map(val(*a), |g, p| g * p)));
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a, groups) {
                    out.push((*a, gy.map(|g| g * *s)));
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if self.wants(*a, groups) {
                    out.push((*a, gy.clone().reshape(val(*a).shape())));
                }
            }
            Op::Conv { x, w, b, geom } => {
                let need_dx = self.wants(*x, groups);
                let need_dw = self.wants(*w, groups) || b.is_some_and(|b| self.wants(b, groups));
                if need_dx || need_dw {
                    let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), gy, geom, need_dx, need_dw);
                    if let Some(dx) = dx {
                        out.push((*x, dx));
                    }
                    if self.wants(*w, groups) {
                        out.push((*w, dw.expect("dw requested")));
                    }
                    if let Some(b) = b.filter(|b| self.wants(*b, groups)) {
                        out.push((b, db.expect("db requested")));
                    }
                }
            }
            Op::LeakyRelu(a, s) => {
                if self.wants(*a, groups) {
                    out.push((*a, gy.zip_map(val(*a), |g, p| if p > T::zero() { g } else { g * *s })));
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a, groups) {
                    out.push((*a, gy.zip_map(&node.value, |g, y| g * (T::one() - y * y))));
                }
            }
            Op::InstanceNorm { x, inv } => {
                if self.wants(*x, groups) {
                    out.push((*x, kernels::instance_norm_backward(&node.value, inv, gy)));
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = gy.dims4();
                let hw = h * w;
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).dims4().1;
                    if self.wants(p, groups) {
                        let mut g = Tensor::zeros(&[n, pc, h, w]);
                        for i in 0..n {
                            let src = &gy.data()[(i * total + off) * hw..(i * total + off + pc) * hw];
                            g.data_mut()[i * pc * hw..(i + 1) * pc * hw].copy_from_slice(src);
                        }
                        out.push((p, g));
                    }
                    off += pc;
                }
            }
            Op::StackBatch(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if self.wants(p, groups) {
                        let g = Tensor::from_vec(val(p).shape(), gy.data()[off..off + len].to_vec())
                            .expect("stack grad shape");
                        out.push((p, g));
                    }
                    off += len;
                }
            }
            Op::SliceBatch { x, start } => {
                if self.wants(*x, groups) {
                    let src = val(*x);
                    let per: usize = src.shape()[1..].iter().product();
                    let mut g = Tensor::zeros(src.shape());
                    g.data_mut()[start * per..start * per + gy.len()].copy_from_slice(gy.data());
                    out.push((*x, g));
                }
            }
            Op::Separable { x, a, b } => {
                if self.wants(*x, groups) {
                    out.push((*x, kernels::separable_adjoint(gy, a, b)));
                }
            }
            Op::Gather { x, index } => {
                if self.wants(*x, groups) {
                    let mut g = Tensor::zeros(val(*x).shape());
                    for (&i, &v) in index.iter().zip(gy.data()) {
                        g.data_mut()[i] = g.data()[i] + v;
                    }
                    out.push((*x, g));
                }
            }
            Op::SpatialMean(x) => {
                if self.wants(*x, groups) {
                    let (_, _, h, w) = val(*x).dims4();
                    let scale = T::one() / T::lit((h * w) as f64);
                    let mut g = Tensor::zeros(val(*x).shape());
                    for (plane, &v) in g.data_mut().chunks_mut(h * w).zip(gy.data()) {
                        plane.fill(v * scale);
                    }
                    out.push((*x, g));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x, groups) {
                    let n = val(*x).len();
                    out.push((*x, Tensor::full(val(*x).shape(), gy.item() / T::lit(n as f64))));
                }
            }
            Op::CrossPool(maps, conds) => {
                let (dm, dc) = kernels::cross_pool_backward(
                    val(*maps),
                    val(*conds),
                    gy,
                    self.wants(*maps, groups),
                    self.wants(*conds, groups),
                );
                if let Some(dm) = dm {
                    out.push((*maps, dm));
                }
                if let Some(dc) = dc {
                    out.push((*conds, dc));
                }
            }
            Op::Bce { logits, targets } => {
                if self.wants(*logits, groups) {
                    let z = val(*logits);
                    let scale = gy.item() / T::lit(z.len() as f64);
                    let g = z.zip_map(targets, |z, t| (sigmoid(z) - t) * scale);
                    out.push((*logits, g));
                }
            }
            Op::InfoNce {
                anchor,
                positive,
                cross,
                temperature,
            } => {
                let (ga, gp, gc) = info_nce_grads(val(*anchor), val(*positive), val(*cross), *temperature);
                let s = gy.item();
                for (i, g) in [(*anchor, ga), (*positive, gp), (*cross, gc)] {
                    if self.wants(i, groups) {
                        out.push((i, g.map(|v| v * s)));
                    }
                }
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&p, &q)| p * q).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Rows of the similarity table for anchor `k`: the positive first, then
/// every negative in batch order.
fn similarity_row<'a, T: Scalar>(
    k: usize,
    positive: &'a Tensor<T>,
    cross: &'a Tensor<T>,
    n: usize,
    d: usize,
) -> Vec<&'a [T]> {
    let mut rows = vec![&positive.data()[k * d..(k + 1) * d]];
    for q in (0..n).filter(|&q| q != k) {
        rows.push(&cross.data()[(k * n + q) * d..(k * n + q + 1) * d]);
    }
    rows
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn info_nce_value<T: Scalar>(anchor: &Tensor<T>, positive: &Tensor<T>, cross: &Tensor<T>, t: T) -> T {
    let (n, d) = (anchor.shape()[0], anchor.shape()[1]);
    assert_eq!(positive.shape(), [n, d], "info_nce positive shape");
    assert_eq!(cross.shape(), [n, n, d], "info_nce cross shape");
    let mut total = T::zero();
    for k in 0..n {
        let u = &anchor.data()[k * d..(k + 1) * d];
        let nu = norm(u);
        let sims: Vec<T> = similarity_row(k, positive, cross, n, d)
            .iter()
            .map(|v| dot(u, v) / (nu * norm(v)) / t)
            .collect();
        let max = sims.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + sims.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
        total = total + lse - sims[0];
    }
    total / T::lit(n as f64)
}

fn info_nce_grads<T: Scalar>(
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    cross: &Tensor<T>,
    t: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (anchor.shape()[0], anchor.shape()[1]);
    let mut ga = Tensor::zeros(anchor.shape());
    let mut gp = Tensor::zeros(positive.shape());
    let mut gc = Tensor::zeros(cross.shape());
    let inv_n = T::one() / T::lit(n as f64);
    for k in 0..n {
        let u = &anchor.data()[k * d..(k + 1) * d];
        let nu = norm(u);
        let rows = similarity_row(k, positive, cross, n, d);
        let cos: Vec<T> = rows.iter().map(|v| dot(u, v) / (nu * norm(v))).collect();
        let p = softmax(&cos.iter().map(|&c| c / t).collect::<Vec<_>>());
        let others: Vec<usize> = (0..n).filter(|&q| q != k).collect();
        for (j, v) in rows.iter().enumerate() {
            let coeff = (p[j] - if j == 0 { T::one() } else { T::zero() }) / t * inv_n;
            let nv = norm(v);
            let c = cos[j];
            let dst = if j == 0 {
                &mut gp.data_mut()[k * d..(k + 1) * d]
            } else {
                let q = others[j - 1];
                &mut gc.data_mut()[(k * n + q) * d..(k * n + q + 1) * d]
            };
            for e in 0..d {
                dst[e] = dst[e] + coeff * (u[e] / (nu * nv) - c * v[e] / (nv * nv));
            }
            let ga_k = &mut ga.data_mut()[k * d..(k + 1) * d];
            for e in 0..d {
                ga_k[e] = ga_k[e] + coeff * (v[e] / (nu * nv) - c * u[e] / (nu * nu));
            }
        }
    }
    (ga, gp, gc)
}
