//! Append-only autodiff tape.
//!
//! Each forward operation pushes a node holding its output value and whatever
//! it needs for the backward rule. Inputs always precede outputs, so a single
//! reverse sweep over the node list is a valid topological order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom, PoolGeom, PoolKind};
use super::scalar::{gemm, Scalar};
use super::{check_shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named parameter and buffer storage for one model.
///
/// Trainable tensors are visited by the optimizer; buffers such as
/// batch-norm running statistics are stored with `trainable == false`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(trainable));
        self.trainable.push(trainable);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |id| self.trainable[id.0])
    }

    /// Trainable tensors that currently receive gradients.
    pub fn active_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.trainable_ids().filter(move |id| self.tensors[id.0].requires_grad())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn param_count(&self) -> usize {
        self.trainable_ids().map(|id| self.tensors[id.0].numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Toggle gradient tracking for every trainable tensor whose name starts with `prefix`.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, flag: bool) {
        for i in 0..self.tensors.len() {
            if self.trainable[i] && self.names[i].starts_with(prefix) {
                self.tensors[i].set_requires_grad(flag);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        geom: PoolGeom,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (`m / (m - 1)`) per-channel variance.
    pub var: Vec<T>,
}

#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are validated on push")
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Leaf node; tracked when the tensor has `requires_grad`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Length {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node
    /// so multiple uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id));
        self.params.insert(id, v);
        v
    }

    /// Stop-gradient: same value, no path back to the input.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Detach, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = ops::broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = ops::broadcast_map(&out, sa);
            let mb = ops::broadcast_map(&out, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((out, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, value, Op::Scale(a, s), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, value, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation with constants `sqrt(2/pi)` and `0.044715`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| ops::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, value, Op::Gelu(a), ng)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        self.matmul_impl(a, b, 1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// Batched `[B, m, k] x [B, k, n]`, or `x [B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("incompatible batches {sa:?} and {sb:?}")));
        }
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sa[2] != kb {
            return Err(Error::shape("bmm", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        self.matmul_impl(a, b, sa[0], sa[1], sa[2], n, trans_b, vec![sa[0], sa[1], n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut value = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                false,
                trans_b,
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut value[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            shape,
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        if n != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let value = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let value = ops::permute(self.value(a), &shape, perm);
        let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ng = self.needs(a);
        Ok(self.push(out, value, Op::Permute(a, perm.to_vec()), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = ops::split_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(shape, value, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, full, inner) = ops::split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = o * full * inner + start * inner;
            value.extend_from_slice(&src[at..at + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(out, value, Op::Slice { x, axis, start }, ng))
    }

    /// Numerically stable softmax (max subtraction) along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (o, l, i) = ops::split_axis(&shape, axis);
        let value = ops::softmax(self.value(x), o, l, i);
        let ng = self.needs(x);
        Ok(self.push(shape, value, Op::Softmax(x, axis), ng))
    }

    /// `[N, C, H, W] * [F, C, kh, kw] -> [N, F, H', W']` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?} incompatible with weight {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh > sx[2] + 2 * pad || kw > sx[3] + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", sx[2] + 2 * pad, sx[3] + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            f: sw[0],
            kh,
            kw,
            stride,
            pad,
            oh: (sx[2] + 2 * pad - kh) / stride + 1,
            ow: (sx[3] + 2 * pad - kw) / stride + 1,
        };
        let value = ops::conv2d_forward(self.value(x), self.value(w), &geom);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(vec![geom.n, geom.f, geom.oh, geom.ow], value, Op::Conv2d { x, w, geom }, ng))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("pool2d", format!("expected [N, C, H, W], got {s:?}")));
        }
        if k == 0 || stride == 0 || k > s[2] || k > s[3] {
            return Err(Error::shape("pool2d", format!("kernel {k} exceeds input {}x{}", s[2], s[3])));
        }
        let geom = PoolGeom {
            planes: s[0] * s[1],
            h: s[2],
            w: s[3],
            k,
            stride,
            oh: (s[2] - k) / stride + 1,
            ow: (s[3] - k) / stride + 1,
        };
        let (value, argmax) = ops::pool2d_forward(self.value(x), &geom, kind);
        let ng = self.needs(x);
        Ok(self.push(
            vec![s[0], s[1], geom.oh, geom.ow],
            value,
            Op::Pool {
                x,
                kind,
                geom,
                argmax,
            },
            ng,
        ))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected [N, C, H, W], got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::lit(hw as f64);
        let value = self
            .value(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(vec![s[0], s[1]], value, Op::GlobalAvgPool(x), ng))
    }

    fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
        match shape.len() {
            2 => Ok((shape[0], shape[1], 1)),
            4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
            _ => Err(Error::shape("batch_norm", format!("expected [N, C] or [N, C, H, W], got {shape:?}"))),
        }
    }

    /// Train-mode batch norm over every axis except channels (axis 1).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = Self::channel_layout(&shape)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm needs at least 2 values per channel in train mode, got {m}"
            )));
        }
        self.check_affine(gamma, beta, c)?;
        let xv = self.value(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                mean[ch] += plane.iter().copied().sum::<T>();
            }
        }
        let mf = T::lit(m as f64);
        mean.iter_mut().for_each(|v| *v /= mf);
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                var[ch] += plane.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * mf / T::lit((m - 1) as f64)).collect(),
        };
        let v = self.normalize_channels(x, gamma, beta, &mean, &inv_std, n, c, hw, true);
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = Self::channel_layout(&shape)?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics do not match channel count"));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        Ok(self.normalize_channels(x, gamma, beta, running_mean, &inv_std, n, c, hw, false))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", format!("affine parameters must have {c} channels")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_channels(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        hw: usize,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    let at = (s * c + ch) * hw + i;
                    let h = (xv[at] - mean[ch]) * inv_std[ch];
                    xhat[at] = h;
                    out[at] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            ng,
        )
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", format!("affine parameters must have {d} features")));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        let df = T::lit(d as f64);
        for (r, row) in xv.chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Scale each row (last axis) to unit l2 norm. Rows with norm below
    /// `1e-12` are rejected as degenerate.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = Vec::with_capacity(xv.len());
        for (r, row) in xv.chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm.as_f64() >= 1e-12) {
                return Err(Error::DegenerateVector {
                    row: r,
                    norm: norm.as_f64(),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let ng = self.needs(x);
        Ok(self.push(shape, out, Op::L2Normalize { x, norms }, ng))
    }

    /// Mean of `-log softmax(logits)[label]` over rows, computed in log space.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label(format!("class index {bad} outside [0, {k})")));
        }
        let probs = ops::softmax(self.value(logits), n, k, 1);
        let xv = self.value(logits);
        let mut total = 0.0f64;
        for (r, &l) in labels.iter().enumerate() {
            let row = &xv[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += (lse - row[l]).as_f64();
        }
        let loss = T::lit(total / n as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean elementwise binary cross-entropy on logits:
    /// `max(x, 0) - x y + log(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let xv = self.value(logits);
        if xv.len() != targets.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} logits vs {} targets", xv.len(), targets.len()),
            ));
        }
        if targets.iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::Label("binary targets must be 0 or 1".into()));
        }
        let mut total = 0.0f64;
        for (&x, &y) in xv.iter().zip(targets) {
            let x = x.as_f64();
            let y = y.as_f64();
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let loss = T::lit(total / xv.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients become available
    /// through [`Graph::grad`]; the graph cannot be swept twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.leaf_grads.insert(i, g);
                continue;
            }
            for (input, delta) in self.input_grads(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    None => grads[input.0] = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// `backward`, then `+=` every bound parameter's gradient into the store.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Detach => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, ops::reduce_broadcast(g, &node.shape, self.shape(*a))));
                }
                if want(*b) {
                    let mut d = ops::reduce_broadcast(g, &node.shape, self.shape(*b));
                    if matches!(node.op, Op::Sub(..)) {
                        d.iter_mut().for_each(|v| *v = -*v);
                    }
                    out.push((*b, d));
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !want(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod: Vec<T> = if self.shape(other) == node.shape.as_slice() {
                        g.iter().zip(ov).map(|(&d, &o)| d * o).collect()
                    } else {
                        let map = ops::broadcast_map(&node.shape, self.shape(other));
                        g.iter().zip(&map).map(|(&d, &j)| d * ov[j]).collect()
                    };
                    out.push((this, ops::reduce_broadcast(&prod, &node.shape, self.shape(this))));
                }
                out
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|&d| d * *s).collect())],
            Op::Relu(a) => {
                let xv = self.value(*a);
                vec![(
                    *a,
                    g.iter()
                        .zip(xv)
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                vec![(*a, g.iter().zip(xv).map(|(&d, &x)| d * ops::gelu_grad(x)).collect())]
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut out = Vec::new();
                if want(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        // dA = dC * op(B)^T
                        gemm(false, !*trans_b, m, n, k, gi, bi, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dC^T * A
                            gemm(true, false, n, m, k, gi, ai, dbi, false);
                        } else {
                            gemm(true, false, k, m, n, ai, gi, dbi, false);
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let len = self.value(*a).len();
                vec![(*a, vec![g[0] / T::lit(len as f64); len])]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute(a, perm) => {
                vec![(*a, ops::permute(g, &node.shape, &ops::inverse_permutation(perm)))]
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = ops::split_axis(&node.shape, *axis);
                let mut offset = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if want(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let at = (o * total + offset) * inner;
                            d.extend_from_slice(&g[at..at + len * inner]);
                        }
                        out.push((p, d));
                    }
                    offset += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, full, inner) = ops::split_axis(src_shape, *axis);
                let len = node.shape[*axis];
                let mut d = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let at = o * full * inner + start * inner;
                    d[at..at + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, d)]
            }
            Op::Softmax(x, axis) => {
                let (o, l, i) = ops::split_axis(&node.shape, *axis);
                vec![(*x, ops::softmax_backward(&node.value, g, o, l, i))]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = ops::conv2d_backward(self.value(*x), self.value(*w), g, geom, want(*x), want(*w));
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                out
            }
            Op::Pool { x, kind, geom, argmax } => {
                vec![(*x, ops::pool2d_backward(g, geom, *kind, argmax))]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::lit(hw as f64);
                let mut d = Vec::with_capacity(g.len() * hw);
                for &v in g {
                    d.extend(std::iter::repeat(v * inv).take(hw));
                }
                vec![(*x, d)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, hw) = Self::channel_layout(&node.shape).expect("validated in forward");
                let gv = self.value(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..hw {
                            let at = (s * c + ch) * hw + i;
                            sum_dy[ch] += g[at];
                            sum_dy_xhat[ch] += g[at] * xhat[at];
                        }
                    }
                }
                let mut out = Vec::new();
                if want(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let mf = T::lit((n * hw) as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * inv_std[ch];
                            for i in 0..hw {
                                let at = (s * c + ch) * hw + i;
                                dx[at] = if *batch_stats {
                                    k / mf * (mf * g[at] - sum_dy[ch] - xhat[at] * sum_dy_xhat[ch])
                                } else {
                                    k * g[at]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if want(*gamma) {
                    out.push((*gamma, sum_dy_xhat));
                }
                if want(*beta) {
                    out.push((*beta, sum_dy));
                }
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().expect("non-empty");
                let gv = self.value(*gamma);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                let df = T::lit(d as f64);
                for (r, is) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = *is / df * (df * dh - s1 - hr[j] * s2);
                    }
                }
                let mut out = Vec::new();
                if want(*x) {
                    out.push((*x, dx));
                }
                if want(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if want(*beta) {
                    out.push((*beta, dbeta));
                }
                out
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.shape.last().expect("non-empty");
                let y = &node.value;
                let mut dx = vec![T::zero(); g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let dot: T = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in row {
                        dx[j] = (g[j] - y[j] * dot) / norm;
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::lit(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = self.value(*logits);
                let scale = g[0] / T::lit(xv.len() as f64);
                let d = xv
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (T::one() / (T::one() + (-x).exp()) - y) * scale)
                    .collect();
                vec![(*logits, d)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut g = Graph::new();
        let i = g.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ia = g.matmul(i, a).unwrap();
        assert_eq!(g.value(ia), &[1.0, 2.0, 3.0, 4.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.input(&Tensor::<f64>::zeros(&[2, 3]).unwrap());
        let b = g.input(&Tensor::<f64>::zeros(&[4, 2]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_identity_and_sum() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::gaussian(&[2, 1, 4, 5], 0.0, 1.0, 3).unwrap();
        let xv = g.input(&x);
        let k = g.input(&t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(xv, k, 1, 0).unwrap();
        assert_eq!(g.value(y), x.data());

        let ones = g.input(&Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let w = g.input(&Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let y = g.conv2d(ones, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
    }

    #[test]
    fn conv_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.input(&Tensor::zeros(&[2, 3, 32, 32]).unwrap());
        let w = g.input(&Tensor::zeros(&[8, 3, 3, 3]).unwrap());
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 32, 32]);
        let big = g.input(&Tensor::zeros(&[1, 3, 5, 5]).unwrap());
        let x = g.input(&Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        assert!(matches!(g.conv2d(x, big, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(a);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let x = g.input(&t(&[2], &[1.0, 2.0]));
        let y = g.input(&t(&[2], &[3.0, 4.0]));
        let s = g.add(x, y).unwrap();
        assert_eq!(g.value(s), &[4.0, 6.0]);
        let z = g.input(&t(&[1], &[0.0]));
        let ge = g.gelu(z);
        assert_eq!(g.value(ge), &[0.0]);
        let bad = g.input(&t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(x, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let u = g.input(&t(&[3], &[2.5, 2.5, 2.5]));
        let s = g.softmax(u, 0).unwrap();
        for &v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let l = g.input(&t(&[2], &[0.0, 3f64.ln()]));
        let s = g.softmax(l, 0).unwrap();
        assert!((g.value(s)[0] - 0.25).abs() < 1e-12);
        assert!((g.value(s)[1] - 0.75).abs() < 1e-12);
        let big = g.input(&t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(big, 0).unwrap();
        assert!((g.value(s)[0] - 1.0).abs() < 1e-12 && g.value(s)[1] < 1e-300);
    }

    #[test]
    fn backward_examples() {
        let w = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let wv = g.input(&w);
        let s = g.sum(wv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(wv).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let wv = g.input(&w);
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(wv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_into_store() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let s = g.sum(w);
            g.backward_into(s, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_lifecycle_and_rank() {
        let w = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let wv = g.input(&w);
        assert!(matches!(g.backward(wv), Err(Error::Rank(_))));
        let s = g.sum(wv);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]), false).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let s = g.sum(w);
        g.backward_into(s, &mut store).unwrap();
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let w = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let wv = g.input(&w);
        let d = g.detach(wv);
        let p = g.mul(wv, d).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        // d/dw (w * sg(w)) = sg(w)
        assert_eq!(g.grad(wv).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn pooling_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.pool2d(x, PoolKind::Max, 2, 2).unwrap();
        assert_eq!(g.value(m), &[4.0]);
        let a = g.pool2d(x, PoolKind::Avg, 2, 2).unwrap();
        assert_eq!(g.value(a), &[2.5]);
        let c = g.input(&Tensor::create(&[2, 3, 4, 4], crate::tensor::Fill::Values(vec![1.5; 96])).unwrap());
        let gap = g.global_avg_pool(c).unwrap();
        assert_eq!(g.shape(gap), &[2, 3]);
        assert!(g.value(gap).iter().all(|&v| v == 1.5));
        assert!(matches!(g.pool2d(x, PoolKind::Max, 3, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(&Tensor::zeros(&[4, 10]).unwrap().with_requires_grad(true));
        let l = g.cross_entropy(logits, &[0, 3, 9, 1]).unwrap();
        assert!((g.value(l)[0] - 10f64.ln()).abs() < 1e-12);
        g.backward(l).unwrap();
        let grad = g.grad(logits).unwrap();
        for r in 0..4 {
            for c in 0..10 {
                let onehot = if [0, 3, 9, 1][r] == c { 1.0 } else { 0.0 };
                let want = (0.1 - onehot) / 4.0;
                assert!((grad[r * 10 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_limits_and_errors() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(&t(&[1, 3], &[200.0, 0.0, 0.0]));
        let l = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(l)[0] < 1e-12);
        assert!(matches!(g.cross_entropy(logits, &[3]), Err(Error::Label(_))));
    }

    #[test]
    fn bce_cases() {
        let mut g = Graph::<f64>::new();
        let zero = g.input(&t(&[1, 2], &[0.0, 0.0]));
        let l = g.bce_with_logits(zero, &[1.0, 0.0]).unwrap();
        assert!((g.value(l)[0] - 2f64.ln()).abs() < 1e-12);
        let big = g.input(&t(&[1, 1], &[50.0]));
        let l = g.bce_with_logits(big, &[1.0]).unwrap();
        assert!(g.value(l)[0].is_finite() && g.value(l)[0] < 1e-20);
        let a = g.input(&t(&[1, 1], &[1.7]));
        let b = g.input(&t(&[1, 1], &[-1.7]));
        let la = g.bce_with_logits(a, &[1.0]).unwrap();
        let lb = g.bce_with_logits(b, &[0.0]).unwrap();
        assert_eq!(g.value(la), g.value(lb));
        assert!(matches!(g.bce_with_logits(a, &[0.5]), Err(Error::Label(_))));
    }
}
