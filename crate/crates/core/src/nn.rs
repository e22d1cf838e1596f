//! Trainable layers. Layer structs only hold [`ParamId`]s into a shared
//! [`ParamStore`], so the same layout runs in fp32 for training and in fp64
//! for gradient checks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, PoolKind, Prng, Scalar, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a forward pass needs: the tape, the parameters, and the mode.
pub struct Ctx<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Ctx { graph, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, for weights followed by relu.
    KaimingUniform { fan_in: usize },
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor<T: Scalar>(self, shape: &[usize], rng: &mut Prng) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
            }
            Init::TruncNormal { std } => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break T::lit(z * std);
                    }
                })
                .collect(),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        Tensor::new(shape, data)
    }

    /// Bias matching a weight init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` after
    /// Kaiming weights, zeros otherwise.
    pub fn bias<T: Scalar>(self, shape: &[usize], rng: &mut Prng) -> Result<Tensor<T>> {
        match self {
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect())
            }
            _ => Tensor::zeros(shape),
        }
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

/// `y = x W + b` with `W` stored `[d_in, d_out]`. Accepts `[..., d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut Prng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[d_in, d_out], rng)?, true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init.bias(&[d_out], rng)?, true)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if last_dim(&shape) != self.d_in {
            return Err(Error::shape(
                "linear",
                format!("input {shape:?} does not end in {}", self.d_in),
            ));
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let flat = if shape.len() == 2 {
            x
        } else {
            ctx.graph.reshape(x, &[rows, self.d_in])?
        };
        let w = ctx.param(self.weight);
        let mut y = ctx.graph.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            y = ctx.graph.add(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.d_out;
            ctx.graph.reshape(y, &out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut Prng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init.tensor(&[c_out, c_in, kernel, kernel], rng)?,
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init.bias(&[1, c_out, 1, 1], rng)?, true)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let mut y = ctx.graph.conv2d(x, w, self.stride, self.padding)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            y = ctx.graph.add(y, b)?;
        }
        Ok(y)
    }
}

/// Batch norm over `[N, C]` or `[N, C, H, W]` with running statistics kept
/// as non-trainable buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])?, true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels])?, false)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let shape = ctx.graph.shape(x);
                if shape[0] < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch norm in train mode needs batch size >= 2, got {}",
                        shape[0]
                    )));
                }
                let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                    ctx.store
                        .get_mut(id)
                        .data_mut()
                        .iter_mut()
                        .zip(batch)
                        .for_each(|(r, &b)| *r = keep * *r + m * b);
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = ctx.store.get(self.running_mean).data().to_vec();
                let rv = ctx.store.get(self.running_var).data().to_vec();
                ctx.graph.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d])?, true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])?, true)?,
            eps: LN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        ctx.graph.layer_norm(x, gamma, beta, self.eps)
    }
}

/// `softmax(Q K^T / sqrt(d / h)) V` per head, heads concatenated, then an
/// output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        let init = Init::TruncNormal { std: 0.02 };
        Ok(MultiHeadAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, init, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, init, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape(
                "attention",
                format!("expected [N, T, {}], got {shape:?}", self.dim),
            ));
        }
        let (n, t, d, h) = (shape[0], shape[1], self.dim, self.heads);
        let dh = d / h;
        let qkv = self.qkv.forward(ctx, x)?;
        let g = &mut *ctx.graph;
        let qkv = g.reshape(qkv, &[n, t, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, N, h, T, dh]
        let mut parts = [None; 3];
        for (i, slot) in parts.iter_mut().enumerate() {
            let s = g.slice(qkv, 0, i, 1)?;
            *slot = Some(g.reshape(s, &[n * h, t, dh])?);
        }
        let [q, k, v] = parts.map(Option::unwrap);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let out = g.bmm(attn, v, false)?; // [N*h, T, dh]
        let out = g.reshape(out, &[n, h, t, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n, t, d])?;
        self.proj.forward(ctx, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Max { k: usize, stride: usize },
    Avg { k: usize, stride: usize },
    /// `[N, C, H, W] -> [N, C]`.
    GlobalAvg,
}

pub fn pool2d<T: Scalar>(g: &mut Graph<T>, x: Var, pool: Pool) -> Result<Var> {
    match pool {
        Pool::Max { k, stride } => g.pool2d(x, PoolKind::Max, k, stride),
        Pool::Avg { k, stride } => g.pool2d(x, PoolKind::Avg, k, stride),
        Pool::GlobalAvg => g.global_avg_pool(x),
    }
}
