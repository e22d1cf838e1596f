//! Siamese model: backbone `f`, projection head, prediction head.
//!
//! For two views `x1, x2` of the same images:
//! `z_i = projection(f(x_i))`, `p_i = prediction(z_i)`, and the training loss
//! is `0.5 * D(p1, sg(z2)) + 0.5 * D(p2, sg(z1))` where `D` is the negative
//! cosine similarity and `sg` the stop-gradient.

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, Init, Linear};
use crate::tensor::{seeded_rng, Graph, ParamStore, Prng, Scalar, Var};

pub const PREDICTION_BOTTLENECK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub projection_dim: usize,
    /// Batch norm after the last projection layer as well (off by default).
    pub projection_output_bn: bool,
    pub stop_gradient: bool,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            projection_dim: 256,
            projection_output_bn: false,
            stop_gradient: true,
        }
    }
}

impl SiameseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.projection_dim == 0 || self.projection_dim % PREDICTION_BOTTLENECK != 0 {
            return Err(Error::Config(format!(
                "projection dim {} must be a positive multiple of {PREDICTION_BOTTLENECK}",
                self.projection_dim
            )));
        }
        Ok(())
    }
}

/// Three linear layers `d_f -> d -> d -> d`; batch norm and relu after the
/// first two only.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    layers: [Linear; 3],
    norms: Vec<BatchNorm>,
    output_bn: Option<BatchNorm>,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d_in: usize, d: usize, output_bn: bool, rng: &mut Prng) -> Result<Self> {
        let l1 = Linear::new(store, "projection.fc1", d_in, d, false, Init::KaimingUniform { fan_in: d_in }, rng)?;
        let l2 = Linear::new(store, "projection.fc2", d, d, false, Init::KaimingUniform { fan_in: d }, rng)?;
        let l3 = Linear::new(store, "projection.fc3", d, d, !output_bn, Init::KaimingUniform { fan_in: d }, rng)?;
        let norms = vec![
            BatchNorm::new(store, "projection.bn1", d)?,
            BatchNorm::new(store, "projection.bn2", d)?,
        ];
        let output_bn = if output_bn {
            Some(BatchNorm::new(store, "projection.bn3", d)?)
        } else {
            None
        };
        Ok(ProjectionHead {
            layers: [l1, l2, l3],
            norms,
            output_bn,
        })
    }

    pub fn linear_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn has_output_bn(&self) -> bool {
        self.output_bn.is_some()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, bn) in self.layers[..2].iter().zip(&self.norms) {
            h = layer.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.graph.relu(h);
        }
        let out = self.layers[2].forward(ctx, h)?;
        match &self.output_bn {
            Some(bn) => bn.forward(ctx, out),
            None => Ok(out),
        }
    }
}

/// Bottleneck `d -> d/4 -> d` with batch norm and relu on the hidden layer.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    hidden: Linear,
    bn: BatchNorm,
    output: Linear,
}

impl PredictionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, d: usize, rng: &mut Prng) -> Result<Self> {
        if d == 0 || d % PREDICTION_BOTTLENECK != 0 {
            return Err(Error::Config(format!(
                "prediction head dim {d} is not divisible by {PREDICTION_BOTTLENECK}"
            )));
        }
        let h = d / PREDICTION_BOTTLENECK;
        Ok(PredictionHead {
            hidden: Linear::new(store, "prediction.fc1", d, h, false, Init::KaimingUniform { fan_in: d }, rng)?,
            bn: BatchNorm::new(store, "prediction.bn1", h)?,
            output: Linear::new(store, "prediction.fc2", h, d, true, Init::KaimingUniform { fan_in: h }, rng)?,
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.d_out
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        let h = ctx.graph.relu(h);
        self.output.forward(ctx, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SiameseOutputs {
    pub p1: Var,
    pub p2: Var,
    /// Projections as fed to the loss: stop-gradient copies when enabled.
    pub z1: Var,
    pub z2: Var,
}

#[derive(Clone, Debug)]
pub struct SiameseModel {
    pub backbone: Backbone,
    pub projection: ProjectionHead,
    pub prediction: PredictionHead,
    pub config: SiameseConfig,
}

impl SiameseModel {
    pub fn build<T: Scalar>(backbone: &BackboneConfig, config: &SiameseConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let backbone = Backbone::build(backbone, &mut store, &mut rng)?;
        let d = config.projection_dim;
        let projection = ProjectionHead::new(&mut store, backbone.output_dim(), d, config.projection_output_bn, &mut rng)?;
        let prediction = PredictionHead::new(&mut store, d, &mut rng)?;
        Ok((
            SiameseModel {
                backbone,
                projection,
                prediction,
                config: config.clone(),
            },
            store,
        ))
    }

    /// `z = projection(backbone(x))`.
    pub fn project<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let f = self.backbone.forward(ctx, x)?;
        self.projection.forward(ctx, f)
    }

    /// Both branches; the backbone and projection run once per view.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x1: Var, x2: Var) -> Result<SiameseOutputs> {
        let (s1, s2) = (ctx.graph.shape(x1), ctx.graph.shape(x2));
        if s1 != s2 {
            return Err(Error::shape("siamese_forward", format!("views differ: {s1:?} vs {s2:?}")));
        }
        let z1 = self.project(ctx, x1)?;
        let z2 = self.project(ctx, x2)?;
        let p1 = self.prediction.forward(ctx, z1)?;
        let p2 = self.prediction.forward(ctx, z2)?;
        let (z1, z2) = if self.config.stop_gradient {
            (ctx.graph.detach(z1), ctx.graph.detach(z2))
        } else {
            (z1, z2)
        };
        Ok(SiameseOutputs { p1, p2, z1, z2 })
    }
}

/// Batch mean of `-<x/|x|, y/|y|>` over rows of two `[N, d]` tensors.
pub fn negative_cosine_similarity<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx.len() != 2 || sx != sy {
        return Err(Error::shape("negative_cosine_similarity", format!("{sx:?} vs {sy:?}")));
    }
    let xn = g.l2_normalize(x)?;
    let yn = g.l2_normalize(y)?;
    let prod = g.mul(xn, yn)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / sx[0] as f64))
}

/// `0.5 * D(p1, z2) + 0.5 * D(p2, z1)`.
pub fn symmetric_loss<T: Scalar>(g: &mut Graph<T>, p1: Var, p2: Var, z1: Var, z2: Var) -> Result<Var> {
    let a = negative_cosine_similarity(g, p1, z2)?;
    let b = negative_cosine_similarity(g, p2, z1)?;
    let a = g.scale(a, 0.5);
    let b = g.scale(b, 0.5);
    g.add(a, b)
}

/// Mean over dimensions of the per-dimension (population) standard deviation
/// of l2-normalized rows. About `1/sqrt(d)` for spread-out embeddings, zero
/// under collapse.
pub fn representation_std<T: Scalar>(z: &[T], n: usize, d: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("representation_std needs at least 2 rows, got {n}")));
    }
    if z.len() != n * d {
        return Err(Error::Length {
            expected: n * d,
            actual: z.len(),
        });
    }
    let mut rows = Vec::with_capacity(n * d);
    for row in z.chunks(d) {
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(1e-12);
        rows.extend(row.iter().map(|v| v.as_f64() / norm));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| rows[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (rows[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}
