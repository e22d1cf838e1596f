//! Feature extractors mapping `[N, C, H, W]` images to `[N, output_dim]`.
//!
//! * `resnet_small`: 3x3 stride-1 stem without max-pool, `stages` stages of
//!   `depth` basic residual blocks, channel doubling with stride-2 between
//!   stages, global average pool.
//! * `vit_tiny`: non-overlapping patches projected to `embed_dim`, a learned
//!   class token and position embeddings, `depth` pre-norm encoder blocks.
//! * `pit_tiny`: the ViT token pipeline split into three stages of `depth`
//!   blocks; between stages the token grid is 2x2 average pooled and a linear
//!   map doubles the channel count (the class token goes through its own
//!   linear map).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{pool2d, BatchNorm, Conv2d, Ctx, Init, LayerNorm, Linear, MultiHeadAttention, Pool};
use crate::tensor::{seeded_rng, Graph, ParamId, ParamStore, Prng, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ResnetSmall,
    VitTiny,
    PitTiny,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ResnetSmall => "resnet_small",
            Family::VitTiny => "vit_tiny",
            Family::PitTiny => "pit_tiny",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet_small" => Ok(Family::ResnetSmall),
            "vit_tiny" => Ok(Family::VitTiny),
            "pit_tiny" => Ok(Family::PitTiny),
            other => Err(Error::Config(format!("unknown backbone family `{other}`"))),
        }
    }
}

/// Which transformer token feeds the output embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPooling {
    ClassToken,
    Mean,
}

pub const PIT_POOLING_STAGES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    /// `(C, H, W)`.
    pub input_size: [usize; 3],
    /// Stem width for `resnet_small`, token width for the transformers.
    pub embed_dim: usize,
    /// Residual blocks per stage, or encoder blocks (per stage for PiT).
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub width_multiplier: f64,
    /// Residual stages (`resnet_small` only).
    pub stages: usize,
    /// Hidden width of the transformer MLP as a multiple of the token width.
    pub mlp_ratio: usize,
    pub pooling: TokenPooling,
}

impl BackboneConfig {
    pub fn resnet_small(input_size: [usize; 3]) -> Self {
        BackboneConfig {
            family: Family::ResnetSmall,
            input_size,
            embed_dim: 64,
            depth: 2,
            heads: 1,
            patch_size: 1,
            width_multiplier: 1.0,
            stages: 4,
            mlp_ratio: 1,
            pooling: TokenPooling::ClassToken,
        }
    }

    fn transformer(family: Family, input_size: [usize; 3]) -> Self {
        BackboneConfig {
            family,
            input_size,
            embed_dim: 64,
            depth: if family == Family::PitTiny { 1 } else { 4 },
            heads: 4,
            patch_size: if input_size[1] >= 96 { 8 } else { 4 },
            width_multiplier: 1.0,
            stages: 1,
            mlp_ratio: 2,
            pooling: TokenPooling::ClassToken,
        }
    }

    pub fn vit_tiny(input_size: [usize; 3]) -> Self {
        Self::transformer(Family::VitTiny, input_size)
    }

    pub fn pit_tiny(input_size: [usize; 3]) -> Self {
        Self::transformer(Family::PitTiny, input_size)
    }

    pub fn for_family(family: Family, input_size: [usize; 3]) -> Self {
        match family {
            Family::ResnetSmall => Self::resnet_small(input_size),
            Family::VitTiny => Self::vit_tiny(input_size),
            Family::PitTiny => Self::pit_tiny(input_size),
        }
    }

    fn stage_widths(&self) -> Vec<usize> {
        (0..self.stages)
            .map(|s| ((self.embed_dim << s) as f64 * self.width_multiplier).round().max(1.0) as usize)
            .collect()
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.input_size[1] / self.patch_size, self.input_size[2] / self.patch_size)
    }

    pub fn output_dim(&self) -> usize {
        match self.family {
            Family::ResnetSmall => *self.stage_widths().last().unwrap_or(&0),
            Family::VitTiny => self.embed_dim,
            Family::PitTiny => self.embed_dim << PIT_POOLING_STAGES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_size;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input size {:?} has an empty axis", self.input_size)));
        }
        if self.embed_dim == 0 || self.depth == 0 {
            return Err(Error::Config("embed_dim and depth must be positive".into()));
        }
        match self.family {
            Family::ResnetSmall => {
                if self.stages == 0 || !(self.width_multiplier > 0.0) {
                    return Err(Error::Config("resnet needs stages >= 1 and a positive width".into()));
                }
            }
            Family::VitTiny | Family::PitTiny => {
                let factor = if self.family == Family::PitTiny {
                    self.patch_size << PIT_POOLING_STAGES
                } else {
                    self.patch_size
                };
                if self.patch_size == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(Error::Config(format!(
                        "{}: input {h}x{w} not divisible by {factor} (patch {})",
                        self.family.name(),
                        self.patch_size
                    )));
                }
                if self.heads == 0 || self.embed_dim % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "embed_dim {} not divisible by {} heads",
                        self.embed_dim, self.heads
                    )));
                }
                if self.mlp_ratio == 0 {
                    return Err(Error::Config("mlp_ratio must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut Prng) -> Result<Self> {
        let k3 = |c| Init::KaimingUniform { fan_in: c * 9 };
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, k3(c_in), rng)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, k3(c_out), rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out)?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(
                    store,
                    &format!("{name}.down.conv"),
                    c_in,
                    c_out,
                    1,
                    stride,
                    0,
                    false,
                    Init::KaimingUniform { fan_in: c_in },
                    rng,
                )?,
                BatchNorm::new(store, &format!("{name}.down.bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.graph.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.graph.add(y, skip)?;
        Ok(ctx.graph.relu(sum))
    }
}

#[derive(Clone, Debug)]
struct ResNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut Prng) -> Result<Self> {
        let init = Init::TruncNormal { std: 0.02 };
        Ok(EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, true, init, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, true, init, rng)?,
        })
    }

    /// Pre-norm: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h)?;
        let x = ctx.graph.add(x, h)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.graph.gelu(h);
        let h = self.fc2.forward(ctx, h)?;
        ctx.graph.add(x, h)
    }
}

/// Patch projection, class token, and position embeddings shared by ViT and PiT.
#[derive(Clone, Debug)]
struct TokenEmbed {
    patch: Conv2d,
    cls: ParamId,
    pos: ParamId,
}

impl TokenEmbed {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut Prng) -> Result<Self> {
        let d = cfg.embed_dim;
        let (gh, gw) = cfg.token_grid();
        let p = cfg.patch_size;
        let patch = Conv2d::new(
            store,
            "backbone.patch_embed",
            cfg.input_size[0],
            d,
            p,
            p,
            0,
            true,
            Init::TruncNormal { std: 0.02 },
            rng,
        )?;
        let init = Init::TruncNormal { std: 0.02 };
        let cls = store.add("backbone.cls_token", init.tensor(&[1, 1, d], rng)?, true)?;
        let pos = store.add("backbone.pos_embed", init.tensor(&[1, gh * gw + 1, d], rng)?, true)?;
        Ok(TokenEmbed { patch, cls, pos })
    }

    /// `[N, C, H, W] -> [N, 1 + T, d]` with the class token first.
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let p = self.patch.forward(ctx, images)?;
        let s = ctx.graph.shape(p).to_vec();
        let (n, d, t) = (s[0], s[1], s[2] * s[3]);
        let p = ctx.graph.reshape(p, &[n, d, t])?;
        let tokens = ctx.graph.permute(p, &[0, 2, 1])?;
        let cls = ctx.param(self.cls);
        let zeros = ctx.graph.constant(&[n, 1, d], vec![T::zero(); n * d])?;
        let cls = ctx.graph.add(zeros, cls)?;
        let seq = ctx.graph.concat(&[cls, tokens], 1)?;
        let pos = ctx.param(self.pos);
        ctx.graph.add(seq, pos)
    }
}

#[derive(Clone, Debug)]
struct Vit {
    embed: TokenEmbed,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct PitPool {
    tokens: Linear,
    cls: Linear,
}

#[derive(Clone, Debug)]
struct Pit {
    embed: TokenEmbed,
    stages: Vec<Vec<EncoderBlock>>,
    pools: Vec<PitPool>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
enum Arch {
    ResNet(ResNet),
    Vit(Vit),
    Pit(Pit),
}

/// A backbone's layer layout; parameters live in the caller's [`ParamStore`]
/// under the `backbone.` prefix.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    arch: Arch,
    output_dim: usize,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl Backbone {
    pub fn build<T: Scalar>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let arch = match config.family {
            Family::ResnetSmall => {
                let widths = config.stage_widths();
                let c_in = config.input_size[0];
                let stem = Conv2d::new(
                    store,
                    "backbone.stem.conv",
                    c_in,
                    widths[0],
                    3,
                    1,
                    1,
                    false,
                    Init::KaimingUniform { fan_in: c_in * 9 },
                    rng,
                )?;
                let stem_bn = BatchNorm::new(store, "backbone.stem.bn", widths[0])?;
                let mut blocks = Vec::new();
                let mut prev = widths[0];
                for (s, &w) in widths.iter().enumerate() {
                    for b in 0..config.depth {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        blocks.push(ResidualBlock::new(store, &format!("backbone.layer{s}.{b}"), prev, w, stride, rng)?);
                        prev = w;
                    }
                }
                Arch::ResNet(ResNet { stem, stem_bn, blocks })
            }
            Family::VitTiny => {
                let embed = TokenEmbed::new(store, config, rng)?;
                let blocks = (0..config.depth)
                    .map(|i| EncoderBlock::new(store, &format!("backbone.blocks.{i}"), config.embed_dim, config.heads, config.mlp_ratio, rng))
                    .collect::<Result<_>>()?;
                let norm = LayerNorm::new(store, "backbone.norm", config.embed_dim)?;
                Arch::Vit(Vit { embed, blocks, norm })
            }
            Family::PitTiny => {
                let embed = TokenEmbed::new(store, config, rng)?;
                let mut stages = Vec::new();
                let mut pools = Vec::new();
                let mut dim = config.embed_dim;
                for s in 0..=PIT_POOLING_STAGES {
                    let blocks = (0..config.depth)
                        .map(|i| EncoderBlock::new(store, &format!("backbone.stage{s}.{i}"), dim, config.heads, config.mlp_ratio, rng))
                        .collect::<Result<_>>()?;
                    stages.push(blocks);
                    if s < PIT_POOLING_STAGES {
                        let init = Init::TruncNormal { std: 0.02 };
                        pools.push(PitPool {
                            tokens: Linear::new(store, &format!("backbone.pool{s}.tokens"), dim, 2 * dim, true, init, rng)?,
                            cls: Linear::new(store, &format!("backbone.pool{s}.cls"), dim, 2 * dim, true, init, rng)?,
                        });
                        dim *= 2;
                    }
                }
                let norm = LayerNorm::new(store, "backbone.norm", dim)?;
                Arch::Pit(Pit {
                    embed,
                    stages,
                    pools,
                    norm,
                })
            }
        };
        Ok(Backbone {
            output_dim: config.output_dim(),
            config: config.clone(),
            arch,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let shape = ctx.graph.shape(images);
        if shape.len() != 4 || shape[1..] != self.config.input_size {
            return Err(Error::shape(
                "backbone",
                format!("images {shape:?} do not match input size {:?}", self.config.input_size),
            ));
        }
        match &self.arch {
            Arch::ResNet(net) => {
                let x = net.stem.forward(ctx, images)?;
                let x = net.stem_bn.forward(ctx, x)?;
                let mut x = ctx.graph.relu(x);
                for block in &net.blocks {
                    x = block.forward(ctx, x)?;
                }
                pool2d(ctx.graph, x, Pool::GlobalAvg)
            }
            Arch::Vit(net) => {
                let mut x = net.embed.forward(ctx, images)?;
                for block in &net.blocks {
                    x = block.forward(ctx, x)?;
                }
                let x = net.norm.forward(ctx, x)?;
                self.readout(ctx.graph, x)
            }
            Arch::Pit(net) => {
                let mut x = net.embed.forward(ctx, images)?;
                let (mut gh, mut gw) = self.config.token_grid();
                for (s, blocks) in net.stages.iter().enumerate() {
                    for block in blocks {
                        x = block.forward(ctx, x)?;
                    }
                    if let Some(pool) = net.pools.get(s) {
                        x = pit_pool(ctx, pool, x, gh, gw)?;
                        gh /= 2;
                        gw /= 2;
                    }
                }
                let x = net.norm.forward(ctx, x)?;
                self.readout(ctx.graph, x)
            }
        }
    }

    fn readout<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, t, d) = (s[0], s[1], s[2]);
        match self.config.pooling {
            TokenPooling::ClassToken => {
                let cls = g.slice(x, 1, 0, 1)?;
                g.reshape(cls, &[n, d])
            }
            TokenPooling::Mean => {
                let tokens = g.slice(x, 1, 1, t - 1)?;
                let ones = g.constant(&[n, 1, t - 1], vec![T::lit(1.0 / (t - 1) as f64); n * (t - 1)])?;
                let m = g.bmm(ones, tokens, false)?;
                g.reshape(m, &[n, d])
            }
        }
    }

    /// Trainable scalars under the backbone prefix.
    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store
            .trainable_ids()
            .filter(|&id| store.name(id).starts_with(BACKBONE_PREFIX))
            .map(|id| store.get(id).numel())
            .sum()
    }
}

/// `[N, 1 + gh*gw, d] -> [N, 1 + gh*gw/4, 2d]`.
fn pit_pool<T: Scalar>(ctx: &mut Ctx<'_, T>, pool: &PitPool, x: Var, gh: usize, gw: usize) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let cls = ctx.graph.slice(x, 1, 0, 1)?;
    let tokens = ctx.graph.slice(x, 1, 1, t - 1)?;
    let grid = ctx.graph.permute(tokens, &[0, 2, 1])?;
    let grid = ctx.graph.reshape(grid, &[n, d, gh, gw])?;
    let pooled = pool2d(ctx.graph, grid, Pool::Avg { k: 2, stride: 2 })?;
    let t2 = (gh / 2) * (gw / 2);
    let pooled = ctx.graph.reshape(pooled, &[n, d, t2])?;
    let pooled = ctx.graph.permute(pooled, &[0, 2, 1])?;
    let pooled = pool.tokens.forward(ctx, pooled)?;
    let cls = pool.cls.forward(ctx, cls)?;
    ctx.graph.concat(&[cls, pooled], 1)
}

/// Fresh backbone with its own parameter store, initialized from `seed`.
pub fn build_backbone<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<(Backbone, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let model = Backbone::build(config, &mut store, &mut rng)?;
    Ok((model, store))
}

/// Convenience forward on a detached tensor batch.
pub fn embed<T: Scalar>(model: &Backbone, store: &mut ParamStore<T>, images: &Tensor<T>, mode: crate::nn::Mode) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, mode);
    let x = ctx.graph.input(images);
    let y = model.forward(&mut ctx, x)?;
    Ok(g.tensor(y))
}
