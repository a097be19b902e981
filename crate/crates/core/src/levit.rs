//! Hybrid convolution/attention network for family assignment.
//!
//! A stride-2 convolutional stem turns the image into a grid of tokens. Each
//! stage runs residual attention blocks over that grid; between stages a
//! shrink block attends from a stride-2 subsample of the queries, halving the
//! grid side and widening the embedding. Tokens are carried as a
//! `(N·L, D)` matrix so batch norm and the linear layers apply per token.

use levitmc_tensor::{Graph, Real, Var};
use serde::{Deserialize, Serialize};

use crate::bin2img::IMAGE_SIDE;
use crate::error::{Error, Result};
use crate::model::{Architecture, Bound, Ctx, Forward, Init, Mode, ModelGraph, ParamStore, HEAD};

pub const ARCH_TAG: &str = "levit-toy/v1";
pub const NUM_FAMILIES: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeViTConfig {
    /// Output width of each stride-2 stem convolution.
    pub stem_channels: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub key_dim: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attn_bias: bool,
    /// Pool tokens with a learned query instead of a plain mean.
    pub attn_pool: bool,
    pub input_size: usize,
    pub input_downsample: usize,
}

impl Default for LeViTConfig {
    fn default() -> Self {
        Self {
            stem_channels: vec![8, 16, 32],
            stage_dims: vec![32, 48, 64],
            stage_depths: vec![2, 2, 2],
            heads: vec![2, 3, 4],
            key_dim: 8,
            mlp_ratio: 2,
            num_classes: NUM_FAMILIES,
            attn_bias: true,
            attn_pool: false,
            input_size: IMAGE_SIDE,
            input_downsample: 1,
        }
    }
}

impl LeViTConfig {
    /// Small preset that trains in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            stem_channels: vec![8, 16],
            stage_dims: vec![16, 24],
            stage_depths: vec![1, 1],
            heads: vec![2, 2],
            key_dim: 8,
            input_downsample: 4,
            ..Self::default()
        }
    }

    /// 32×32-input variant used by gradient checks.
    pub fn reduced() -> Self {
        Self {
            stem_channels: vec![4, 8],
            stage_dims: vec![8, 12],
            stage_depths: vec![1, 1],
            heads: vec![2, 2],
            key_dim: 4,
            input_size: 32,
            ..Self::default()
        }
    }

    /// Grid side entering each stage.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut side = self.input_size / self.input_downsample.max(1);
        for _ in &self.stem_channels {
            side = side.div_ceil(2);
        }
        let mut sides = Vec::with_capacity(self.stage_dims.len());
        for s in 0..self.stage_dims.len() {
            if s > 0 {
                side = side.div_ceil(2);
            }
            sides.push(side);
        }
        sides
    }

    /// Token count processed by each stage.
    pub fn token_schedule(&self) -> Vec<usize> {
        self.stage_sides().iter().map(|s| s * s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("levit: {m}")));
        let n = self.stage_dims.len();
        if n == 0 || self.stage_depths.len() != n || self.heads.len() != n {
            return bad(format!(
                "stage_dims, stage_depths and heads must have one equal non-zero length, got {}, {}, {}",
                n,
                self.stage_depths.len(),
                self.heads.len()
            ));
        }
        if self.stem_channels.is_empty() {
            return bad("stem_channels is empty".into());
        }
        let lists = [&self.stem_channels, &self.stage_dims, &self.stage_depths, &self.heads];
        if lists.iter().any(|l| l.contains(&0)) || self.key_dim == 0 || self.mlp_ratio == 0 {
            return bad("all widths, depths and head counts must be positive".into());
        }
        if self.stem_channels.last() != self.stage_dims.first() {
            return bad(format!(
                "last stem width {:?} must equal the first stage width {}",
                self.stem_channels.last(),
                self.stage_dims[0]
            ));
        }
        if self.num_classes != NUM_FAMILIES {
            return bad(format!("num_classes must be {NUM_FAMILIES}, got {}", self.num_classes));
        }
        if self.input_downsample == 0 || self.input_size % self.input_downsample != 0 {
            return bad(format!(
                "input_downsample {} must divide input_size {}",
                self.input_downsample, self.input_size
            ));
        }
        if self.input_size / self.input_downsample == 0 {
            return bad("input is empty".into());
        }
        Ok(())
    }
}

/// Table index of every (query, key) pair.
///
/// Query `(r, c)` sits at key-grid position `(r·stride, c·stride)`; pairs with
/// the same signed offset share an entry of the `(2·k_side − 1)²` table.
pub fn bias_indices(q_side: usize, q_stride: usize, k_side: usize) -> Vec<usize> {
    let span = 2 * k_side - 1;
    let reach = k_side as isize - 1;
    let mut idx = Vec::with_capacity(q_side * q_side * k_side * k_side);
    for qr in 0..q_side {
        for qc in 0..q_side {
            let (pr, pc) = ((qr * q_stride) as isize, (qc * q_stride) as isize);
            for kr in 0..k_side as isize {
                for kc in 0..k_side as isize {
                    let dr = (pr - kr + reach) as usize;
                    let dc = (pc - kc + reach) as usize;
                    idx.push(dr * span + dc);
                }
            }
        }
    }
    idx
}

fn subsample_indices(k_side: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    for r in (0..k_side).step_by(2) {
        for c in (0..k_side).step_by(2) {
            idx.push(r * k_side + c);
        }
    }
    idx
}

#[derive(Clone, Copy, Debug)]
struct AttnSpec {
    heads: usize,
    key_dim: usize,
    dim_in: usize,
    dim_out: usize,
    k_side: usize,
    q_stride: usize,
    bias: bool,
}

impl AttnSpec {
    fn q_side(&self) -> usize {
        if self.q_stride == 1 {
            self.k_side
        } else {
            self.k_side.div_ceil(2)
        }
    }

    fn value_dim(&self) -> usize {
        2 * self.key_dim
    }
}

fn init_attention(init: &mut Init, store: &mut ParamStore, prefix: &str, s: &AttnSpec) -> Result<()> {
    let qk = s.heads * s.key_dim;
    init.bn(store, &format!("{prefix}.norm"), s.dim_in)?;
    init.linear(store, &format!("{prefix}.q"), s.dim_in, qk)?;
    init.linear(store, &format!("{prefix}.k"), s.dim_in, qk)?;
    init.linear(store, &format!("{prefix}.v"), s.dim_in, s.heads * s.value_dim())?;
    if s.bias {
        let span = 2 * s.k_side - 1;
        init.tensor(store, &format!("{prefix}.bias_table"), &[s.heads, span * span], 0.0)?;
    }
    init.linear(store, &format!("{prefix}.proj"), s.heads * s.value_dim(), s.dim_out)
}

fn init_mlp(init: &mut Init, store: &mut ParamStore, prefix: &str, dim: usize, ratio: usize) -> Result<()> {
    init.bn(store, &format!("{prefix}.norm"), dim)?;
    init.linear(store, &format!("{prefix}.fc1"), dim, dim * ratio)?;
    init.linear(store, &format!("{prefix}.fc2"), dim * ratio, dim)
}

fn specs(config: &LeViTConfig) -> Vec<(String, usize, AttnSpec)> {
    let sides = config.stage_sides();
    let mut out = Vec::new();
    for s in 0..config.stage_dims.len() {
        if s > 0 {
            out.push((
                format!("shrink{s}"),
                s,
                AttnSpec {
                    heads: config.heads[s],
                    key_dim: config.key_dim,
                    dim_in: config.stage_dims[s - 1],
                    dim_out: config.stage_dims[s],
                    k_side: sides[s - 1],
                    q_stride: 2,
                    bias: config.attn_bias,
                },
            ));
        }
        for b in 0..config.stage_depths[s] {
            out.push((
                format!("stage{s}.block{b}"),
                s,
                AttnSpec {
                    heads: config.heads[s],
                    key_dim: config.key_dim,
                    dim_in: config.stage_dims[s],
                    dim_out: config.stage_dims[s],
                    k_side: sides[s],
                    q_stride: 1,
                    bias: config.attn_bias,
                },
            ));
        }
    }
    out
}

pub fn build_levit(config: &LeViTConfig, seed: u64) -> Result<ModelGraph> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let mut c = 3;
    for (i, &out) in config.stem_channels.iter().enumerate() {
        init.conv(&mut store, &format!("stem{i}.conv"), out, c, 3)?;
        init.bn(&mut store, &format!("stem{i}.bn"), out)?;
        c = out;
    }
    for (prefix, _, spec) in specs(config) {
        init_attention(&mut init, &mut store, &format!("{prefix}.attn"), &spec)?;
        init_mlp(&mut init, &mut store, &format!("{prefix}.mlp"), spec.dim_out, config.mlp_ratio)?;
    }
    let d = *config.stage_dims.last().expect("validated");
    if config.attn_pool {
        init.tensor(&mut store, "pool.query", &[1, 1, 1, d], 0.0)?;
    }
    init.bn(&mut store, "head_norm", d)?;
    init.linear(&mut store, HEAD, d, config.num_classes)?;
    Ok(ModelGraph {
        arch: Architecture::LeViT(config.clone()),
        params: store,
    })
}

/// `(N·L, H·d) → (N, H, L, d)`.
fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, n: usize, l: usize, h: usize, d: usize) -> Result<Var> {
    let x = g.reshape(x, &[n, l, h, d])?;
    Ok(g.permute(x, &[0, 2, 1, 3])?)
}

/// Multi-head attention from `x` (`(N·Lk, dim_in)`) to `(N·Lq, dim_out)`.
fn attend<T: Real>(cx: &mut Ctx<'_, T>, x: Var, n: usize, prefix: &str, s: &AttnSpec) -> Result<Var> {
    let (lk, q_side) = (s.k_side * s.k_side, s.q_side());
    let lq = q_side * q_side;
    let xn = cx.bn(x, &format!("{prefix}.norm"))?;
    let q_in = if s.q_stride == 1 {
        xn
    } else {
        let t = cx.g.reshape(xn, &[n, lk, s.dim_in])?;
        let t = cx.g.index_select(t, &subsample_indices(s.k_side))?;
        cx.g.reshape(t, &[n * lq, s.dim_in])?
    };
    let q = cx.linear(q_in, &format!("{prefix}.q"))?;
    let k = cx.linear(xn, &format!("{prefix}.k"))?;
    let v = cx.linear(xn, &format!("{prefix}.v"))?;
    let q = split_heads(cx.g, q, n, lq, s.heads, s.key_dim)?;
    let k = split_heads(cx.g, k, n, lk, s.heads, s.key_dim)?;
    let v = split_heads(cx.g, v, n, lk, s.heads, s.value_dim())?;
    let bias = if s.bias {
        let table = cx.p(&format!("{prefix}.bias_table"))?;
        let span = 2 * s.k_side - 1;
        let t = cx.g.reshape(table, &[s.heads, span * span, 1])?;
        let t = cx.g.index_select(t, &bias_indices(q_side, s.q_stride, s.k_side))?;
        Some(cx.g.reshape(t, &[s.heads, lq, lk])?)
    } else {
        None
    };
    let o = cx.g.attention(q, k, v, bias)?;
    let o = cx.g.permute(o, &[0, 2, 1, 3])?;
    let o = cx.g.reshape(o, &[n * lq, s.heads * s.value_dim()])?;
    let o = cx.g.hardswish(o)?;
    cx.linear(o, &format!("{prefix}.proj"))
}

fn mlp<T: Real>(cx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = cx.bn(x, &format!("{prefix}.norm"))?;
    let h = cx.linear(h, &format!("{prefix}.fc1"))?;
    let h = cx.g.hardswish(h)?;
    let h = cx.linear(h, &format!("{prefix}.fc2"))?;
    Ok(cx.g.add(x, h)?)
}

fn block<T: Real>(cx: &mut Ctx<'_, T>, x: Var, n: usize, prefix: &str, s: &AttnSpec) -> Result<Var> {
    let a = attend(cx, x, n, &format!("{prefix}.attn"), s)?;
    let x = if s.q_stride == 1 { cx.g.add(x, a)? } else { a };
    mlp(cx, x, &format!("{prefix}.mlp"))
}

/// One residual attention block plus residual MLP on `(N, L, D)` tokens,
/// using the parameters stored under `prefix` (for example `stage0.block0`).
pub fn attention_block_forward<T: Real>(
    model: &ModelGraph,
    g: &mut Graph<T>,
    bound: &Bound<T>,
    prefix: &str,
    tokens: Var,
    mode: Mode,
) -> Result<Var> {
    let Architecture::LeViT(config) = &model.arch else {
        return Err(Error::Config("attention blocks belong to levit models".into()));
    };
    let [n, l, d] = match *g.value(tokens).shape() {
        [n, l, d] => [n, l, d],
        ref s => return Err(Error::Shape(format!("tokens must be (N, L, D), got {s:?}"))),
    };
    let side = (l as f64).sqrt().round() as usize;
    if side * side != l {
        return Err(Error::Shape(format!("{l} tokens do not form a square grid")));
    }
    let stage: usize = prefix
        .strip_prefix("stage")
        .and_then(|r| r.split('.').next())
        .and_then(|s| s.parse().ok())
        .filter(|&s| s < config.stage_dims.len())
        .ok_or_else(|| Error::Config(format!("{prefix} does not name a stage block")))?;
    if d != config.stage_dims[stage] {
        return Err(Error::Shape(format!(
            "stage {stage} expects width {}, got {d}",
            config.stage_dims[stage]
        )));
    }
    let spec = AttnSpec {
        heads: config.heads[stage],
        key_dim: config.key_dim,
        dim_in: d,
        dim_out: d,
        k_side: side,
        q_stride: 1,
        bias: config.attn_bias,
    };
    if spec.bias && side != config.stage_sides()[stage] {
        return Err(Error::Shape(format!(
            "bias table of stage {stage} covers a {0}×{0} grid, got {side}×{side}",
            config.stage_sides()[stage]
        )));
    }
    let mut cx = Ctx::new(g, bound, mode);
    let flat = cx.g.reshape(tokens, &[n * l, d])?;
    let out = block(&mut cx, flat, n, prefix, &spec)?;
    Ok(cx.g.reshape(out, &[n, l, d])?)
}

pub(crate) fn forward<T: Real>(
    config: &LeViTConfig,
    g: &mut Graph<T>,
    bound: &Bound<T>,
    input: Var,
    mode: Mode,
) -> Result<Forward> {
    let mut cx = Ctx::new(g, bound, mode);
    let n = cx.check_input(input, config.input_size)?;
    let mut x = input;
    if config.input_downsample > 1 {
        x = cx.g.avgpool2d(x, config.input_downsample, config.input_downsample)?;
    }
    for i in 0..config.stem_channels.len() {
        x = cx.conv(x, &format!("stem{i}.conv"), 2, 1)?;
        x = cx.bn(x, &format!("stem{i}.bn"))?;
        x = cx.g.hardswish(x)?;
    }
    let sides = config.stage_sides();
    let d0 = config.stage_dims[0];
    let x = cx.g.permute(x, &[0, 2, 3, 1])?;
    let mut tokens = cx.g.reshape(x, &[n * sides[0] * sides[0], d0])?;
    let mut stage_tokens = Vec::with_capacity(sides.len());
    for (prefix, stage, spec) in specs(config) {
        tokens = block(&mut cx, tokens, n, &prefix, &spec)?;
        if stage_tokens.len() == stage {
            stage_tokens.push(cx.g.value(tokens).shape()[0] / n);
        }
    }
    let (l, d) = (sides[sides.len() - 1].pow(2), *config.stage_dims.last().expect("validated"));
    let pooled = if config.attn_pool {
        let keys = cx.g.reshape(tokens, &[n, 1, l, d])?;
        let q = cx.p("pool.query")?;
        let q = cx.g.repeat_batch(q, n)?;
        let p = cx.g.attention(q, keys, keys, None)?;
        cx.g.reshape(p, &[n, d])?
    } else {
        let t = cx.g.reshape(tokens, &[n, l, d, 1])?;
        let t = cx.g.permute(t, &[0, 2, 1, 3])?;
        cx.g.global_avgpool(t)?
    };
    let pooled = cx.bn(pooled, "head_norm")?;
    let logits = cx.linear(pooled, HEAD)?;
    cx.finish(logits, stage_tokens)
}
