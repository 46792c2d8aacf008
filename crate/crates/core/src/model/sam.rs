//! Volumetric transformer encoder with low-rank adapters and importance routing.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{conv, linear, multi_head, norm, positional_bias, spatial, to_tokens};
use crate::model::params::{Bound, Init, SpecBuilder};

pub fn specs(cfg: &ModelConfig, sb: &mut SpecBuilder) {
    let s = &cfg.sam;
    let c = s.embed_dim;
    sb.add("stem.fuse_lambda", &[1], Init::Const(s.early_fusion_init));
    sb.conv("stem.fuse_proj", cfg.mamba.stage_channels[0], cfg.in_channels, 1, 1);
    sb.conv("sam.patch_embed", cfg.in_channels, c, s.patch, 1);
    for i in 0..s.depth {
        let pre = format!("sam.block{i}");
        sb.norm(&format!("{pre}.norm1"), c);
        for proj in ["q", "k", "v", "out"] {
            sb.linear(&format!("{pre}.attn.{proj}"), c, c, s.init_std, true);
        }
        for proj in ["q", "v"] {
            sb.add(format!("{pre}.attn.{proj}.lora_A"), &[c, s.lora_rank], Init::Normal((1.0 / c as f64).sqrt()));
            sb.add(format!("{pre}.attn.{proj}.lora_B"), &[s.lora_rank, c], Init::Zeros);
        }
        sb.norm(&format!("{pre}.norm2"), c);
        sb.linear(&format!("{pre}.mlp.fc1"), c, s.mlp_ratio * c, s.init_std, true);
        sb.linear(&format!("{pre}.mlp.fc2"), s.mlp_ratio * c, c, s.init_std, true);
    }
}

/// `X' = X + |lambda| * Proj(Up(s0))`.
pub fn early_fuse(g: &mut Graph, p: &Bound, x: Var, s0: Var) -> Result<Var> {
    let [_, _, d, h, w] = spatial(g, x)?;
    let up = g.resize_trilinear(s0, [d, h, w])?;
    let proj = conv(g, p, "stem.fuse_proj", up, ConvSpec::new(1, 0))?;
    let lambda = p.var("stem.fuse_lambda")?;
    let lambda = g.abs(lambda);
    let delta = g.mul(proj, lambda)?;
    g.add(x, delta)
}

/// Kernel-4, stride-4 embedding to `[B, C, D/4, H/4, W/4]`.
pub fn embed_patches(g: &mut Graph, p: &Bound, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let [.., d, h, w] = spatial(g, x)?;
    let k = cfg.sam.patch;
    if [d, h, w].iter().any(|&e| e % k != 0) {
        return Err(Error::contract(
            "embed_patches",
            format!("extents {:?} not divisible by {k}; pad beforehand", [d, h, w]),
        ));
    }
    conv(g, p, "sam.patch_embed", x, ConvSpec::new(k, 0))
}

/// Tokens `[B, T, C]` of a `[B, C, Z, Y, X]` grid plus the depth bias.
pub fn tokens_with_bias(g: &mut Graph, cfg: &ModelConfig, grid: Var, rho: f64) -> Result<Var> {
    let [_, c, z, y, x] = spatial(g, grid)?;
    let scale = cfg.sam.pos_scale.unwrap_or(z as f64);
    let table = positional_bias(c, z, rho, scale);
    let plane = y * x;
    let bias = crate::tensor::Tensor::from_fn(&[z * plane, c], |i| table.data()[(i / c / plane) * c + i % c]);
    let bias = g.constant(bias);
    let t = to_tokens(g, grid)?;
    g.add(t, bias)
}

/// Token indices at or above the threshold, and the rest, both ascending.
pub fn route_tokens(importance: &[f64], tau: f64) -> (Vec<usize>, Vec<usize>) {
    (0..importance.len()).partition(|&i| importance[i] >= tau)
}

/// Options that alter one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockOptions {
    pub lora: bool,
    pub tau: f64,
}

/// Projection with its low-rank residual `W_B . Dropout(W_A . x) * alpha / r`.
fn adapted(g: &mut Graph, p: &Bound, cfg: &ModelConfig, prefix: &str, x: Var, lora: bool) -> Result<Var> {
    let base = linear(g, p, prefix, x)?;
    if !lora {
        return Ok(base);
    }
    let delta = lora_delta(g, p, cfg, prefix, x)?;
    g.add(base, delta)
}

pub fn lora_delta(g: &mut Graph, p: &Bound, cfg: &ModelConfig, prefix: &str, x: Var) -> Result<Var> {
    let a = p.var(&format!("{prefix}.lora_A"))?;
    let b = p.var(&format!("{prefix}.lora_B"))?;
    let h = g.linear(x, a, None)?;
    let h = g.dropout(h, cfg.sam.lora_dropout)?;
    let h = g.linear(h, b, None)?;
    Ok(g.scale(h, cfg.sam.lora_scale()))
}

/// Routing summary of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Routing {
    pub full: usize,
    pub light: usize,
}

/// One transformer block on `[B, T, C]` tokens.
///
/// Tokens with importance at least `tau` get attention among themselves, its
/// residual scaled by their importance; every token gets the feed-forward path.
pub fn block(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    i: usize,
    x: Var,
    importance: Var,
    opts: BlockOptions,
) -> Result<(Var, Routing)> {
    let [b, t, c] = <[usize; 3]>::try_from(g.shape(x)).map_err(|_| Error::dim("sam block", "expected [B, T, C]"))?;
    if g.shape(importance) != [b, t] {
        return Err(Error::dim("sam block", format!("importance {:?} for {b}x{t} tokens", g.shape(importance))));
    }
    let pre = format!("sam.block{i}");
    let h = norm(g, p, &format!("{pre}.norm1"), x)?;
    let rows = g.reshape(h, &[b * t, c])?;
    let m_rows = g.reshape(importance, &[b * t, 1])?;
    let mut routing = Routing { full: 0, light: 0 };
    let mut acc: Option<Var> = None;
    for bi in 0..b {
        let m = g.value(importance).data()[bi * t..(bi + 1) * t].to_vec();
        let (full, light) = route_tokens(&m, opts.tau);
        routing.full += full.len();
        routing.light += light.len();
        if full.is_empty() {
            continue;
        }
        let idx: Vec<usize> = full.iter().map(|&k| bi * t + k).collect();
        let sel = g.gather_rows(rows, &idx)?;
        let q = adapted(g, p, cfg, &format!("{pre}.attn.q"), sel, opts.lora)?;
        let k = linear(g, p, &format!("{pre}.attn.k"), sel)?;
        let v = adapted(g, p, cfg, &format!("{pre}.attn.v"), sel, opts.lora)?;
        let f = idx.len();
        let q = g.reshape(q, &[1, f, c])?;
        let k = g.reshape(k, &[1, f, c])?;
        let v = g.reshape(v, &[1, f, c])?;
        let o = multi_head(g, q, k, v, cfg.sam.heads)?;
        let o = g.reshape(o, &[f, c])?;
        let o = linear(g, p, &format!("{pre}.attn.out"), o)?;
        let w = g.gather_rows(m_rows, &idx)?;
        let o = g.mul(o, w)?;
        let o = g.scatter_rows(o, &idx, b * t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, o)?,
            None => o,
        });
    }
    let mut x = x;
    if let Some(a) = acc {
        let a = g.reshape(a, &[b, t, c])?;
        x = g.add(x, a)?;
    }
    let h = norm(g, p, &format!("{pre}.norm2"), x)?;
    let h = linear(g, p, &format!("{pre}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{pre}.mlp.fc2"), h)?;
    Ok((g.add(x, h)?, routing))
}

/// Brings the importance map to the token grid and flattens it to `[B, T]`.
///
/// A coarser map is upsampled by nearest neighbor, a finer one average pooled.
pub fn importance_tokens(g: &mut Graph, m: Var, grid: [usize; 3]) -> Result<Var> {
    let [b, _, d, h, w] = spatial(g, m)?;
    let resized = if [d, h, w] == grid {
        m
    } else if d > grid[0] && d % grid[0] == 0 && h / grid[1] == d / grid[0] && w / grid[2] == d / grid[0] {
        g.avg_pool3d(m, d / grid[0])?
    } else {
        g.resize_nearest(m, grid)?
    };
    g.reshape(resized, &[b, grid.iter().product()])
}
