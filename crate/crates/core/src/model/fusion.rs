//! Bridges between the two encoders and cross-scale fusion.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::layers::{conv, from_tokens, linear, multi_head, spatial, to_tokens};
use crate::model::params::{Bound, Init, SpecBuilder};

pub fn specs(cfg: &ModelConfig, sb: &mut SpecBuilder) {
    let c = cfg.sam.embed_dim;
    let c1 = cfg.mamba.stage_channels[1];
    let lin = |n: usize| (1.0 / n as f64).sqrt();
    for &k in &cfg.sam.shallow_depths {
        let pre = format!("bridge.shallow{k}");
        sb.conv(&format!("{pre}.proj"), c1, c, 1, 1);
        sb.conv(&format!("{pre}.local_dw"), c, c, 3, c);
        sb.conv(&format!("{pre}.local_pw"), c, c, 1, 1);
        sb.linear(&format!("{pre}.global"), c, c, lin(c), true);
        sb.linear(&format!("{pre}.gate"), 2 * c, 2, lin(2 * c), true);
    }
    for (n, &k) in cfg.sam.deep_depths.iter().enumerate() {
        sb.linear(&format!("bridge.deep{k}.reverse_proj"), c, c1, lin(c), true);
        sb.add(format!("bridge.deep{k}.reverse_gate"), &[1], Init::Zeros);
        let pre = format!("fusion.stage{k}");
        sb.add(format!("{pre}.logits"), &[3], Init::Zeros);
        for proj in ["q", "k", "v", "out"] {
            sb.linear(&format!("{pre}.attn.{proj}"), c, c, lin(c), true);
            sb.linear(&format!("{pre}.ca.{proj}"), c, c, lin(c), true);
        }
        sb.linear(&format!("{pre}.mamba_proj"), c1, c, lin(c1), true);
        let r = c / cfg.se_reduction;
        sb.linear(&format!("{pre}.se.fc1"), c, r, lin(c), true);
        sb.linear(&format!("{pre}.se.fc2"), r, c, lin(r), true);
        let ctx = if n == 0 { c1 } else { c };
        sb.linear(&format!("{pre}.ctx_proj"), ctx, c, lin(ctx), true);
    }
}

/// Gated local/global injection of state-space features into `[B, T, C]` tokens.
///
/// Returns the updated tokens and the gate weights `[B, 2]`.
pub fn shallow_inject(
    g: &mut Graph,
    p: &Bound,
    k: usize,
    tokens: Var,
    s1: Var,
    strength: Var,
) -> Result<(Var, Var)> {
    let pre = format!("bridge.shallow{k}");
    let b = spatial(g, s1)?[0];
    let c = g.shape(tokens)[2];
    let fm = conv(g, p, &format!("{pre}.proj"), s1, ConvSpec::new(1, 0))?;
    let local = conv(g, p, &format!("{pre}.local_dw"), fm, ConvSpec::depthwise(3, c))?;
    let local = g.gelu(local);
    let local = conv(g, p, &format!("{pre}.local_pw"), local, ConvSpec::new(1, 0))?;
    let pooled = g.global_avg_pool(fm)?;
    let global = linear(g, p, &format!("{pre}.global"), pooled)?;
    let local_pooled = g.global_avg_pool(local)?;
    let both = g.concat(&[local_pooled, global], 1)?;
    let logits = linear(g, p, &format!("{pre}.gate"), both)?;
    let weights = g.softmax(logits, 1)?;
    let inj = combine(g, local, global, weights)?;
    let inj = to_tokens(g, inj)?;
    let s = g.reshape(strength, &[b, 1, 1])?;
    let inj = g.mul(inj, s)?;
    Ok((g.add(tokens, inj)?, weights))
}

/// `w_l * local + w_g * global` with `global: [B, C]` broadcast over space.
pub fn combine(g: &mut Graph, local: Var, global: Var, weights: Var) -> Result<Var> {
    let [b, c, ..] = spatial(g, local)?;
    let wl = g.narrow(weights, 1, 0, 1)?;
    let wl = g.reshape(wl, &[b, 1, 1, 1, 1])?;
    let wg = g.narrow(weights, 1, 1, 1)?;
    let wg = g.reshape(wg, &[b, 1, 1, 1, 1])?;
    let gl = g.reshape(global, &[b, c, 1, 1, 1])?;
    let a = g.mul(local, wl)?;
    let bterm = g.mul(gl, wg)?;
    g.add(a, bterm)
}

/// `s1 + gate * Proj(tokens)` on the token grid.
pub fn deep_exchange(g: &mut Graph, p: &Bound, k: usize, tokens: Var, s1: Var) -> Result<Var> {
    let [.., d, h, w] = spatial(g, s1)?;
    let proj = linear(g, p, &format!("bridge.deep{k}.reverse_proj"), tokens)?;
    let proj = from_tokens(g, proj, [d, h, w])?;
    let gate = p.var(&format!("bridge.deep{k}.reverse_gate"))?;
    let delta = g.mul(proj, gate)?;
    g.add(s1, delta)
}

/// `alpha * Attn(F_sam) + beta * SE(Proj(F_mamba)) + gamma * CA(Proj(F_ctx))` on `[B, T, C]`.
///
/// Returns the fused tokens and the three normalized weights.
pub fn cross_scale_fuse(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    k: usize,
    sam: Var,
    mamba: Var,
    ctx: Var,
) -> Result<(Var, Var)> {
    let pre = format!("fusion.stage{k}");
    let q = linear(g, p, &format!("{pre}.attn.q"), sam)?;
    let kk = linear(g, p, &format!("{pre}.attn.k"), sam)?;
    let v = linear(g, p, &format!("{pre}.attn.v"), sam)?;
    let attn = multi_head(g, q, kk, v, cfg.sam.heads)?;
    let attn = linear(g, p, &format!("{pre}.attn.out"), attn)?;

    let pm = linear(g, p, &format!("{pre}.mamba_proj"), mamba)?;
    let squeeze = g.mean_axes(pm, &[1], false)?;
    let e = linear(g, p, &format!("{pre}.se.fc1"), squeeze)?;
    let e = g.gelu(e);
    let e = linear(g, p, &format!("{pre}.se.fc2"), e)?;
    let e = g.sigmoid(e);
    let b = g.shape(e)[0];
    let c = g.shape(e)[1];
    let e = g.reshape(e, &[b, 1, c])?;
    let se = g.mul(pm, e)?;

    let pc = linear(g, p, &format!("{pre}.ctx_proj"), ctx)?;
    let q = linear(g, p, &format!("{pre}.ca.q"), sam)?;
    let kk = linear(g, p, &format!("{pre}.ca.k"), pc)?;
    let v = linear(g, p, &format!("{pre}.ca.v"), pc)?;
    let ca = multi_head(g, q, kk, v, 1)?;
    let ca = linear(g, p, &format!("{pre}.ca.out"), ca)?;

    let logits = p.var(&format!("{pre}.logits"))?;
    let w = g.softmax(logits, 0)?;
    let mut out: Option<Var> = None;
    for (i, term) in [attn, se, ca].into_iter().enumerate() {
        let wi = g.narrow(w, 0, i, 1)?;
        let t = g.mul(term, wi)?;
        out = Some(match out {
            Some(o) => g.add(o, t)?,
            None => t,
        });
    }
    Ok((out.expect("three terms"), w))
}
