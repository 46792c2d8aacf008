//! Hierarchical state-space encoder.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::{MambaConfig, ModelConfig};
use crate::model::layers::{conv, from_tokens, linear, norm, spatial, to_tokens};
use crate::model::params::{Bound, Init, SpecBuilder};

pub fn specs(cfg: &ModelConfig, sb: &mut SpecBuilder) {
    let m = &cfg.mamba;
    let ch = m.stage_channels;
    sb.conv("mamba.stem", cfg.in_channels, ch[0], 3, 1);
    for i in 0..4 {
        let prev = if i == 0 { ch[0] } else { ch[i - 1] };
        sb.conv(&format!("mamba.stage{i}.down"), prev, ch[i], 2, 1);
        for j in 0..m.blocks_per_stage[i] {
            block_specs(m, &format!("mamba.stage{i}.block{j}"), ch[i], sb);
        }
    }
    let d = m.descriptor();
    sb.linear("mamba.descriptor.fc1", ch[3], d, (1.0 / ch[3] as f64).sqrt(), true);
    sb.linear("mamba.descriptor.fc2", d, d, (1.0 / d as f64).sqrt(), true);
    sb.add("mamba.importance.weight", &[1, ch[2], 1, 1, 1], Init::Normal((1.0 / ch[2] as f64).sqrt()));
    // Starts every token on the attention path.
    sb.add("mamba.importance.bias", &[1], Init::Const(1.0));
    let n_inject = cfg.sam.shallow_depths.len();
    sb.linear("cond.inject.fc1", d, d, (1.0 / d as f64).sqrt(), true);
    sb.linear("cond.inject.fc2", d, n_inject, (1.0 / d as f64).sqrt(), true);
    for (j, &c) in ch.iter().enumerate() {
        sb.linear(&format!("cond.film{j}.fc1"), d, d, (1.0 / d as f64).sqrt(), true);
        sb.add(format!("cond.film{j}.fc2.weight"), &[d, 2 * c], Init::Zeros);
        sb.add(format!("cond.film{j}.fc2.bias"), &[2 * c], Init::FilmBias);
    }
}

fn block_specs(m: &MambaConfig, prefix: &str, c: usize, sb: &mut SpecBuilder) {
    let e = m.expand * c;
    let r = MambaConfig::dt_rank(c);
    let n = m.state_dim;
    sb.norm(&format!("{prefix}.norm"), c);
    sb.add(format!("{prefix}.in_proj.weight"), &[c, 2 * e], Init::Normal((1.0 / c as f64).sqrt()));
    sb.add(format!("{prefix}.conv1d.weight"), &[e, m.conv_kernel], Init::Normal((1.0 / m.conv_kernel as f64).sqrt()));
    sb.add(format!("{prefix}.conv1d.bias"), &[e], Init::Zeros);
    sb.add(format!("{prefix}.x_proj.weight"), &[e, r + 2 * n], Init::Normal((1.0 / e as f64).sqrt()));
    sb.add(format!("{prefix}.dt_proj.weight"), &[r, e], Init::Normal((1.0 / r as f64).sqrt()));
    sb.add(format!("{prefix}.dt_proj.bias"), &[e], Init::StepBias(1e-3, 1e-1));
    sb.add(format!("{prefix}.a_log"), &[e, n], Init::LogRange);
    sb.add(format!("{prefix}.d"), &[e], Init::Const(1.0));
    sb.add(format!("{prefix}.out_proj.weight"), &[e, c], Init::Normal((1.0 / e as f64).sqrt()));
}

/// One residual state-space block on `[B, T, C]` tokens.
pub fn block(g: &mut Graph, p: &Bound, m: &MambaConfig, prefix: &str, x: Var) -> Result<Var> {
    let [b, t, c] = <[usize; 3]>::try_from(g.shape(x)).map_err(|_| Error::dim("mamba block", "expected [B, T, C]"))?;
    let e = m.expand * c;
    let r = MambaConfig::dt_rank(c);
    let n = m.state_dim;
    let h = norm(g, p, &format!("{prefix}.norm"), x)?;
    let xz = linear(g, p, &format!("{prefix}.in_proj"), h)?;
    let u = g.narrow(xz, 2, 0, e)?;
    let z = g.narrow(xz, 2, e, e)?;
    let w = p.var(&format!("{prefix}.conv1d.weight"))?;
    let cb = p.var(&format!("{prefix}.conv1d.bias"))?;
    let u = g.causal_conv1d(u, w, cb)?;
    let u = g.silu(u);
    let proj = linear(g, p, &format!("{prefix}.x_proj"), u)?;
    let dt = g.narrow(proj, 2, 0, r)?;
    let bm = g.narrow(proj, 2, r, n)?;
    let cm = g.narrow(proj, 2, r + n, n)?;
    let dt = linear(g, p, &format!("{prefix}.dt_proj"), dt)?;
    let delta = g.softplus(dt);
    let a_log = p.var(&format!("{prefix}.a_log"))?;
    let a = g.exp(a_log);
    let a = g.neg(a);
    let y = g.selective_scan(u, delta, a, bm, cm)?;
    let d = p.var(&format!("{prefix}.d"))?;
    let skip = g.mul(u, d)?;
    let y = g.add(y, skip)?;
    let gate = g.silu(z);
    let y = g.mul(y, gate)?;
    let y = linear(g, p, &format!("{prefix}.out_proj"), y)?;
    debug_assert_eq!(g.shape(y), [b, t, c]);
    g.add(x, y)
}

/// Multi-scale features of the state-space branch.
pub struct Pyramid {
    /// Full-resolution stem feature.
    pub stem: Var,
    /// `s0..s3` at 1/2, 1/4, 1/8 and 1/16 of the input extent.
    pub scales: [Var; 4],
}

pub fn encode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, x: Var) -> Result<Pyramid> {
    let [_, cin, d, h, w] = spatial(g, x)?;
    if cin != cfg.in_channels || [d, h, w].iter().any(|&e| e == 0 || e % 16 != 0) {
        return Err(Error::contract(
            "encode",
            format!(
            "state-space encoder needs {} channel(s) and extents divisible by 16, got {:?}",
            cfg.in_channels,
            g.shape(x)
        ),
        ));
    }
    let stem = conv(g, p, "mamba.stem", x, ConvSpec::same(3))?;
    let stem = g.gelu(stem);
    let mut cur = stem;
    let mut scales = Vec::with_capacity(4);
    for i in 0..4 {
        cur = conv(g, p, &format!("mamba.stage{i}.down"), cur, ConvSpec::new(2, 0))?;
        let [_, _, sd, sh, sw] = spatial(g, cur)?;
        let mut t = to_tokens(g, cur)?;
        for j in 0..cfg.mamba.blocks_per_stage[i] {
            t = block(g, p, &cfg.mamba, &format!("mamba.stage{i}.block{j}"), t)?;
        }
        cur = from_tokens(g, t, [sd, sh, sw])?;
        scales.push(cur);
    }
    Ok(Pyramid {
        stem,
        scales: [scales[0], scales[1], scales[2], scales[3]],
    })
}

/// `G = MLP(GAP(s3))`, shape `[B, d]`.
pub fn global_descriptor(g: &mut Graph, p: &Bound, s3: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(s3)?;
    let hdn = linear(g, p, "mamba.descriptor.fc1", pooled)?;
    let hdn = g.gelu(hdn);
    linear(g, p, "mamba.descriptor.fc2", hdn)
}

/// `M = sigmoid(conv1x1(s2))`, shape `[B, 1, D/8, H/8, W/8]`.
pub fn importance_map(g: &mut Graph, p: &Bound, s2: Var) -> Result<Var> {
    let logits = conv(g, p, "mamba.importance", s2, ConvSpec::new(1, 0))?;
    Ok(g.sigmoid(logits))
}

/// Injection strengths and per-stage FiLM coefficients.
pub struct Conditioning {
    /// `[B, |shallow depths|]`, each in (0, 1).
    pub inject: Var,
    /// `(gamma_j, beta_j)` of shape `[B, c_j]` for `j = 0..4`.
    pub film: Vec<(Var, Var)>,
}

pub fn conditioning(g: &mut Graph, p: &Bound, cfg: &ModelConfig, desc: Var) -> Result<Conditioning> {
    let h = linear(g, p, "cond.inject.fc1", desc)?;
    let h = g.gelu(h);
    let logits = linear(g, p, "cond.inject.fc2", h)?;
    let inject = g.sigmoid(logits);
    let mut film = Vec::with_capacity(4);
    for (j, &c) in cfg.mamba.stage_channels.iter().enumerate() {
        let h = linear(g, p, &format!("cond.film{j}.fc1"), desc)?;
        let h = g.gelu(h);
        let out = linear(g, p, &format!("cond.film{j}.fc2"), h)?;
        let gamma = g.narrow(out, 1, 0, c)?;
        let beta = g.narrow(out, 1, c, c)?;
        film.push((gamma, beta));
    }
    Ok(Conditioning { inject, film })
}
