//! Small building blocks shared by the branches.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::model::params::Bound;
use crate::tensor::Tensor;

/// `x . weight + bias` on the last axis; the bias is optional in the store.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias")).ok();
    g.linear(x, w, b)
}

pub fn conv(g: &mut Graph, p: &Bound, prefix: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    g.conv3d(x, w, Some(b), spec)
}

pub fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.gain"))?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, 1e-5)
}

pub fn spatial(g: &Graph, x: Var) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(g.shape(x)).map_err(|_| Error::dim("feature map", format!("expected 5-D, got {:?}", g.shape(x))))
}

/// `[B, C, D, H, W] -> [B, D*H*W, C]`, voxels in z-major order.
pub fn to_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let [b, c, d, h, w] = spatial(g, x)?;
    let t = g.permute(x, &[0, 2, 3, 4, 1])?;
    g.reshape(t, &[b, d * h * w, c])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(g: &mut Graph, t: Var, grid: [usize; 3]) -> Result<Var> {
    let s = g.shape(t).to_vec();
    if s.len() != 3 || s[1] != grid.iter().product::<usize>() {
        return Err(Error::dim("from_tokens", format!("{s:?} onto grid {grid:?}")));
    }
    let x = g.reshape(t, &[s[0], grid[0], grid[1], grid[2], s[2]])?;
    g.permute(x, &[0, 4, 1, 2, 3])
}

/// Multi-head attention over `[B, T, C]` with separate query and key/value sources.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    let (b, tq, c) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    if heads == 1 {
        return g.batched_attention(q, k, v);
    }
    let dh = c / heads;
    let split = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, t, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, t, dh])
    };
    let (qh, kh, vh) = (split(g, q, tq)?, split(g, k, tk)?, split(g, v, tk)?);
    let o = g.batched_attention(qh, kh, vh)?;
    let o = g.reshape(o, &[b, heads, tq, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, tq, c])
}

/// Channel-wise affine modulation `gamma * s + beta` with `gamma, beta: [B, C]`.
pub fn film(g: &mut Graph, s: Var, gamma: Var, beta: Var) -> Result<Var> {
    let [b, c, ..] = spatial(g, s)?;
    for v in [gamma, beta] {
        if g.shape(v) != [b, c] {
            return Err(Error::dim("film", format!("modulation {:?} for features [{b}, {c}, ..]", g.shape(v))));
        }
    }
    let gm = g.reshape(gamma, &[b, c, 1, 1, 1])?;
    let bt = g.reshape(beta, &[b, c, 1, 1, 1])?;
    let y = g.mul(s, gm)?;
    g.add(y, bt)
}

/// Sinusoidal depth bias `sin(2 pi (c + 1) / C * rho * z / S)` as a `[Z, C]` table.
pub fn positional_bias(channels: usize, depths: usize, rho: f64, scale: f64) -> Tensor {
    Tensor::from_fn(&[depths, channels], |i| {
        let (z, c) = (i / channels, i % channels);
        (2.0 * std::f64::consts::PI * (c + 1) as f64 / channels as f64 * rho * z as f64 / scale).sin()
    })
}
