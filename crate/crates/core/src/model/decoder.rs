//! FiLM-conditioned coarse-to-fine decoder, stem refinement and output head.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::layers::{conv, film, spatial};
use crate::model::mamba::Conditioning;
use crate::model::params::{Bound, Init, SpecBuilder};

pub fn specs(cfg: &ModelConfig, sb: &mut SpecBuilder) {
    let ch = cfg.mamba.stage_channels;
    let c = cfg.sam.embed_dim;
    for j in (0..4).rev() {
        sb.conv(&format!("decoder.stage{j}.fuse_proj"), c, ch[j], 1, 1);
        let cin = if j == 3 { 2 * ch[3] } else { ch[j + 1] + 2 * ch[j] };
        sb.conv(&format!("decoder.stage{j}.refine"), cin, ch[j], 3, 1);
    }
    sb.conv("decoder.stem_refine.conv1", 2 * ch[0], ch[0], 3, 1);
    sb.conv("decoder.stem_refine.conv2", ch[0], ch[0], 3, 1);
    sb.add("decoder.stem_lambda", &[1], Init::Zeros);
    sb.conv("decoder.head.conv", ch[0], ch[0], 3, 1);
    sb.conv("decoder.head.out", ch[0], cfg.classes, 1, 1);
}

/// `x + lambda * Refine(concat(x, F_stem))`, with `F_stem` resampled to `x`.
pub fn stem_refine(g: &mut Graph, p: &Bound, x: Var, stem: Var) -> Result<Var> {
    let [.., d, h, w] = spatial(g, x)?;
    let stem = if spatial(g, stem)?[2..] == [d, h, w] {
        stem
    } else {
        g.resize_trilinear(stem, [d, h, w])?
    };
    let cat = g.concat(&[x, stem], 1)?;
    let r = conv(g, p, "decoder.stem_refine.conv1", cat, ConvSpec::same(3))?;
    let r = g.gelu(r);
    let r = conv(g, p, "decoder.stem_refine.conv2", r, ConvSpec::same(3))?;
    let lambda = p.var("decoder.stem_lambda")?;
    let r = g.mul(r, lambda)?;
    g.add(x, r)
}

/// Logits `[B, K, D, H, W]` from the pyramid, the fused tokens on their grid and the stem feature.
pub fn decode(g: &mut Graph, p: &Bound, scales: &[Var; 4], fused: Var, cond: &Conditioning, stem: Var) -> Result<Var> {
    let mut x: Option<Var> = None;
    for j in (0..4).rev() {
        let [.., d, h, w] = spatial(g, scales[j])?;
        let (gamma, beta) = cond.film[j];
        let skip = film(g, scales[j], gamma, beta)?;
        let f = conv(g, p, &format!("decoder.stage{j}.fuse_proj"), fused, ConvSpec::new(1, 0))?;
        let f = if spatial(g, f)?[2..] == [d, h, w] {
            f
        } else {
            g.resize_trilinear(f, [d, h, w])?
        };
        let cat = match x {
            Some(prev) => g.concat(&[prev, skip, f], 1)?,
            None => g.concat(&[skip, f], 1)?,
        };
        let r = conv(g, p, &format!("decoder.stage{j}.refine"), cat, ConvSpec::same(3))?;
        let r = g.gelu(r);
        x = Some(g.upsample_trilinear(r, 2)?);
    }
    let x = stem_refine(g, p, x.expect("four stages"), stem)?;
    let h = conv(g, p, "decoder.head.conv", x, ConvSpec::same(3))?;
    let h = g.gelu(h);
    conv(g, p, "decoder.head.out", h, ConvSpec::new(1, 0))
}
