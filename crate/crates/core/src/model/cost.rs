//! Closed-form multiply-accumulate counts of one forward pass.
//!
//! Only products inside convolutions, projections, attention and the scan are
//! counted. Every token is assumed to take the attention path, so the
//! transformer terms are an upper bound.

use serde::Serialize;

use crate::model::config::{MambaConfig, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacEstimate {
    pub state_space: u64,
    pub transformer: u64,
    pub bridges: u64,
    pub decoder: u64,
}

impl MacEstimate {
    pub fn total(&self) -> u64 {
        self.state_space + self.transformer + self.bridges + self.decoder
    }
}

fn attention(t: u64, c: u64) -> u64 {
    // Scores and the weighted sum.
    2 * t * t * c
}

/// MACs for one cubic patch of extent `patch` and batch size 1.
pub fn forward_macs(cfg: &ModelConfig, patch: usize) -> MacEstimate {
    let u = |x: usize| x as u64;
    let p3 = u(patch).pow(3);
    let cin = u(cfg.in_channels);
    let ch = cfg.mamba.stage_channels.map(u);
    let m = &cfg.mamba;
    let s = &cfg.sam;
    let c = u(s.embed_dim);
    let grid = |level: u32| (u(patch) >> level).pow(3);
    let t = grid(2);
    let d = u(m.descriptor());

    let mut ss = p3 * ch[0] * cin * 27;
    for i in 0..4 {
        let prev = if i == 0 { ch[0] } else { ch[i - 1] };
        let ti = grid(i as u32 + 1);
        ss += ti * ch[i] * prev * 8;
        let e = u(m.expand) * ch[i];
        let r = u(MambaConfig::dt_rank(m.stage_channels[i]));
        let n = u(m.state_dim);
        let block = ti * (ch[i] * 2 * e + e * u(m.conv_kernel) + e * (r + 2 * n) + r * e + 2 * e * n + e * ch[i]);
        ss += u(m.blocks_per_stage[i]) * block;
    }
    ss += ch[3] * d + d * d + grid(3) * ch[2];
    ss += d * d + d * u(s.shallow_depths.len());
    ss += ch.iter().map(|&cj| d * d + d * 2 * cj).sum::<u64>();

    let mut tr = p3 * ch[0] * cin + t * c * cin * u(s.patch).pow(3);
    let lora = 2 * (t * c * u(s.lora_rank) * 2);
    tr += u(s.depth) * (4 * t * c * c + lora + attention(t, c) + 2 * t * c * u(s.mlp_ratio) * c);

    let mut br = 0;
    for _ in &s.shallow_depths {
        br += t * ch[1] * c + t * c * 27 + t * c * c + c * c + 2 * c * 2;
    }
    let red = c / u(cfg.se_reduction);
    for (n, _) in s.deep_depths.iter().enumerate() {
        let ctx = if n == 0 { ch[1] } else { c };
        br += t * c * ch[1];
        br += 4 * t * c * c + attention(t, c);
        br += t * ch[1] * c + 2 * c * red;
        br += t * ctx * c + 4 * t * c * c + attention(t, c);
    }

    let mut de = 0;
    for j in 0..4 {
        let cat = if j == 3 { 2 * ch[3] } else { ch[j + 1] + 2 * ch[j] };
        de += t * c * ch[j] + grid(j as u32 + 1) * ch[j] * cat * 27;
    }
    de += p3 * ch[0] * 2 * ch[0] * 27 + p3 * ch[0] * ch[0] * 27;
    de += p3 * ch[0] * ch[0] * 27 + p3 * u(cfg.classes) * ch[0];

    MacEstimate {
        state_space: ss,
        transformer: tr,
        bridges: br,
        decoder: de,
    }
}
