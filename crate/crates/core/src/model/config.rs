//! Network hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Kernel and stride of the token embedding.
    pub patch: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub shallow_depths: Vec<usize>,
    pub deep_depths: Vec<usize>,
    /// Tokens whose pooled importance is at least this go through attention.
    pub route_threshold: f64,
    pub early_fusion_init: f64,
    /// Positional-bias scale; `None` uses the token-grid depth.
    pub pos_scale: Option<f64>,
    pub init_std: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            patch: 4,
            mlp_ratio: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            shallow_depths: vec![0, 1],
            deep_depths: vec![2, 3],
            route_threshold: 0.5,
            early_fusion_init: 0.001,
            pos_scale: None,
            init_std: 0.02,
        }
    }
}

impl SamConfig {
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaConfig {
    pub stage_channels: [usize; 4],
    pub state_dim: usize,
    pub blocks_per_stage: [usize; 4],
    pub expand: usize,
    pub conv_kernel: usize,
    /// Length of the global descriptor; `None` uses the last stage width.
    pub descriptor_dim: Option<usize>,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            state_dim: 4,
            blocks_per_stage: [1; 4],
            expand: 2,
            conv_kernel: 4,
            descriptor_dim: None,
        }
    }
}

impl MambaConfig {
    pub fn descriptor(&self) -> usize {
        self.descriptor_dim.unwrap_or(self.stage_channels[3])
    }

    /// Rank of the step-size projection for a block of width `c`.
    pub fn dt_rank(c: usize) -> usize {
        c.div_ceil(16)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub se_reduction: usize,
    pub sam: SamConfig,
    pub mamba: MambaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on a CPU.
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            classes: 3,
            se_reduction: 4,
            sam: SamConfig::default(),
            mamba: MambaConfig::default(),
        }
    }

    /// ViT-B sized encoder with the wide state-space branch.
    pub fn paper() -> Self {
        Self {
            in_channels: 1,
            classes: 3,
            se_reduction: 4,
            sam: SamConfig {
                embed_dim: 768,
                depth: 12,
                heads: 12,
                shallow_depths: vec![2, 5],
                deep_depths: vec![8, 11],
                ..SamConfig::default()
            },
            mamba: MambaConfig {
                stage_channels: [48, 96, 192, 384],
                state_dim: 16,
                blocks_per_stage: [2; 4],
                descriptor_dim: Some(384),
                ..MambaConfig::default()
            },
        }
    }

    /// Required divisor of every input extent.
    pub fn size_multiple(&self) -> usize {
        16.max(self.sam.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sam;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_channels == 0 || self.classes < 2 {
            return bad("need at least one input channel and two classes");
        }
        if s.heads == 0 || s.embed_dim % s.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if s.lora_rank == 0 || s.lora_rank >= s.embed_dim {
            return bad("lora_rank must satisfy 0 < r < embed_dim");
        }
        if s.patch != 4 {
            return bad("token embedding stride must be 4 (tokens share the second state-space scale)");
        }
        if s.deep_depths.is_empty() {
            return bad("at least one deep interaction depth is required");
        }
        let all = s.shallow_depths.iter().chain(&s.deep_depths);
        if all.clone().any(|&d| d >= s.depth) {
            return bad("interaction depths must be below the encoder depth");
        }
        if s.shallow_depths.iter().any(|d| s.deep_depths.contains(d)) {
            return bad("shallow and deep depth sets must be disjoint");
        }
        let mut sorted: Vec<usize> = all.copied().collect();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("interaction depths must not repeat");
        }
        if !(0.0..1.0).contains(&s.lora_dropout) || !(0.0..=1.0).contains(&s.route_threshold) {
            return bad("lora_dropout must lie in [0, 1) and route_threshold in [0, 1]");
        }
        if s.pos_scale.is_some_and(|v| v <= 0.0) {
            return bad("pos_scale must be positive");
        }
        let m = &self.mamba;
        if m.stage_channels.contains(&0) || m.state_dim == 0 || m.expand == 0 || m.conv_kernel == 0 {
            return bad("state-space widths must be positive");
        }
        if self.se_reduction == 0 || s.embed_dim / self.se_reduction == 0 {
            return bad("se_reduction too large for embed_dim");
        }
        Ok(())
    }
}
