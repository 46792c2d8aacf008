//! The dual-encoder segmentation network.
//!
//! Parameters live in a [`ParamStore`] under dotted names such as
//! `sam.block0.attn.q.lora_A`, `mamba.stage1.block0.in_proj.weight`,
//! `bridge.deep2.reverse_gate`, `fusion.stage3.logits` or `decoder.head.out.weight`.
//! Every forward pass binds the store onto a fresh [`Graph`].

pub mod config;
pub mod cost;
pub mod decoder;
pub mod fusion;
pub mod layers;
pub mod mamba;
pub mod params;
pub mod sam;

pub use config::{MambaConfig, ModelConfig, SamConfig};
pub use cost::{forward_macs, MacEstimate};
pub use params::{Bound, Init, ParamSpec, ParamStore};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::layers::{from_tokens, spatial, to_tokens};
use crate::model::params::SpecBuilder;
use crate::tensor::Tensor;

/// Every parameter of `cfg`, in initialization order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut sb = SpecBuilder::default();
    mamba::specs(cfg, &mut sb);
    sam::specs(cfg, &mut sb);
    fusion::specs(cfg, &mut sb);
    decoder::specs(cfg, &mut sb);
    sb.specs
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Parameter counts grouped by the first name component, in first-seen order.
pub fn param_groups(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for s in param_specs(cfg) {
        let head = s.name.split('.').next().unwrap_or_default().to_string();
        match out.iter_mut().find(|(h, _)| *h == head) {
            Some(e) => e.1 += s.numel(),
            None => out.push((head, s.numel())),
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Lets deep SAM tokens flow back into the state-space features.
    pub reverse: bool,
    /// Adds the low-rank residuals to the adapted projections.
    pub lora: bool,
    /// Overrides the configured routing threshold.
    pub tau: Option<f64>,
    /// Voxel anisotropy `dz / dx` used by the positional bias.
    pub anisotropy: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            reverse: true,
            lora: true,
            tau: None,
            anisotropy: 1.0,
        }
    }
}

/// Handles to the interesting intermediate values of one forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// `[B, 1, D/8, H/8, W/8]`.
    pub importance: Var,
    /// `[B, d]`.
    pub descriptor: Var,
    pub inject_strength: Var,
    pub film: Vec<(Var, Var)>,
    /// Token states `[B, T, C]` after every block.
    pub blocks: Vec<Var>,
    /// Fused tokens of the last deep stage.
    pub fused: Var,
    /// Softmax fusion weights per deep stage.
    pub fusion_weights: Vec<Var>,
    /// Shallow gate weights `[B, 2]` per shallow stage.
    pub gate_weights: Vec<Var>,
    /// State-space features after the reverse pathway.
    pub scales: [Var; 4],
    pub routing: Vec<sam::Routing>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&param_specs(&config), seed)?;
        Ok(Self { config, params })
    }

    /// Binds every parameter as trainable.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g, |_| true)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, opts: ForwardOptions) -> Result<ForwardOutput> {
        forward(g, p, &self.config, x, opts)
    }

    /// Softmax probabilities `[B, K, D, H, W]` of an input tensor, evaluated without gradients.
    pub fn predict(&self, x: &Tensor, opts: ForwardOptions, seed: u64) -> Result<Tensor> {
        let mut g = Graph::new(crate::autodiff::Mode::Eval, seed);
        let p = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, opts)?;
        let probs = g.softmax(out.logits, 1)?;
        Ok(g.value(probs).clone())
    }
}

pub fn forward(g: &mut Graph, p: &Bound, cfg: &ModelConfig, x: Var, opts: ForwardOptions) -> Result<ForwardOutput> {
    let [b, _, d, h, w] = spatial(g, x)?;
    let m = cfg.size_multiple();
    if [d, h, w].iter().any(|&e| e % m != 0) {
        return Err(Error::contract("forward", format!("extents {:?} must be multiples of {m}", [d, h, w])));
    }
    let pyr = mamba::encode(g, p, cfg, x)?;
    let [s0, mut s1, s2, s3] = pyr.scales;
    let descriptor = mamba::global_descriptor(g, p, s3)?;
    let importance = mamba::importance_map(g, p, s2)?;
    let cond = mamba::conditioning(g, p, cfg, descriptor)?;

    let xf = sam::early_fuse(g, p, x, s0)?;
    let grid_map = sam::embed_patches(g, p, cfg, xf)?;
    let grid = {
        let s = spatial(g, grid_map)?;
        [s[2], s[3], s[4]]
    };
    let mut tokens = sam::tokens_with_bias(g, cfg, grid_map, opts.anisotropy)?;
    let imp_tokens = sam::importance_tokens(g, importance, grid)?;
    let block_opts = sam::BlockOptions {
        lora: opts.lora,
        tau: opts.tau.unwrap_or(cfg.sam.route_threshold),
    };

    let mut blocks = Vec::with_capacity(cfg.sam.depth);
    let mut routing = Vec::with_capacity(cfg.sam.depth);
    let mut fusion_weights = Vec::new();
    let mut gate_weights = Vec::new();
    let mut ctx: Option<Var> = None;
    let mut fused: Option<Var> = None;
    for i in 0..cfg.sam.depth {
        let (t, r) = sam::block(g, p, cfg, i, tokens, imp_tokens, block_opts)?;
        tokens = t;
        routing.push(r);
        if let Some(k) = cfg.sam.shallow_depths.iter().position(|&k| k == i) {
            let strength = g.narrow(cond.inject, 1, k, 1)?;
            let (t, wts) = fusion::shallow_inject(g, p, i, tokens, s1, strength)?;
            tokens = t;
            gate_weights.push(wts);
        }
        if cfg.sam.deep_depths.contains(&i) {
            if opts.reverse {
                s1 = fusion::deep_exchange(g, p, i, tokens, s1)?;
            }
            let fm = to_tokens(g, s1)?;
            let c = ctx.unwrap_or(fm);
            let (f, wts) = fusion::cross_scale_fuse(g, p, cfg, i, tokens, fm, c)?;
            ctx = Some(f);
            fused = Some(f);
            fusion_weights.push(wts);
        }
        blocks.push(tokens);
    }
    let fused = fused.expect("validated: at least one deep depth");
    let fused_grid = from_tokens(g, fused, grid)?;
    let scales = [s0, s1, s2, s3];
    let logits = decoder::decode(g, p, &scales, fused_grid, &cond, pyr.stem)?;
    debug_assert_eq!(g.shape(logits), [b, cfg.classes, d, h, w]);
    Ok(ForwardOutput {
        logits,
        importance,
        descriptor,
        inject_strength: cond.inject,
        film: cond.film,
        blocks,
        fused,
        fusion_weights,
        gate_weights,
        scales,
        routing,
    })
}
