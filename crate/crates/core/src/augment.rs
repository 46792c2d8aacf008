//! Random flips, axial rotations, brightness scaling and noise for training patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{index, LabelVolume, Volume};

pub const FLIP_P: f64 = 0.5;
pub const NOISE_P: f64 = 0.3;
pub const NOISE_STD: f64 = 0.02;
pub const BRIGHTNESS: (f64, f64) = (0.9, 1.1);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Per-axis flip probability.
    pub flip_p: f64,
    pub noise_p: f64,
    pub noise_std: f64,
    /// Brightness factor range, inclusive.
    pub brightness: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_p: FLIP_P,
            noise_p: NOISE_P,
            noise_std: NOISE_STD,
            brightness: [BRIGHTNESS.0, BRIGHTNESS.1],
        }
    }
}

/// One realization of every stochastic choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Flip along z, y, x.
    pub flip: [bool; 3],
    /// Quarter turns in the axial (y, x) plane.
    pub quarter_turns: u8,
    pub brightness: f64,
    /// Seed of the additive noise field, when noise is applied.
    pub noise_seed: Option<u64>,
    pub noise_std: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            flip: [false; 3],
            quarter_turns: 0,
            brightness: 1.0,
            noise_seed: None,
            noise_std: NOISE_STD,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::sample_with(rng, &AugmentConfig::default())
    }

    pub fn sample_with<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let flip = [rng.gen_bool(cfg.flip_p), rng.gen_bool(cfg.flip_p), rng.gen_bool(cfg.flip_p)];
        let quarter_turns = rng.gen_range(0..4u8);
        let brightness = rng.gen_range(cfg.brightness[0]..=cfg.brightness[1]);
        let noise = rng.gen_bool(cfg.noise_p);
        let seed = rng.gen::<u64>();
        Self {
            flip,
            quarter_turns,
            brightness,
            noise_seed: noise.then_some(seed),
            noise_std: cfg.noise_std,
        }
    }
}

/// Source voxel for each destination voxel under the geometric part of `draw`.
fn source_map(dims: [usize; 3], draw: &AugmentDraw) -> ([usize; 3], Vec<usize>) {
    let turns = draw.quarter_turns % 4;
    let out_dims = if turns % 2 == 1 {
        [dims[0], dims[2], dims[1]]
    } else {
        dims
    };
    let mut map = Vec::with_capacity(dims.iter().product());
    for z in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[2] {
                // Undo the rotation first, then the flips.
                let (sy, sx) = match turns {
                    0 => (y, x),
                    1 => (x, out_dims[1] - 1 - y),
                    2 => (out_dims[1] - 1 - y, out_dims[2] - 1 - x),
                    _ => (out_dims[2] - 1 - x, y),
                };
                let sz = if draw.flip[0] { dims[0] - 1 - z } else { z };
                let sy = if draw.flip[1] { dims[1] - 1 - sy } else { sy };
                let sx = if draw.flip[2] { dims[2] - 1 - sx } else { sx };
                map.push(index(dims, sz, sy, sx));
            }
        }
    }
    (out_dims, map)
}

/// Applies `draw`: geometry to both patch and mask, intensity changes to the patch only.
pub fn apply(patch: &Volume, mask: &LabelVolume, draw: &AugmentDraw) -> (Volume, LabelVolume) {
    assert_eq!(patch.dims, mask.dims, "patch and mask dims differ");
    let (dims, map) = source_map(patch.dims, draw);
    let mut data: Vec<f64> = map.iter().map(|&i| patch.data[i] * draw.brightness).collect();
    if let Some(seed) = draw.noise_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, draw.noise_std).expect("valid noise std");
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    let labels = map.iter().map(|&i| mask.labels[i]).collect();
    let mut spacing = patch.spacing;
    if dims != patch.dims {
        spacing.swap(1, 2);
    }
    (
        Volume { dims, spacing, data },
        LabelVolume {
            dims,
            labels,
            class_names: mask.class_names.clone(),
        },
    )
}

/// Draws and applies a random augmentation.
pub fn augment<R: Rng + ?Sized>(patch: &Volume, mask: &LabelVolume, rng: &mut R) -> (Volume, LabelVolume) {
    let draw = AugmentDraw::sample(rng);
    apply(patch, mask, &draw)
}

pub fn augment_with<R: Rng + ?Sized>(patch: &Volume, mask: &LabelVolume, cfg: &AugmentConfig, rng: &mut R) -> (Volume, LabelVolume) {
    apply(patch, mask, &AugmentDraw::sample_with(rng, cfg))
}
