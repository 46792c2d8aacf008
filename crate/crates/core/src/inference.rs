//! Full-volume segmentation by overlapping tiles and Gaussian-weighted stitching.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::patches::grid_origins;
use crate::preprocess::{preprocess, NlmParams, ReferenceStats};
use crate::tensor::Tensor;
use crate::train::trainer::argmax_labels;
use crate::volume::{LabelVolume, Volume};

/// Floor applied to every window weight.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub dims: [usize; 3],
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

/// `round(patch * (1 - overlap))`, at least 1.
pub fn stride_for(patch: usize, overlap: f64) -> usize {
    ((patch as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Tile origins at stride multiples plus one flush with the far edge of each axis.
pub fn plan_tiles(dims: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<TilePlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = [stride_for(patch[0], overlap), stride_for(patch[1], overlap), stride_for(patch[2], overlap)];
    let origins = grid_origins(dims, patch, stride)?;
    Ok(TilePlan {
        dims,
        patch,
        stride,
        origins,
    })
}

/// Separable Gaussian weights over a patch, centered at `(p - 1) / 2` per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightWindow {
    pub patch: [usize; 3],
    pub sigma: [f64; 3],
    pub weights: Vec<f64>,
}

pub fn gaussian_window(patch: [usize; 3], sigma: [f64; 3]) -> Result<WeightWindow> {
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("window sigma must be positive, got {sigma:?}")));
    }
    let axis = |a: usize| -> Vec<f64> {
        let c = (patch[a] as f64 - 1.0) / 2.0;
        (0..patch[a]).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma[a] * sigma[a])).exp()).collect()
    };
    let (wz, wy, wx) = (axis(0), axis(1), axis(2));
    let mut weights = Vec::with_capacity(patch.iter().product());
    for z in &wz {
        for y in &wy {
            for x in &wx {
                weights.push((z * y * x).max(WEIGHT_FLOOR));
            }
        }
    }
    Ok(WeightWindow { patch, sigma, weights })
}

/// Default window: `sigma = patch / 8` per axis.
pub fn default_window(patch: [usize; 3]) -> Result<WeightWindow> {
    gaussian_window(patch, [patch[0] as f64 / 8.0, patch[1] as f64 / 8.0, patch[2] as f64 / 8.0])
}

/// Per-tile class probabilities `[K, pd, ph, pw]` at an origin.
#[derive(Clone, Debug)]
pub struct TileProbs {
    pub origin: [usize; 3],
    pub probs: Tensor,
}

/// `sum_i G_i P_i / sum_i G_i`, accumulated in ascending origin order.
///
/// Returns class-major probabilities `[K, D, H, W]`.
pub fn stitch(tiles: &[TileProbs], plan: &TilePlan, window: &WeightWindow) -> Result<Tensor> {
    let k = tiles.first().ok_or_else(|| Error::contract("stitch", "no tiles"))?.probs.shape()[0];
    let [d, h, w] = plan.dims;
    let [pd, ph, pw] = plan.patch;
    if window.patch != plan.patch {
        return Err(Error::dim("stitch", format!("window {:?} vs patch {:?}", window.patch, plan.patch)));
    }
    let n = d * h * w;
    let mut num = vec![0.0; k * n];
    let mut den = vec![0.0; n];
    let mut cover = vec![0u32; n];
    let mut order: Vec<&TileProbs> = tiles.iter().collect();
    order.sort_by_key(|t| t.origin);
    for t in order {
        if t.probs.shape() != [k, pd, ph, pw] {
            return Err(Error::dim("stitch", format!("tile {:?} has shape {:?}", t.origin, t.probs.shape())));
        }
        let [oz, oy, ox] = t.origin;
        if oz + pd > d || oy + ph > h || ox + pw > w {
            return Err(Error::contract("stitch", format!("tile {:?} exceeds {:?}", t.origin, plan.dims)));
        }
        let pn = pd * ph * pw;
        let pr = t.probs.data();
        for z in 0..pd {
            for y in 0..ph {
                for x in 0..pw {
                    let local = (z * ph + y) * pw + x;
                    let global = ((oz + z) * h + oy + y) * w + ox + x;
                    let wt = window.weights[local];
                    den[global] += wt;
                    cover[global] += 1;
                    for c in 0..k {
                        num[c * n + global] += wt * pr[c * pn + local];
                    }
                }
            }
        }
    }
    if let Some(v) = den.iter().position(|&s| s == 0.0) {
        return Err(Error::contract("stitch", format!("voxel {v} is not covered by any tile")));
    }
    for c in 0..k {
        for (v, s) in den.iter().enumerate() {
            num[c * n + v] /= s;
        }
    }
    // A voxel seen by one tile takes that tile's probabilities verbatim; w*p/w can be off by an ulp.
    for t in tiles {
        let [oz, oy, ox] = t.origin;
        let pn = pd * ph * pw;
        for z in 0..pd {
            for y in 0..ph {
                for x in 0..pw {
                    let global = ((oz + z) * h + oy + y) * w + ox + x;
                    if cover[global] == 1 {
                        let local = (z * ph + y) * pw + x;
                        for c in 0..k {
                            num[c * n + global] = t.probs.data()[c * pn + local];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[k, d, h, w], num)
}

/// How a volume is prepared and tiled.
#[derive(Clone, Debug)]
pub struct SegmentOptions {
    pub patch: usize,
    pub overlap: f64,
    pub nlm: Option<NlmParams>,
    /// Tiles per forward pass.
    pub batch: usize,
    /// Window sigma as a fraction of the patch extent.
    pub sigma_fraction: f64,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            patch: 32,
            overlap: 0.7,
            nlm: Some(NlmParams::default()),
            batch: 1,
            sigma_fraction: 0.125,
        }
    }
}

/// Segmentation result with the stitched probabilities.
pub struct Segmentation {
    pub labels: LabelVolume,
    /// `[K, D, H, W]`.
    pub probs: Tensor,
}

/// Preprocesses, predicts every tile in eval mode, stitches and takes the voxelwise argmax.
pub fn segment_volume(
    model: &Model,
    v: &Volume,
    stats: Option<&ReferenceStats>,
    opts: &SegmentOptions,
    class_names: &[String],
) -> Result<Segmentation> {
    if class_names.len() != model.config.classes {
        return Err(Error::Config(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.config.classes
        )));
    }
    let m = model.config.size_multiple();
    if opts.patch % m != 0 || opts.batch == 0 {
        return Err(Error::Config(format!("patch {} must be a multiple of {m}", opts.patch)));
    }
    let prepared = match stats {
        Some(s) => preprocess(v, s, opts.nlm.as_ref())?,
        None => v.clone(),
    };
    let patch = [opts.patch; 3];
    let plan = plan_tiles(v.dims, patch, opts.overlap)?;
    let window = gaussian_window(patch, [opts.patch as f64 * opts.sigma_fraction; 3])?;
    let fwd = ForwardOptions {
        anisotropy: v.anisotropy(),
        ..ForwardOptions::default()
    };
    let k = model.config.classes;
    let pn = opts.patch.pow(3);
    let tiles: Vec<TileProbs> = plan
        .origins
        .par_chunks(opts.batch)
        .map(|chunk| -> Result<Vec<TileProbs>> {
            let mut data = Vec::with_capacity(chunk.len() * pn);
            for &o in chunk {
                data.extend_from_slice(&prepared.crop(o, patch).data);
            }
            let x = Tensor::new(&[chunk.len(), 1, patch[0], patch[1], patch[2]], data)?;
            let probs = model.predict(&x, fwd, 0)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, &origin)| TileProbs {
                    origin,
                    probs: Tensor::new(&[k, patch[0], patch[1], patch[2]], probs.data()[i * k * pn..(i + 1) * k * pn].to_vec())
                        .expect("tile slice"),
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let probs = stitch(&tiles, &plan, &window)?;
    let [d, h, w] = v.dims;
    let batched = probs.clone().reshape(&[1, k, d, h, w])?;
    let labels = argmax_labels(&batched, class_names)?.remove(0);
    Ok(Segmentation { labels, probs })
}
