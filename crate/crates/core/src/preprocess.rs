//! Denoising, percentile alignment and standardization of grayscale volumes.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{index, Volume};

/// Standardization epsilon added to the global standard deviation.
pub const STD_EPS: f64 = 1e-8;
/// Largest number of voxels used for a percentile estimate.
pub const PERCENTILE_SAMPLE: usize = 1 << 24;

/// Non-local means parameters. `h` is in units of the volume's own standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlmParams {
    pub patch_radius: usize,
    pub search_radius: usize,
    pub h: f64,
}

impl Default for NlmParams {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            search_radius: 3,
            h: 0.1,
        }
    }
}

/// Intensity reference computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub q_low: f64,
    pub q_high: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub mean: f64,
    pub std: f64,
    /// Identifier of the training split the statistics came from.
    pub provenance: String,
}

impl ReferenceStats {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q_high > self.q_low) || !(self.std > 0.0) {
            return Err(Error::Config(format!(
                "reference stats need q_high > q_low and std > 0 (got {} {} {})",
                self.q_low, self.q_high, self.std
            )));
        }
        Ok(())
    }
}

/// Box sum of radius `r` along one axis of a `dims` block, borders excluded from the output.
fn box_sum_axis(src: &[f64], dims: [usize; 3], axis: usize, r: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] - 2 * r;
    let mut out = vec![0.0; out_dims.iter().product()];
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let n_out = out_dims[axis];
    let lanes: Vec<(usize, usize)> = {
        let mut v = Vec::new();
        let (a, b) = match axis {
            0 => (dims[1], dims[2]),
            1 => (dims[0], dims[2]),
            _ => (dims[0], dims[1]),
        };
        for i in 0..a {
            for j in 0..b {
                let (s, d) = match axis {
                    0 => (i * dims[2] + j, i * out_dims[2] + j),
                    1 => (i * dims[1] * dims[2] + j, i * out_dims[1] * out_dims[2] + j),
                    _ => ((i * dims[1] + j) * dims[2], (i * out_dims[1] + j) * out_dims[2]),
                };
                v.push((s, d));
            }
        }
        v
    };
    let out_stride = match axis {
        0 => out_dims[1] * out_dims[2],
        1 => out_dims[2],
        _ => 1,
    };
    let w = 2 * r + 1;
    for (s, d) in lanes {
        for o in 0..n_out {
            let mut acc = 0.0;
            for k in 0..w {
                acc += src[s + (o + k) * stride];
            }
            out[d + o * out_stride] = acc;
        }
    }
    (out, out_dims)
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Non-local means with Gaussian weights on mean squared patch distance.
///
/// `h` is an absolute intensity scale. Patch samples past the border are
/// clamped; search candidates are restricted to the volume. The offset
/// `(0,0,0)` contributes weight 1. The weighted mean is formed around the
/// center value, so flat regions are reproduced exactly.
pub fn nlm_denoise(v: &Volume, patch_radius: usize, search_radius: usize, h: f64) -> Result<Volume> {
    if patch_radius < 1 || search_radius < 1 || !(h > 0.0) {
        return Err(Error::Config(format!(
            "nlm needs radii >= 1 and h > 0 (patch {patch_radius}, search {search_radius}, h {h})"
        )));
    }
    let dims = v.dims;
    let r = patch_radius;
    let ext = [dims[0] + 2 * r, dims[1] + 2 * r, dims[2] + 2 * r];
    let patch_vol = ((2 * r + 1) as f64).powi(3);
    let sr = search_radius as isize;
    let offsets: Vec<[isize; 3]> = (-sr..=sr)
        .flat_map(|a| (-sr..=sr).flat_map(move |b| (-sr..=sr).map(move |c| [a, b, c])))
        .collect();

    // Offsets are visited in a fixed order so the accumulation is reproducible.
    let mut num = vec![0.0; v.len()];
    let mut den = vec![0.0; v.len()];
    let mut diff = vec![0.0; ext.iter().product()];
    for &o in &offsets {
        diff.par_chunks_mut(ext[1] * ext[2]).enumerate().for_each(|(z, plane)| {
            let z0 = z as isize - r as isize;
            for y in 0..ext[1] {
                let y0 = y as isize - r as isize;
                for x in 0..ext[2] {
                    let x0 = x as isize - r as isize;
                    let a = v.data[index(dims, clamp_index(z0, dims[0]), clamp_index(y0, dims[1]), clamp_index(x0, dims[2]))];
                    let b = v.data[index(
                        dims,
                        clamp_index(z0 + o[0], dims[0]),
                        clamp_index(y0 + o[1], dims[1]),
                        clamp_index(x0 + o[2], dims[2]),
                    )];
                    plane[y * ext[2] + x] = (a - b) * (a - b);
                }
            }
        });
        let (s, d1) = box_sum_axis(&diff, ext, 0, r);
        let (s, d2) = box_sum_axis(&s, d1, 1, r);
        let (dist, _) = box_sum_axis(&s, d2, 2, r);
        for z in 0..dims[0] {
            let nz = z as isize + o[0];
            if nz < 0 || nz >= dims[0] as isize {
                continue;
            }
            for y in 0..dims[1] {
                let ny = y as isize + o[1];
                if ny < 0 || ny >= dims[1] as isize {
                    continue;
                }
                for x in 0..dims[2] {
                    let nx = x as isize + o[2];
                    if nx < 0 || nx >= dims[2] as isize {
                        continue;
                    }
                    let i = index(dims, z, y, x);
                    let w = (-(dist[i] / patch_vol) / (h * h)).exp();
                    num[i] += w * (v.data[index(dims, nz as usize, ny as usize, nx as usize)] - v.data[i]);
                    den[i] += w;
                }
            }
        }
    }
    Ok(v.with_data(v.data.iter().zip(num.iter().zip(&den)).map(|(x, (n, d))| x + n / d).collect()))
}

/// [`nlm_denoise`] with `h` scaled by the volume's standard deviation.
pub fn nlm_relative(v: &Volume, p: &NlmParams) -> Result<Volume> {
    let (_, std) = mean_std(&v.data);
    if std == 0.0 {
        return Ok(v.clone());
    }
    nlm_denoise(v, p.patch_radius, p.search_radius, p.h * std)
}

/// Linear-interpolation percentile (`p` in [0, 100]) of an already sorted slice.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorted sample of at most [`PERCENTILE_SAMPLE`] values, drawn with a fixed seed.
pub fn percentile_sample(data: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = if data.len() <= PERCENTILE_SAMPLE {
        data.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut idx = sample(&mut rng, data.len(), PERCENTILE_SAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| data[i]).collect()
    };
    s.sort_by(f64::total_cmp);
    s
}

pub fn percentiles(data: &[f64], ps: &[f64]) -> Vec<f64> {
    let s = percentile_sample(data);
    ps.iter().map(|&p| percentile_sorted(&s, p)).collect()
}

pub fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Affine map sending the source's `p_low`/`p_high` percentiles onto the reference ones. No clipping.
pub fn percentile_align(src: &Volume, reference: &ReferenceStats) -> Result<Volume> {
    let q = percentiles(&src.data, &[reference.p_low, reference.p_high]);
    let (lo, hi) = (q[0], q[1]);
    if hi == lo {
        return Err(Error::DegenerateContrast {
            p_low: reference.p_low,
            p_high: reference.p_high,
            value: lo,
        });
    }
    let scale = (reference.q_high - reference.q_low) / (hi - lo);
    Ok(src.with_data(src.data.iter().map(|&x| reference.q_low + (x - lo) * scale).collect()))
}

/// `(I - mean) / (std + 1e-8)`.
pub fn standardize(v: &Volume, stats: &ReferenceStats) -> Volume {
    let denom = stats.std + STD_EPS;
    v.with_data(v.data.iter().map(|&x| (x - stats.mean) / denom).collect())
}

/// Reference percentiles of the pooled training volumes, then global moments of the aligned pool.
pub fn fit_reference(train: &[Volume], p_low: f64, p_high: f64, provenance: &str) -> Result<ReferenceStats> {
    if train.is_empty() {
        return Err(Error::Config("reference statistics need at least one training volume".into()));
    }
    let pooled: Vec<f64> = train.iter().flat_map(|v| v.data.iter().copied()).collect();
    let q = percentiles(&pooled, &[p_low, p_high]);
    if q[1] == q[0] {
        return Err(Error::DegenerateContrast {
            p_low,
            p_high,
            value: q[0],
        });
    }
    let mut stats = ReferenceStats {
        q_low: q[0],
        q_high: q[1],
        p_low,
        p_high,
        mean: 0.0,
        std: 1.0,
        provenance: provenance.to_string(),
    };
    let mut aligned = Vec::with_capacity(pooled.len());
    for v in train {
        aligned.extend(percentile_align(v, &stats)?.data);
    }
    let (mean, std) = mean_std(&aligned);
    if !(std > 0.0) {
        return Err(Error::Config("training split has zero variance after alignment".into()));
    }
    stats.mean = mean;
    stats.std = std;
    Ok(stats)
}

/// Optional denoising, then alignment and standardization.
pub fn preprocess(v: &Volume, stats: &ReferenceStats, nlm: Option<&NlmParams>) -> Result<Volume> {
    let denoised = match nlm {
        Some(p) => nlm_relative(v, p)?,
        None => v.clone(),
    };
    Ok(standardize(&percentile_align(&denoised, stats)?, stats))
}
