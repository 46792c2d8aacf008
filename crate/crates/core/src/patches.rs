//! Sliding-window patch origins and foreground-filtered patch extraction.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// Origins along one axis: multiples of `stride`, plus a flush-to-end origin when needed.
pub fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    debug_assert!(extent >= patch && stride >= 1);
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Cartesian product of per-axis origins, z outermost.
pub fn grid_origins(dims: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    if (0..3).any(|a| dims[a] < patch[a]) {
        return Err(Error::Size { dims, patch });
    }
    if stride.iter().any(|&s| s == 0) || patch.iter().any(|&p| p == 0) {
        return Err(Error::Config(format!("patch {patch:?} and stride {stride:?} must be positive")));
    }
    let [oz, oy, ox] = [0, 1, 2].map(|a| axis_origins(dims[a], patch[a], stride[a]));
    let mut out = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    /// Patches with a smaller non-rock fraction are dropped.
    pub min_foreground_fraction: f64,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self {
            patch_size: [96; 3],
            stride: [48; 3],
            min_foreground_fraction: 0.10,
        }
    }
}

impl PatchGrid {
    pub fn cubic(patch: usize, stride: usize, min_foreground_fraction: f64) -> Self {
        Self {
            patch_size: [patch; 3],
            stride: [stride; 3],
            min_foreground_fraction,
        }
    }

    pub fn origins(&self, dims: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        grid_origins(dims, self.patch_size, self.stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub image: Volume,
    pub mask: LabelVolume,
}

/// Fraction of voxels whose label is not rock (class 0).
pub fn foreground_fraction(mask: &LabelVolume) -> f64 {
    mask.labels.iter().filter(|&&l| l != 0).count() as f64 / mask.labels.len() as f64
}

pub fn extract_patches(v: &Volume, mask: &LabelVolume, grid: &PatchGrid) -> Result<Vec<Patch>> {
    if v.dims != mask.dims {
        return Err(Error::dim("extract_patches", format!("volume {:?} vs mask {:?}", v.dims, mask.dims)));
    }
    let mut out = Vec::new();
    for origin in grid.origins(v.dims)? {
        let m = mask.crop(origin, grid.patch_size);
        if foreground_fraction(&m) < grid.min_foreground_fraction {
            continue;
        }
        out.push(Patch {
            origin,
            image: v.crop(origin, grid.patch_size),
            mask: m,
        });
    }
    Ok(out)
}
