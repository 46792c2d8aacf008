//! Synthetic three-phase phantoms with exact labels.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::distance_to;
use crate::volume::{default_class_names, index, voxel_count, LabelVolume, Volume};

pub const ROCK: u8 = 0;
pub const BRINE: u8 = 1;
pub const OIL: u8 = 2;

/// Smallest extent accepted per axis.
pub const MIN_EXTENT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Random grains; oil fills pore bodies, brine coats grains.
    SpherePack,
    /// Grain size alternates between fine and coarse beds along z.
    LayeredBed,
    /// Brine-filled pores holding isolated spherical oil droplets.
    DropletField,
    /// A one-voxel brine film on every grain, oil elsewhere.
    WettingFilm,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere-pack" => Ok(Self::SpherePack),
            "layered-bed" => Ok(Self::LayeredBed),
            "droplet-field" => Ok(Self::DropletField),
            "wetting-film" => Ok(Self::WettingFilm),
            other => Err(Error::Config(format!(
                "unknown phantom kind `{other}` (expected sphere-pack, layered-bed, droplet-field or wetting-film)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub spacing_um: [f64; 3],
    /// Target pore fraction in (0, 1).
    pub porosity: f64,
    /// Accepted deviation of the achieved porosity.
    pub porosity_tolerance: f64,
    /// Oil share of the pore space (sphere-pack, layered-bed, droplet-field).
    pub oil_fraction: f64,
    /// Grain radius range in voxels.
    pub grain_radius: [f64; 2],
    /// Droplet radius range in voxels.
    pub droplet_radius: [f64; 2],
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Gray levels of rock, brine and oil.
    pub gray_levels: [f64; 3],
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::new(PhantomKind::SpherePack, [64; 3], 0)
    }
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, dims: [usize; 3], seed: u64) -> Self {
        Self {
            kind,
            dims,
            spacing_um: [1.0; 3],
            porosity: 0.65,
            porosity_tolerance: 0.01,
            oil_fraction: 0.4,
            grain_radius: [3.0, 7.0],
            droplet_radius: [1.5, 3.5],
            blur_sigma: 0.7,
            noise_sigma: 0.03,
            gray_levels: [0.8, 0.5, 0.2],
            seed,
            max_attempts: 200_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_EXTENT) {
            return Err(Error::Config(format!("phantom dims {:?} below {MIN_EXTENT} per axis", self.dims)));
        }
        if !(self.porosity > 0.0 && self.porosity < 1.0) || !(0.0..=1.0).contains(&self.oil_fraction) {
            return Err(Error::Config("porosity must lie in (0, 1) and oil fraction in [0, 1]".into()));
        }
        let [lo, hi] = self.grain_radius;
        if !(lo > 0.0 && hi >= lo) || self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("invalid grain radius, blur or noise".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelVolume,
    pub spec: PhantomSpec,
    /// Achieved pore fraction of the truth labels.
    pub porosity: f64,
}

struct Sphere {
    c: [f64; 3],
    r: f64,
}

/// Voxel indices whose centers lie inside the sphere.
fn sphere_voxels(dims: [usize; 3], s: &Sphere, mut f: impl FnMut(usize)) {
    let lo = |a: usize| ((s.c[a] - s.r).ceil().max(0.0)) as usize;
    let hi = |a: usize| ((s.c[a] + s.r).floor().min(dims[a] as f64 - 1.0)).max(-1.0) as isize;
    let r2 = s.r * s.r;
    for z in lo(0) as isize..=hi(0) {
        let dz = z as f64 - s.c[0];
        for y in lo(1) as isize..=hi(1) {
            let dy = y as f64 - s.c[1];
            for x in lo(2) as isize..=hi(2) {
                let dx = x as f64 - s.c[2];
                if dz * dz + dy * dy + dx * dx <= r2 {
                    f(index(dims, z as usize, y as usize, x as usize));
                }
            }
        }
    }
}

/// Non-overlapping random grains until the pore fraction reaches the target band.
fn place_grains(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let dims = spec.dims;
    let n = voxel_count(dims);
    let mut solid = vec![false; n];
    let mut solid_count = 0usize;
    let mut grains: Vec<Sphere> = Vec::new();
    let upper = spec.porosity + spec.porosity_tolerance;
    let lower = spec.porosity - spec.porosity_tolerance;
    for _ in 0..spec.max_attempts {
        let porosity = 1.0 - solid_count as f64 / n as f64;
        if porosity <= upper {
            return Ok(solid);
        }
        let c = [
            rng.gen_range(0.0..dims[0] as f64),
            rng.gen_range(0.0..dims[1] as f64),
            rng.gen_range(0.0..dims[2] as f64),
        ];
        let [mut lo, mut hi] = spec.grain_radius;
        if spec.kind == PhantomKind::LayeredBed {
            // Four beds along z, alternating fine and coarse grains.
            let bed = (c[0] / dims[0] as f64 * 4.0) as usize;
            if bed % 2 == 0 {
                hi = lo + 0.4 * (hi - lo);
            } else {
                lo += 0.6 * (hi - lo);
            }
        }
        let r = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let cand = Sphere { c, r };
        let overlaps = grains.iter().any(|g| {
            let d2: f64 = (0..3).map(|a| (g.c[a] - cand.c[a]).powi(2)).sum();
            d2 < (g.r + cand.r).powi(2)
        });
        if overlaps {
            continue;
        }
        let mut added = Vec::new();
        sphere_voxels(dims, &cand, |i| {
            if !solid[i] {
                added.push(i);
            }
        });
        let after = 1.0 - (solid_count + added.len()) as f64 / n as f64;
        if added.is_empty() || after < lower {
            continue;
        }
        for i in added {
            solid[i] = true;
            solid_count += 1;
        }
        grains.push(cand);
    }
    let porosity = 1.0 - solid_count as f64 / n as f64;
    if porosity <= upper {
        Ok(solid)
    } else {
        Err(Error::Generation(format!(
            "porosity {porosity:.4} still above target {:.4} after {} attempts",
            spec.porosity, spec.max_attempts
        )))
    }
}

/// Oil in the pore voxels farthest from rock, `oil_fraction` of the pore space.
fn fill_pore_bodies(solid: &[bool], dims: [usize; 3], oil_fraction: f64) -> Vec<u8> {
    let dist = distance_to(solid, dims);
    let mut pore: Vec<usize> = (0..solid.len()).filter(|&i| !solid[i]).collect();
    // Farthest first, ties by index.
    pore.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let n_oil = (oil_fraction * pore.len() as f64).round() as usize;
    let mut labels: Vec<u8> = solid.iter().map(|&s| if s { ROCK } else { BRINE }).collect();
    for &i in &pore[..n_oil] {
        labels[i] = OIL;
    }
    labels
}

/// Isolated spherical oil droplets in brine-filled pores.
fn place_droplets(solid: &[bool], spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let dims = spec.dims;
    let mut labels: Vec<u8> = solid.iter().map(|&s| if s { ROCK } else { BRINE }).collect();
    let pore = labels.iter().filter(|&&l| l != ROCK).count();
    let target = (spec.oil_fraction * pore as f64).round() as usize;
    let mut oil = 0usize;
    let mut drops: Vec<Sphere> = Vec::new();
    let [lo, hi] = spec.droplet_radius;
    for _ in 0..spec.max_attempts {
        if oil >= target {
            break;
        }
        let c = [
            rng.gen_range(0.0..dims[0] as f64),
            rng.gen_range(0.0..dims[1] as f64),
            rng.gen_range(0.0..dims[2] as f64),
        ];
        let r = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let cand = Sphere { c, r };
        // Keep one voxel of brine between droplets so they stay separate.
        if drops.iter().any(|d| {
            let d2: f64 = (0..3).map(|a| (d.c[a] - cand.c[a]).powi(2)).sum();
            d2 < (d.r + cand.r + 2.0).powi(2)
        }) {
            continue;
        }
        let mut inside = Vec::new();
        let mut hits_rock = false;
        sphere_voxels(dims, &cand, |i| {
            if solid[i] {
                hits_rock = true;
            }
            inside.push(i);
        });
        if hits_rock || inside.is_empty() {
            continue;
        }
        for i in inside {
            labels[i] = OIL;
            oil += 1;
        }
        drops.push(cand);
    }
    labels
}

/// Brine on every pore voxel face-adjacent to rock, oil elsewhere.
fn drape_film(solid: &[bool], dims: [usize; 3]) -> Vec<u8> {
    let mut labels = vec![OIL; solid.len()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = index(dims, z, y, x);
                if solid[i] {
                    labels[i] = ROCK;
                    continue;
                }
                let touches = (z > 0 && solid[index(dims, z - 1, y, x)])
                    || (z + 1 < dims[0] && solid[index(dims, z + 1, y, x)])
                    || (y > 0 && solid[index(dims, z, y - 1, x)])
                    || (y + 1 < dims[1] && solid[index(dims, z, y + 1, x)])
                    || (x > 0 && solid[index(dims, z, y, x - 1)])
                    || (x + 1 < dims[2] && solid[index(dims, z, y, x + 1)]);
                if touches {
                    labels[i] = BRINE;
                }
            }
        }
    }
    labels
}

/// Separable Gaussian blur with clamped borders, truncated at 3 sigma.
pub fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut cur = data.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let pos = [z, y, x];
                    let base = index(dims, z, y, x) - pos[axis] * strides[axis];
                    let mut acc = 0.0;
                    for (t, &w) in kernel.iter().enumerate() {
                        let p = (pos[axis] as isize + t as isize - radius).clamp(0, dims[axis] as isize - 1) as usize;
                        acc += w * cur[base + p * strides[axis]];
                    }
                    next[index(dims, z, y, x)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Generates a phantom: grains, fluids, gray-level rendering, blur, then noise.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.dims;
    let solid = place_grains(spec, &mut rng)?;
    let labels = match spec.kind {
        PhantomKind::SpherePack | PhantomKind::LayeredBed => fill_pore_bodies(&solid, dims, spec.oil_fraction),
        PhantomKind::DropletField => place_droplets(&solid, spec, &mut rng),
        PhantomKind::WettingFilm => drape_film(&solid, dims),
    };
    let clean: Vec<f64> = labels.iter().map(|&l| spec.gray_levels[l as usize]).collect();
    let mut gray = gaussian_blur(&clean, dims, spec.blur_sigma);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut gray {
            *v += normal.sample(&mut rng);
        }
    }
    let porosity = labels.iter().filter(|&&l| l != ROCK).count() as f64 / labels.len() as f64;
    Ok(Phantom {
        image: Volume::new(dims, spec.spacing_um, gray)?,
        labels: LabelVolume::new(dims, labels, default_class_names())?,
        spec: spec.clone(),
        porosity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse() {
        assert_eq!("wetting-film".parse::<PhantomKind>().unwrap(), PhantomKind::WettingFilm);
        assert!("foam".parse::<PhantomKind>().is_err());
    }

    #[test]
    fn small_dims_rejected() {
        let spec = PhantomSpec::new(PhantomKind::SpherePack, [16, 32, 32], 1);
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn blur_keeps_constants() {
        let out = gaussian_blur(&[2.0; 27], [3, 3, 3], 1.0);
        assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn unreachable_target_fails() {
        let mut spec = PhantomSpec::new(PhantomKind::SpherePack, [32; 3], 3);
        spec.porosity = 0.05;
        spec.max_attempts = 2000;
        assert!(matches!(generate(&spec), Err(Error::Generation(_))));
    }
}
