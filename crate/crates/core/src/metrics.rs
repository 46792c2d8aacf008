//! Overlap scores and pore-scale descriptors of label volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{index, LabelVolume};

/// Voxel counts behind one class's overlap scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassOverlap {
    pub name: String,
    pub intersection: u64,
    pub predicted: u64,
    pub reference: u64,
    pub dsc: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub classes: Vec<ClassOverlap>,
    pub macro_dsc: f64,
    pub macro_iou: f64,
}

/// Per-class and macro-averaged Dice and IoU. A class absent from both volumes scores 1.
pub fn overlap(pred: &LabelVolume, reference: &LabelVolume) -> Result<OverlapReport> {
    if pred.dims != reference.dims {
        return Err(Error::dim("overlap", format!("prediction {:?} vs reference {:?}", pred.dims, reference.dims)));
    }
    let k = pred.num_classes().max(reference.num_classes());
    let mut inter = vec![0u64; k];
    let mut pc = vec![0u64; k];
    let mut rc = vec![0u64; k];
    for (&p, &r) in pred.labels.iter().zip(&reference.labels) {
        pc[p as usize] += 1;
        rc[r as usize] += 1;
        if p == r {
            inter[p as usize] += 1;
        }
    }
    let names = if reference.num_classes() >= pred.num_classes() { &reference.class_names } else { &pred.class_names };
    let classes: Vec<ClassOverlap> = (0..k)
        .map(|c| {
            let (i, p, r) = (inter[c], pc[c], rc[c]);
            let (dsc, iou) = if p + r == 0 {
                (1.0, 1.0)
            } else {
                (2.0 * i as f64 / (p + r) as f64, i as f64 / (p + r - i) as f64)
            };
            ClassOverlap {
                name: names[c].clone(),
                intersection: i,
                predicted: p,
                reference: r,
                dsc,
                iou,
            }
        })
        .collect();
    let macro_dsc = classes.iter().map(|c| c.dsc).sum::<f64>() / k as f64;
    let macro_iou = classes.iter().map(|c| c.iou).sum::<f64>() / k as f64;
    Ok(OverlapReport {
        classes,
        macro_dsc,
        macro_iou,
    })
}

/// Porosity and per-fluid saturations, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub porosity: f64,
    /// `(class name, saturation)` for every non-rock class.
    pub saturations: Vec<(String, f64)>,
}

/// Fractions with class `rock` as the solid phase.
pub fn fractions(labels: &LabelVolume, rock: u8) -> Result<Fractions> {
    let hist = labels.histogram();
    let total = labels.labels.len();
    let pore = total - hist[rock as usize];
    if pore == 0 {
        return Err(Error::Undefined("saturation with zero pore voxels".into()));
    }
    let saturations = (0..labels.num_classes())
        .filter(|&c| c != rock as usize)
        .map(|c| (labels.class_names[c].clone(), 100.0 * hist[c] as f64 / pore as f64))
        .collect();
    Ok(Fractions {
        porosity: 100.0 * pore as f64 / total as f64,
        saturations,
    })
}

/// Face-adjacent `(a, b)` voxel pairs per axis `[z, y, x]`.
pub fn interface_faces(labels: &LabelVolume, a: u8, b: u8) -> [u64; 3] {
    let dims = labels.dims;
    let l = &labels.labels;
    let pair = |p: u8, q: u8| (p == a && q == b) || (p == b && q == a);
    let mut counts = [0u64; 3];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let here = l[index(dims, z, y, x)];
                if here != a && here != b {
                    continue;
                }
                if z + 1 < dims[0] && pair(here, l[index(dims, z + 1, y, x)]) {
                    counts[0] += 1;
                }
                if y + 1 < dims[1] && pair(here, l[index(dims, z, y + 1, x)]) {
                    counts[1] += 1;
                }
                if x + 1 < dims[2] && pair(here, l[index(dims, z, y, x + 1)]) {
                    counts[2] += 1;
                }
            }
        }
    }
    counts
}

/// Interface area between classes `a` and `b` in square micrometers.
pub fn interfacial_area(labels: &LabelVolume, a: u8, b: u8, spacing: [f64; 3]) -> Result<f64> {
    if a == b {
        return Err(Error::contract("interfacial_area", format!("classes must differ, got {a} twice")));
    }
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::contract("interfacial_area", format!("spacing must be positive, got {spacing:?}")));
    }
    let [dz, dy, dx] = spacing;
    let [nz, ny, nx] = interface_faces(labels, a, b);
    Ok(nz as f64 * dy * dx + ny as f64 * dz * dx + nx as f64 * dz * dy)
}

/// Euler characteristic `V - E + F - C` of the union of closed unit cubes at `mask` voxels.
pub fn euler_number(mask: &[bool], dims: [usize; 3]) -> i64 {
    let [d, h, w] = dims;
    let fg = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[index(dims, z as usize, y as usize, x as usize)]
    };
    let any = |cells: &[(isize, isize, isize)]| cells.iter().any(|&(z, y, x)| fg(z, y, x));
    let (mut v, mut e, mut f, mut c) = (0i64, 0i64, 0i64, 0i64);
    for z in 0..=d as isize {
        for y in 0..=h as isize {
            for x in 0..=w as isize {
                // Lattice point (z, y, x) touches voxels (z-1..z, y-1..y, x-1..x).
                if any(&[
                    (z - 1, y - 1, x - 1),
                    (z - 1, y - 1, x),
                    (z - 1, y, x - 1),
                    (z - 1, y, x),
                    (z, y - 1, x - 1),
                    (z, y - 1, x),
                    (z, y, x - 1),
                    (z, y, x),
                ]) {
                    v += 1;
                }
                // Edges leaving the point along +x, +y, +z.
                if any(&[(z - 1, y - 1, x), (z - 1, y, x), (z, y - 1, x), (z, y, x)]) {
                    e += 1;
                }
                if any(&[(z - 1, y, x - 1), (z - 1, y, x), (z, y, x - 1), (z, y, x)]) {
                    e += 1;
                }
                if any(&[(z, y - 1, x - 1), (z, y - 1, x), (z, y, x - 1), (z, y, x)]) {
                    e += 1;
                }
                // Faces spanned from the point: normal z, y, x.
                if any(&[(z - 1, y, x), (z, y, x)]) {
                    f += 1;
                }
                if any(&[(z, y - 1, x), (z, y, x)]) {
                    f += 1;
                }
                if any(&[(z, y, x - 1), (z, y, x)]) {
                    f += 1;
                }
                if fg(z, y, x) {
                    c += 1;
                }
            }
        }
    }
    v - e + f - c
}

/// Euler number of the voxels whose label satisfies `pick`.
pub fn euler_of(labels: &LabelVolume, pick: impl Fn(u8) -> bool) -> i64 {
    let mask: Vec<bool> = labels.labels.iter().map(|&l| pick(l)).collect();
    euler_number(&mask, labels.dims)
}

/// The ten descriptors of a three-phase rock/brine/oil labeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub porosity_pct: f64,
    pub saturation_brine_pct: f64,
    pub saturation_oil_pct: f64,
    pub area_oil_brine_um2: f64,
    pub area_brine_grain_um2: f64,
    pub area_oil_grain_um2: f64,
    pub grain_surface_um2: f64,
    pub euler_pore: i64,
    pub euler_brine: i64,
    pub euler_oil: i64,
}

/// Class indices of the three phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseIds {
    pub rock: u8,
    pub brine: u8,
    pub oil: u8,
}

impl Default for PhaseIds {
    fn default() -> Self {
        Self { rock: 0, brine: 1, oil: 2 }
    }
}

pub fn property_report(labels: &LabelVolume, spacing: [f64; 3], ids: PhaseIds) -> Result<PropertyReport> {
    let fr = fractions(labels, ids.rock)?;
    let sat = |c: u8| {
        fr.saturations
            .iter()
            .find(|(name, _)| *name == labels.class_names[c as usize])
            .map_or(0.0, |s| s.1)
    };
    let brine_grain = interfacial_area(labels, ids.brine, ids.rock, spacing)?;
    let oil_grain = interfacial_area(labels, ids.oil, ids.rock, spacing)?;
    Ok(PropertyReport {
        porosity_pct: fr.porosity,
        saturation_brine_pct: sat(ids.brine),
        saturation_oil_pct: sat(ids.oil),
        area_oil_brine_um2: interfacial_area(labels, ids.oil, ids.brine, spacing)?,
        area_brine_grain_um2: brine_grain,
        area_oil_grain_um2: oil_grain,
        grain_surface_um2: brine_grain + oil_grain,
        euler_pore: euler_of(labels, |l| l != ids.rock),
        euler_brine: euler_of(labels, |l| l == ids.brine),
        euler_oil: euler_of(labels, |l| l == ids.oil),
    })
}

impl PropertyReport {
    /// `(property, value)` rows in table order.
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("Porosity (%)", format!("{:.2}", self.porosity_pct)),
            ("Saturation of brine, Sw (%)", format!("{:.2}", self.saturation_brine_pct)),
            ("Saturation of oil, So (%)", format!("{:.2}", self.saturation_oil_pct)),
            ("Interfacial area oil-brine (um^2)", format!("{:.1}", self.area_oil_brine_um2)),
            ("Interfacial area brine-grains (um^2)", format!("{:.1}", self.area_brine_grain_um2)),
            ("Interfacial area oil-grains (um^2)", format!("{:.1}", self.area_oil_grain_um2)),
            ("Surface area of grains (um^2)", format!("{:.1}", self.grain_surface_um2)),
            ("Euler number of pore space", self.euler_pore.to_string()),
            ("Euler number of brine", self.euler_brine.to_string()),
            ("Euler number of oil", self.euler_oil.to_string()),
        ]
    }

    /// Aligned two-column plain-text table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = format!("{:<width$}  {}\n", "Property", "Value");
        out.push_str(&format!("{}\n", "-".repeat(width + 14)));
        for (name, value) in rows {
            out.push_str(&format!("{name:<width$}  {value:>12}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::default_class_names;

    fn lv(dims: [usize; 3], l: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, l, default_class_names()).unwrap()
    }

    #[test]
    fn single_voxel_and_block() {
        assert_eq!(euler_number(&[true], [1, 1, 1]), 1);
        assert_eq!(euler_number(&[true; 8], [2, 2, 2]), 1);
        assert_eq!(euler_number(&[false; 8], [2, 2, 2]), 0);
    }

    #[test]
    fn two_voxel_face_area() {
        let l = lv([1, 1, 2], vec![1, 2]);
        assert_eq!(interfacial_area(&l, 2, 1, [2.0; 3]).unwrap(), 4.0);
        assert!(interfacial_area(&l, 1, 1, [1.0; 3]).is_err());
    }

    #[test]
    fn counting_fractions() {
        let l = lv([1, 1, 4], vec![0, 0, 1, 2]);
        let f = fractions(&l, 0).unwrap();
        assert_eq!(f.porosity, 50.0);
        assert_eq!(f.saturations[0].1, 50.0);
        let rock = lv([1, 1, 2], vec![0, 0]);
        assert!(matches!(fractions(&rock, 0), Err(Error::Undefined(_))));
    }

    #[test]
    fn report_has_ten_rows() {
        let l = lv([2, 2, 2], vec![0, 1, 2, 1, 0, 0, 2, 1]);
        let r = property_report(&l, [1.0; 3], PhaseIds::default()).unwrap();
        assert_eq!(r.rows().len(), 10);
        assert!(r.to_table().contains("Euler number of oil"));
    }
}
