//! Boundary-aware composite loss: weighted Dice, Tversky and confidence-weighted focal terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{index, LabelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Width of the boundary band in voxels.
    pub delta: f64,
    pub eps: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub focal_gamma: f64,
    /// Term weights for dice, tversky and focal.
    pub lambdas: [f64; 3],
    /// Soft class volumes below this are clamped before inverting.
    pub min_class_volume: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.3,
            eps: 1e-5,
            tversky_alpha: 0.7,
            tversky_beta: 0.3,
            focal_gamma: 2.0,
            lambdas: [1.0, 0.5, 0.5],
            min_class_volume: 1.0,
        }
    }
}

/// Euclidean distance of every voxel to the nearest boundary voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    pub dims: [usize; 3],
    /// Distances in voxels; `f64::INFINITY` when the volume has no boundary.
    pub d: Vec<f64>,
    pub delta: f64,
}

/// Voxels with a face-adjacent neighbor of a different class.
pub fn boundary_mask(labels: &LabelVolume) -> Vec<bool> {
    let dims = labels.dims;
    let mut out = vec![false; labels.labels.len()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = index(dims, z, y, x);
                let l = labels.labels[i];
                let differs = |zz: usize, yy: usize, xx: usize| labels.labels[index(dims, zz, yy, xx)] != l;
                out[i] = (z > 0 && differs(z - 1, y, x))
                    || (z + 1 < dims[0] && differs(z + 1, y, x))
                    || (y > 0 && differs(z, y - 1, x))
                    || (y + 1 < dims[1] && differs(z, y + 1, x))
                    || (x > 0 && differs(z, y, x - 1))
                    || (x + 1 < dims[2] && differs(z, y, x + 1));
            }
        }
    }
    out
}

/// One-dimensional squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] {
                // The new parabola hides the previous one entirely.
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for q in 0..n {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        out[q] = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Exact Euclidean distance transform to the `true` voxels of `seeds`.
pub fn distance_to(seeds: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = *dims.iter().max().unwrap();
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut zb = vec![0.0; longest + 1];
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let n = dims[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..dims[a] {
            for j in 0..dims[b] {
                let base = i * strides[a] + j * strides[b];
                for q in 0..n {
                    f[q] = g[base + q * strides[axis]];
                }
                edt_1d(&f[..n], &mut out[..n], &mut v[..n], &mut zb[..n + 1]);
                for q in 0..n {
                    g[base + q * strides[axis]] = out[q];
                }
            }
        }
    }
    g.iter().map(|x| x.sqrt()).collect()
}

pub fn boundary_distance(labels: &LabelVolume, delta: f64) -> BoundaryField {
    BoundaryField {
        dims: labels.dims,
        d: distance_to(&boundary_mask(labels), labels.dims),
        delta,
    }
}

/// `w = min(1, d / delta)` per voxel.
pub fn confidence_weights(field: &BoundaryField) -> Result<Vec<f64>> {
    if !(field.delta > 0.0) {
        return Err(Error::Config(format!("boundary band width must be positive, got {}", field.delta)));
    }
    Ok(field.d.iter().map(|&d| (d / field.delta).min(1.0)).collect())
}

/// Soft targets `[K, N]` and blend factors `eta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    pub k: usize,
    /// Class-major probabilities: `y[c * n + v]`.
    pub y: Vec<f64>,
    pub eta: Vec<f64>,
}

impl SoftTargets {
    pub fn voxels(&self) -> usize {
        self.eta.len()
    }

    pub fn class_volumes(&self) -> Vec<f64> {
        let n = self.voxels();
        (0..self.k).map(|c| self.y[c * n..(c + 1) * n].iter().sum()).collect()
    }
}

/// `(1 - eta) * onehot + eta / K` inside the band, one-hot outside.
pub fn soften_targets(labels: &LabelVolume, field: &BoundaryField, k: usize) -> SoftTargets {
    let n = labels.labels.len();
    let mut y = vec![0.0; k * n];
    let mut eta = vec![0.0; n];
    for (v, (&l, &d)) in labels.labels.iter().zip(&field.d).enumerate() {
        let e = if d >= field.delta { 0.0 } else { 1.0 - d / field.delta };
        eta[v] = e;
        for c in 0..k {
            let onehot = if c == l as usize { 1.0 } else { 0.0 };
            y[c * n + v] = if e == 0.0 { onehot } else { (1.0 - e) * onehot + e / k as f64 };
        }
    }
    SoftTargets { k, y, eta }
}

/// `w_c = V_total / (K * max(V_c, floor))`.
pub fn class_weights_from_volumes(volumes: &[f64], floor: f64) -> Vec<f64> {
    let total: f64 = volumes.iter().sum();
    let k = volumes.len() as f64;
    volumes.iter().map(|&v| total / (k * v.max(floor))).collect()
}

pub fn class_weights(targets: &SoftTargets, floor: f64) -> Vec<f64> {
    class_weights_from_volumes(&targets.class_volumes(), floor)
}

/// Constant tensors feeding the loss for a batch of label patches.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// `[B, K, D, H, W]` soft targets.
    pub soft: Tensor,
    /// `[B, K, D, H, W]` one-hot hard labels.
    pub hard: Tensor,
    /// `[B, 1, D, H, W]` confidence weights.
    pub weights: Tensor,
    pub class_weights: Vec<f64>,
}

pub fn prepare_targets(labels: &[LabelVolume], k: usize, cfg: &LossConfig) -> Result<LossTargets> {
    let first = labels.first().ok_or_else(|| Error::Config("empty label batch".into()))?;
    let dims = first.dims;
    let n = first.labels.len();
    let b = labels.len();
    let mut soft = vec![0.0; b * k * n];
    let mut hard = vec![0.0; b * k * n];
    let mut weights = vec![0.0; b * n];
    let mut volumes = vec![0.0; k];
    for (bi, l) in labels.iter().enumerate() {
        if l.dims != dims {
            return Err(Error::dim("loss targets", format!("label dims {:?} vs {dims:?}", l.dims)));
        }
        if let Some(&bad) = l.labels.iter().find(|&&c| c as usize >= k) {
            return Err(Error::contract("loss targets", format!("label {bad} with {k} classes")));
        }
        let field = boundary_distance(l, cfg.delta);
        let w = confidence_weights(&field)?;
        let st = soften_targets(l, &field, k);
        for (c, vol) in volumes.iter_mut().enumerate() {
            *vol += st.y[c * n..(c + 1) * n].iter().sum::<f64>();
        }
        soft[bi * k * n..(bi + 1) * k * n].copy_from_slice(&st.y);
        for (v, &c) in l.labels.iter().enumerate() {
            hard[(bi * k + c as usize) * n + v] = 1.0;
        }
        weights[bi * n..(bi + 1) * n].copy_from_slice(&w);
    }
    let shape = [b, k, dims[0], dims[1], dims[2]];
    Ok(LossTargets {
        soft: Tensor::new(&shape, soft)?,
        hard: Tensor::new(&shape, hard)?,
        weights: Tensor::new(&[b, 1, dims[0], dims[1], dims[2]], weights)?,
        class_weights: class_weights_from_volumes(&volumes, cfg.min_class_volume),
    })
}

/// Sums over every axis except the class axis 1.
fn per_class_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    let axes: Vec<usize> = (0..rank).filter(|&a| a != 1).collect();
    g.sum_axes(x, &axes, false)
}

/// Per-class Dice terms `1 - (2 TP + eps) / (P + Y + eps)`, shape `[K]`.
pub fn dice_terms(g: &mut Graph, p: Var, targets: &Tensor, eps: f64) -> Result<Var> {
    let y = g.constant(targets.clone());
    let py = g.mul(p, y)?;
    let tp = per_class_sum(g, py)?;
    let ps = per_class_sum(g, p)?;
    let ys = per_class_sum(g, y)?;
    let num = g.scale(tp, 2.0);
    let num = g.add_scalar(num, eps);
    let den = g.add(ps, ys)?;
    let den = g.add_scalar(den, eps);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    Ok(g.add_scalar(neg, 1.0))
}

/// `mean_c w_c (1 - (2 TP + eps) / (P + Y + eps))`.
pub fn dice_loss(g: &mut Graph, p: Var, targets: &Tensor, class_weights: &[f64], eps: f64) -> Result<Var> {
    let term = dice_terms(g, p, targets, eps)?;
    let k = class_weights.len();
    if g.shape(term) != [k] {
        return Err(Error::dim("dice_loss", format!("{} class weights for {:?}", k, g.shape(term))));
    }
    let w = g.constant(Tensor::new(&[k], class_weights.to_vec())?);
    let weighted = g.mul(term, w)?;
    g.mean_axes(weighted, &[0], false)
}

/// Per-class Tversky terms `1 - (TP + eps) / (TP + alpha FN + beta FP + eps)`, shape `[K]`.
pub fn tversky_terms(g: &mut Graph, p: Var, targets: &Tensor, alpha: f64, beta: f64, eps: f64) -> Result<Var> {
    let y = g.constant(targets.clone());
    let py = g.mul(p, y)?;
    let tp = per_class_sum(g, py)?;
    let ps = per_class_sum(g, p)?;
    let ys = per_class_sum(g, y)?;
    // FN = Y - TP and FP = P - TP.
    let fn_ = g.sub(ys, tp)?;
    let fp = g.sub(ps, tp)?;
    let a = g.scale(fn_, alpha);
    let b = g.scale(fp, beta);
    let den = g.add(tp, a)?;
    let den = g.add(den, b)?;
    let den = g.add_scalar(den, eps);
    let num = g.add_scalar(tp, eps);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio);
    Ok(g.add_scalar(neg, 1.0))
}

/// Class mean of [`tversky_terms`].
pub fn tversky_loss(g: &mut Graph, p: Var, targets: &Tensor, alpha: f64, beta: f64, eps: f64) -> Result<Var> {
    let term = tversky_terms(g, p, targets, alpha, beta, eps)?;
    g.mean_axes(term, &[0], false)
}

/// `sum_v w (1 - p_t)^gamma (-log p_t) / sum_v w`, with `p_t` taken at the hard label.
pub fn focal_loss(g: &mut Graph, logits: Var, hard: &Tensor, weights: &Tensor, gamma: f64) -> Result<Var> {
    let wsum = weights.sum();
    if wsum == 0.0 {
        log::warn!("focal loss: every voxel has zero confidence weight, term set to 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let logp = g.log_softmax(logits, 1)?;
    let onehot = g.constant(hard.clone());
    let sel = g.mul(logp, onehot)?;
    let logpt = g.sum_axes(sel, &[1], true)?;
    let pt = g.exp(logpt);
    let negpt = g.neg(pt);
    let miss = g.add_scalar(negpt, 1.0);
    let modulator = if gamma == 2.0 {
        g.square(miss)
    } else {
        let clamped = g.add_scalar(miss, 1e-300);
        let l = g.log(clamped);
        let l = g.scale(l, gamma);
        g.exp(l)
    };
    let nll = g.neg(logpt);
    let per_voxel = g.mul(modulator, nll)?;
    let w = g.constant(weights.clone());
    let weighted = g.mul(per_voxel, w)?;
    let s = g.sum_all(weighted);
    Ok(g.scale(s, 1.0 / wsum))
}

/// Graph handles of each term plus the weights used.
pub struct LossTerms {
    pub dice: Var,
    pub tversky: Var,
    pub focal: Var,
    pub total: Var,
    pub class_weights: Vec<f64>,
}

/// Scalar values of a [`LossTerms`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub dice: f64,
    pub tversky: f64,
    pub focal: f64,
    pub total: f64,
    pub class_weights: Vec<f64>,
    pub lambdas: [f64; 3],
}

impl LossTerms {
    pub fn bundle(&self, g: &Graph, cfg: &LossConfig) -> LossBundle {
        LossBundle {
            dice: g.value(self.dice).item(),
            tversky: g.value(self.tversky).item(),
            focal: g.value(self.focal).item(),
            total: g.value(self.total).item(),
            class_weights: self.class_weights.clone(),
            lambdas: cfg.lambdas,
        }
    }
}

/// Loss terms from logits and already prepared targets.
pub fn loss_from_targets(g: &mut Graph, logits: Var, t: &LossTargets, cfg: &LossConfig) -> Result<LossTerms> {
    if g.shape(logits) != t.soft.shape() {
        return Err(Error::dim(
            "total_loss",
            format!("logits {:?} vs targets {:?}", g.shape(logits), t.soft.shape()),
        ));
    }
    let p = g.softmax(logits, 1)?;
    let dice = dice_loss(g, p, &t.soft, &t.class_weights, cfg.eps)?;
    let tversky = tversky_loss(g, p, &t.soft, cfg.tversky_alpha, cfg.tversky_beta, cfg.eps)?;
    let focal = focal_loss(g, logits, &t.hard, &t.weights, cfg.focal_gamma)?;
    let [l1, l2, l3] = cfg.lambdas;
    let a = g.scale(dice, l1);
    let b = g.scale(tversky, l2);
    let c = g.scale(focal, l3);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossTerms {
        dice,
        tversky,
        focal,
        total,
        class_weights: t.class_weights.clone(),
    })
}

/// Composite loss of `logits[B, K, D, H, W]` against a batch of label volumes.
pub fn total_loss(g: &mut Graph, logits: Var, labels: &[LabelVolume], cfg: &LossConfig) -> Result<LossTerms> {
    let k = *g
        .shape(logits)
        .get(1)
        .ok_or_else(|| Error::dim("total_loss", "logits need a class axis"))?;
    let targets = prepare_targets(labels, k, cfg)?;
    loss_from_targets(g, logits, &targets, cfg)
}
