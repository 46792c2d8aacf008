//! Independent reference implementations shared by the integration tests.

use std::collections::HashSet;

use rand::Rng;
use samamba_core::autodiff::ScanParams;
use samamba_core::volume::{default_class_names, index};
use samamba_core::{LabelVolume, Tensor};

use super::rng;

/// Plain sequential recurrence, one channel and state at a time.
pub fn sequential_scan(u: &Tensor, p: &ScanParams) -> Tensor {
    let (t, c) = (u.shape()[0], u.shape()[1]);
    let n = p.a.shape()[1];
    let mut y = Tensor::zeros(&[t, c]);
    for e in 0..c {
        let mut h = vec![0.0; n];
        for step in 0..t {
            let dt = p.delta.data()[step * c + e];
            let mut acc = 0.0;
            for (s, hs) in h.iter_mut().enumerate() {
                let abar = (dt * p.a.data()[e * n + s]).exp();
                let bbar = dt * p.b.data()[step * n + s];
                *hs = abar * *hs + bbar * u.data()[step * c + e];
                acc += p.c.data()[step * n + s] * *hs;
            }
            y.data_mut()[step * c + e] = acc;
        }
    }
    y
}

pub fn random_scan_case(seed: u64) -> (Tensor, ScanParams) {
    let mut r = rng(seed);
    let t = r.gen_range(1..=64);
    let c = r.gen_range(1..=8);
    let n = r.gen_range(1..=4);
    let u = Tensor::uniform(&[t, c], -1.0, 1.0, &mut r);
    let p = ScanParams {
        a: Tensor::uniform(&[c, n], -2.0, -0.05, &mut r),
        b: Tensor::uniform(&[t, n], -1.0, 1.0, &mut r),
        c: Tensor::uniform(&[t, n], -1.0, 1.0, &mut r),
        delta: Tensor::uniform(&[t, c], 0.01, 1.0, &mut r),
    };
    (u, p)
}

/// Enumerates every cell of every voxel cube in doubled coordinates and counts by dimension.
pub fn brute_euler(mask: &[bool], dims: [usize; 3]) -> i64 {
    let mut cells: HashSet<[i64; 3]> = HashSet::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if !mask[index(dims, z, y, x)] {
                    continue;
                }
                let base = [2 * z as i64, 2 * y as i64, 2 * x as i64];
                for a in 0..3 {
                    for b in 0..3 {
                        for c in 0..3 {
                            cells.insert([base[0] + a, base[1] + b, base[2] + c]);
                        }
                    }
                }
            }
        }
    }
    // A cell's dimension is its number of odd coordinates.
    cells
        .iter()
        .map(|p| match p.iter().filter(|&&c| c % 2 != 0).count() {
            0 | 2 => 1,
            _ => -1,
        })
        .sum()
}

pub fn mask_from(dims: [usize; 3], voxels: &[[usize; 3]]) -> Vec<bool> {
    let mut m = vec![false; dims.iter().product()];
    for v in voxels {
        m[index(dims, v[0], v[1], v[2])] = true;
    }
    m
}

/// Random blobs in separate slabs, so they never touch, even diagonally.
pub fn separated_blobs(seed: u64) -> (Vec<Vec<bool>>, [usize; 3]) {
    let mut r = rng(seed);
    let n = r.gen_range(2..5);
    let dims = [n * 6, 6, 6];
    let mut parts = Vec::new();
    for b in 0..n {
        let mut m = vec![false; dims.iter().product()];
        for z in b * 6..b * 6 + 5 {
            for y in 0..6 {
                for x in 0..6 {
                    if r.gen_bool(0.5) {
                        m[index(dims, z, y, x)] = true;
                    }
                }
            }
        }
        parts.push(m);
    }
    (parts, dims)
}

/// Blobby labels so that interior voxels exist.
pub fn blob_labels(dims: [usize; 3], seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    let centers: Vec<([f64; 3], u8)> = (0..4)
        .map(|_| {
            (
                [r.gen_range(0.0..dims[0] as f64), r.gen_range(0.0..dims[1] as f64), r.gen_range(0.0..dims[2] as f64)],
                r.gen_range(0..3u8),
            )
        })
        .collect();
    let mut labels = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let nearest = centers
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = (0..3).map(|i| (a.0[i] - p[i]).powi(2)).sum();
                        let db: f64 = (0..3).map(|i| (b.0[i] - p[i]).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                labels.push(nearest.1);
            }
        }
    }
    LabelVolume::new(dims, labels, default_class_names()).unwrap()
}

fn conv_count(cin: usize, cout: usize, k: usize, groups: usize) -> usize {
    cout * (cin / groups) * k * k * k + cout
}

fn lin(i: usize, o: usize) -> usize {
    i * o + o
}

/// Layer-by-layer parameter arithmetic for the desk configuration.
pub fn desk_hand_count() -> usize {
    let ch = [8usize, 16, 32, 64];
    let (c, l, r, n, d) = (64usize, 4usize, 8usize, 4usize, 64usize);
    let block = |c: usize| {
        let e = 2 * c;
        let rank = c.div_ceil(16);
        2 * c + c * 2 * e + e * 4 + e + e * (rank + 2 * n) + rank * e + e + e * n + e + e * c
    };
    let mut total = conv_count(1, 8, 3, 1);
    for i in 0..4 {
        let prev = if i == 0 { 8 } else { ch[i - 1] };
        total += conv_count(prev, ch[i], 2, 1) + block(ch[i]);
    }
    total += lin(64, d) + lin(d, d) + conv_count(32, 1, 1, 1);
    total += lin(d, d) + lin(d, 2);
    total += ch.iter().map(|&cj| lin(d, d) + lin(d, 2 * cj)).sum::<usize>();
    total += 1 + conv_count(8, 1, 1, 1) + conv_count(1, c, 4, 1);
    total += l * (2 * c + 4 * lin(c, c) + 2 * (c * r + r * c) + 2 * c + lin(c, 4 * c) + lin(4 * c, c));
    total += 2 * (conv_count(16, c, 1, 1) + conv_count(c, c, 3, c) + conv_count(c, c, 1, 1) + lin(c, c) + lin(2 * c, 2));
    let deep = |ctx: usize| lin(c, 16) + 1 + 3 + 8 * lin(c, c) + lin(16, c) + lin(c, c / 4) + lin(c / 4, c) + lin(ctx, c);
    total += deep(16) + deep(c);
    for j in 0..4 {
        let cin = if j == 3 { 2 * ch[3] } else { ch[j + 1] + 2 * ch[j] };
        total += conv_count(c, ch[j], 1, 1) + conv_count(cin, ch[j], 3, 1);
    }
    total += conv_count(16, 8, 3, 1) + conv_count(8, 8, 3, 1) + 1 + conv_count(8, 8, 3, 1) + conv_count(8, 3, 1, 1);
    total
}
