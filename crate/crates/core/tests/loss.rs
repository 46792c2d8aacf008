mod common;

use common::oracles::blob_labels;
use common::{gradcheck, rng};
use proptest::prelude::*;
use rand::Rng;
use samamba_core::loss::{
    boundary_distance, boundary_mask, class_weights, confidence_weights, dice_loss, dice_terms, focal_loss, prepare_targets,
    soften_targets, total_loss, tversky_loss, tversky_terms, LossConfig,
};
use samamba_core::volume::{default_class_names, index};
use samamba_core::{Graph, LabelVolume, Mode, Tensor};

fn random_labels(dims: [usize; 3], k: u8, seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    let labels = (0..dims.iter().product::<usize>()).map(|_| r.gen_range(0..k)).collect();
    LabelVolume::new(dims, labels, default_class_names()).unwrap()
}

#[test]
fn distance_matches_brute_force() {
    let dims = [8, 8, 8];
    for seed in 0..10 {
        let l = if seed % 2 == 0 { random_labels(dims, 3, seed) } else { blob_labels(dims, seed) };
        let mask = boundary_mask(&l);
        let field = boundary_distance(&l, 0.3);
        let seeds: Vec<[usize; 3]> = (0..512).filter(|&i| mask[i]).map(|i| [i / 64, (i / 8) % 8, i % 8]).collect();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let best = seeds
                        .iter()
                        .map(|s| {
                            let d2 = (s[0] as f64 - z as f64).powi(2) + (s[1] as f64 - y as f64).powi(2) + (s[2] as f64 - x as f64).powi(2);
                            d2.sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(field.d[index(dims, z, y, x)], best);
                }
            }
        }
    }
}

#[test]
fn half_space_has_two_zero_layers() {
    let dims = [6, 4, 4];
    let labels = (0..96).map(|i| if i / 16 < 3 { 0 } else { 2 }).collect();
    let l = LabelVolume::new(dims, labels, default_class_names()).unwrap();
    let f = boundary_distance(&l, 0.3);
    for z in 0..6 {
        let want = [2.0, 1.0, 0.0, 0.0, 1.0, 2.0][z];
        assert!((0..16).all(|i| f.d[z * 16 + i] == want));
    }
}

#[test]
fn soft_targets_are_distributions_and_consistent_with_weights() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let l = if seed % 2 == 0 { random_labels([6, 7, 8], 3, seed) } else { blob_labels([6, 7, 8], seed) };
        for delta in [0.3, 1.5, 2.5] {
            let f = boundary_distance(&l, delta);
            let st = soften_targets(&l, &f, 3);
            let w = confidence_weights(&f).unwrap();
            let n = st.voxels();
            for v in 0..n {
                let s: f64 = (0..3).map(|c| st.y[c * n + v]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                if f.d[v] >= delta {
                    assert_eq!(st.eta[v], 0.0);
                    assert_eq!(st.y[l.labels[v] as usize * n + v], 1.0);
                } else {
                    assert_eq!(st.eta[v], 1.0 - (f.d[v] / delta).min(1.0));
                    assert!((w[v] - (1.0 - st.eta[v])).abs() < 1e-15);
                }
            }
            let cw = class_weights(&st, cfg.min_class_volume);
            let vols = st.class_volumes();
            let lhs: f64 = cw.iter().zip(&vols).map(|(w, v)| w * v).sum();
            let total: f64 = vols.iter().sum();
            // The identity holds whenever the empty-class clamp is inactive.
            if vols.iter().all(|&v| v >= cfg.min_class_volume) {
                assert!((lhs - total).abs() < 1e-9);
            } else {
                assert!(lhs < total);
            }
        }
    }
    let l = blob_labels([4, 4, 4], 99);
    let f = boundary_distance(&l, 0.3);
    let st = soften_targets(&l, &f, 3);
    let n = st.voxels();
    let boundary = (0..n).find(|&v| f.d[v] == 0.0).unwrap();
    for c in 0..3 {
        assert!((st.y[c * n + boundary] - 1.0 / 3.0).abs() < 1e-15);
    }
}

fn random_probs(shape: &[usize], seed: u64) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.01, 1.0, &mut rng(seed));
    let (b, k) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    for bi in 0..b {
        for v in 0..n {
            let s: f64 = (0..k).map(|c| t.data()[(bi * k + c) * n + v]).sum();
            for c in 0..k {
                t.data_mut()[(bi * k + c) * n + v] /= s;
            }
        }
    }
    t
}

#[test]
fn dice_and_tversky_match_hand_formulas() {
    let cfg = LossConfig::default();
    for seed in 0..20 {
        let shape = [1, 3, 4, 4, 4];
        let p = random_probs(&shape, seed);
        let y = random_probs(&shape, seed + 500);
        let cw = [0.7, 1.3, 2.1];
        let n = 64;
        let mut dice = 0.0;
        let mut tv = 0.0;
        for c in 0..3 {
            let (mut tp, mut fn_, mut fp, mut ps, mut ys) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for v in 0..n {
                let (pv, yv) = (p.data()[c * n + v], y.data()[c * n + v]);
                tp += pv * yv;
                fn_ += (1.0 - pv) * yv;
                fp += pv * (1.0 - yv);
                ps += pv;
                ys += yv;
            }
            dice += cw[c] * (1.0 - (2.0 * tp + cfg.eps) / (ps + ys + cfg.eps)) / 3.0;
            tv += (1.0 - (tp + cfg.eps) / (tp + 0.7 * fn_ + 0.3 * fp + cfg.eps)) / 3.0;
        }
        let mut g = Graph::default();
        let pv = g.leaf(p, false);
        let d = dice_loss(&mut g, pv, &y, &cw, cfg.eps).unwrap();
        let t = tversky_loss(&mut g, pv, &y, 0.7, 0.3, cfg.eps).unwrap();
        assert!((g.value(d).item() - dice).abs() < 1e-12);
        assert!((g.value(t).item() - tv).abs() < 1e-12);
    }
}

#[test]
fn symmetric_tversky_is_unweighted_dice() {
    for seed in 0..20 {
        let shape = [2, 3, 3, 3, 3];
        let p = random_probs(&shape, seed);
        let y = random_probs(&shape, seed + 77);
        let mut g = Graph::default();
        let pv = g.leaf(p, false);
        let d = dice_terms(&mut g, pv, &y, 0.0).unwrap();
        let t = tversky_terms(&mut g, pv, &y, 0.5, 0.5, 0.0).unwrap();
        assert_eq!(g.shape(d), &[3]);
        assert!(g.value(d).max_abs_diff(g.value(t)) < 1e-12);
    }
}

#[test]
fn closed_form_cases() {
    // Single voxel, p_t = 0.5.
    let mut g = Graph::default();
    let logits = g.leaf(Tensor::new(&[1, 2, 1, 1, 1], vec![1.0, 1.0]).unwrap(), false);
    let f = focal_loss(&mut g, logits, &Tensor::new(&[1, 2, 1, 1, 1], vec![0.0, 1.0]).unwrap(), &Tensor::ones(&[1, 1, 1, 1, 1]), 2.0).unwrap();
    assert!((g.value(f).item() - 0.173_286_795_139_986_3).abs() < 1e-12);
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let l = blob_labels([6, 6, 6], seed);
        let mut g = Graph::default();
        let logits = g.leaf(Tensor::uniform(&[1, 3, 6, 6, 6], -2.0, 2.0, &mut rng(seed)), true);
        let terms = total_loss(&mut g, logits, &[l], &cfg).unwrap();
        let b = terms.bundle(&g, &cfg);
        assert_eq!(b.total, 1.0 * b.dice + 0.5 * b.tversky + 0.5 * b.focal);
        assert!(b.total >= 0.0);
    }
}

#[test]
fn perfect_prediction_is_near_zero() {
    let cfg = LossConfig::default();
    let margin = 60.0;
    // Uniform volume: no boundary, so targets are one-hot everywhere.
    let l = LabelVolume::new([8, 8, 8], vec![1; 512], default_class_names()).unwrap();
    let logits_t = Tensor::from_fn(&[1, 3, 8, 8, 8], |i| if i / 512 == 1 { margin } else { 0.0 });
    let mut g = Graph::default();
    let logits = g.leaf(logits_t, false);
    let b = total_loss(&mut g, logits, &[l], &cfg).unwrap().bundle(&g, &cfg);
    assert!(b.dice < 1e-3 && b.tversky < 1e-3 && b.focal < 1e-3 && b.total < 1e-3, "{b:?}");

    // Multi-class volume scored against its hard targets.
    let l = blob_labels([8, 8, 8], 3);
    let t = prepare_targets(std::slice::from_ref(&l), 3, &cfg).unwrap();
    let mut g = Graph::default();
    let logits = g.leaf(t.hard.map(|h| h * margin), false);
    let p = g.softmax(logits, 1).unwrap();
    let d = dice_loss(&mut g, p, &t.hard, &t.class_weights, cfg.eps).unwrap();
    let tv = tversky_loss(&mut g, p, &t.hard, 0.7, 0.3, cfg.eps).unwrap();
    let f = focal_loss(&mut g, logits, &t.hard, &t.weights, 2.0).unwrap();
    for v in [d, tv, f] {
        assert!(g.value(v).item() < 1e-6);
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let cfg = LossConfig {
        delta: 1.5,
        ..LossConfig::default()
    };
    for seed in 0..20 {
        let l = blob_labels([3, 4, 4], seed);
        let logits = Tensor::uniform(&[1, 3, 3, 4, 4], -2.0, 2.0, &mut rng(seed + 1));
        let err = gradcheck(&[logits], 1e-4, Mode::Eval, |g, v| total_loss(g, v[0], std::slice::from_ref(&l), &cfg).unwrap().total);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_equivariant_to_class_relabeling(seed in 0u64..10_000, perm_idx in 0usize..6) {
        let perms = [[0u8, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_idx];
        let cfg = LossConfig::default();
        let l = blob_labels([4, 5, 5], seed);
        let logits = Tensor::uniform(&[1, 3, 4, 5, 5], -2.0, 2.0, &mut rng(seed));
        let mut permuted_logits = logits.clone();
        let n = 100;
        for c in 0..3 {
            let dst = perm[c] as usize;
            permuted_logits.data_mut()[dst * n..(dst + 1) * n].copy_from_slice(&logits.data()[c * n..(c + 1) * n]);
        }
        let relabeled = LabelVolume { labels: l.labels.iter().map(|&x| perm[x as usize]).collect(), ..l.clone() };
        let eval = |t: Tensor, lab: &LabelVolume| {
            let mut g = Graph::default();
            let v = g.leaf(t, false);
            total_loss(&mut g, v, std::slice::from_ref(lab), &cfg).unwrap().bundle(&g, &cfg).total
        };
        let a = eval(logits, &l);
        let b = eval(permuted_logits, &relabeled);
        prop_assert!((a - b).abs() < 1e-12);
    }
}
