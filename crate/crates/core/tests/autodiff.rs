mod common;

use common::grad_cases::{self, positive_t, rand_t, Cases, SEEDS};
use samamba_core::autodiff::{conv_out_extent, ConvSpec};
use samamba_core::{Graph, Tensor};

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let [b, cin, d, h, w] = <[usize; 5]>::try_from(x.shape()).unwrap();
    let [cout, cin_g, kd, kh, kw] = <[usize; 5]>::try_from(k.shape()).unwrap();
    let od = (d + 2 * pad - kd) / stride + 1;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[b, cout, od, oh, ow]);
    for bi in 0..b {
        for co in 0..cout {
            let grp = co / cout_g;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let c_in = grp * cin_g + ci;
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let iz = (oz * stride + a) as isize - pad as isize;
                                        let iy = (oy * stride + bb) as isize - pad as isize;
                                        let ix = (ox * stride + c) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (((bi * cin + c_in) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let ki = (((co * cin_g + ci) * kd + a) * kh + bb) * kw + c;
                                        acc += x.data()[xi] * k.data()[ki];
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((bi * cout + co) * od + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    let _ = cin;
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_t(&[4, 5], 1);
    let b = rand_t(&[5, 3], 2);
    let mut want = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            for p in 0..5 {
                want[i * 3 + j] += a.data()[i * 5 + p] * b.data()[p * 3 + j];
            }
        }
    }
    let mut g = Graph::default();
    let (av, bv) = (g.leaf(a, false), g.leaf(b, false));
    let c = g.matmul(av, bv).unwrap();
    let want = Tensor::new(&[4, 3], want).unwrap();
    assert!(g.value(c).max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv3d_matches_loop_oracle_exhaustively() {
    let mut seed = 100;
    let mut cases = 0;
    for b in 1..=2 {
        for cin in 1..=3 {
            for d in 1..=4 {
                for h in 1..=5 {
                    for w in 1..=6 {
                        for k in 1..=3 {
                            for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
                                if [d, h, w].iter().any(|&e| conv_out_extent(e, k, stride, pad).is_none()) {
                                    continue;
                                }
                                seed += 1;
                                let x = rand_t(&[b, cin, d, h, w], seed);
                                let kern = rand_t(&[2, cin, k, k, k], seed + 7919);
                                let want = naive_conv(&x, &kern, stride, pad, 1);
                                let mut g = Graph::default();
                                let (xv, kv) = (g.leaf(x, false), g.leaf(kern, false));
                                let y = g.conv3d(xv, kv, None, ConvSpec::new(stride, pad)).unwrap();
                                assert!(g.value(y).max_abs_diff(&want) < 1e-10, "b{b} c{cin} {d}x{h}x{w} k{k} s{stride} p{pad}");
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 2000);
}

#[test]
fn conv3d_large_volumes_match_oracle_and_adjoint() {
    // Big enough that the im2col work is split into several chunks, with chunk
    // edges falling inside output rows.
    for (seed, xs, ks, stride, pad) in [
        (1, [1, 2, 26, 25, 24], [3, 2, 3, 3, 3], 1, 1),
        (2, [2, 8, 30, 29, 28], [4, 8, 3, 3, 3], 2, 1),
        (3, [1, 3, 20, 21, 22], [2, 3, 2, 3, 2], 1, 0),
    ] {
        let x = rand_t(&xs, seed);
        let kern = rand_t(&ks, seed + 10);
        let want = naive_conv(&x, &kern, stride, pad, 1);
        let mut g = Graph::default();
        let (xv, kv) = (g.leaf(x.clone(), true), g.leaf(kern.clone(), true));
        let y = g.conv3d(xv, kv, None, ConvSpec::new(stride, pad)).unwrap();
        assert!(g.value(y).max_abs_diff(&want) < 1e-10, "case {seed}");
        // y is bilinear in (x, k), so <y, gy> = <x, dx> = <k, dk>.
        let gy = rand_t(g.shape(y), seed + 20);
        let p = g.constant(gy.clone());
        let prod = g.mul(y, p).unwrap();
        let s = g.sum_all(prod);
        let total = g.value(s).item();
        let grads = g.backward(s).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
        let via_x = dot(&x, grads.get(xv).unwrap());
        let via_k = dot(&kern, grads.get(kv).unwrap());
        assert!((via_x - total).abs() <= 1e-9 * total.abs().max(1.0), "case {seed}: {via_x} vs {total}");
        assert!((via_k - total).abs() <= 1e-9 * total.abs().max(1.0), "case {seed}: {via_k} vs {total}");
    }
}

#[test]
fn grouped_conv_matches_loop_oracle() {
    for seed in 0..SEEDS {
        let x = rand_t(&[2, 4, 3, 4, 5], seed);
        let kern = rand_t(&[4, 1, 3, 3, 3], seed + 50);
        let want = naive_conv(&x, &kern, 1, 1, 4);
        let mut g = Graph::default();
        let (xv, kv) = (g.leaf(x, false), g.leaf(kern, false));
        let y = g.conv3d(xv, kv, None, ConvSpec::depthwise(3, 4)).unwrap();
        assert!(g.value(y).max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn attention_matches_formula() {
    let (q, k, v) = (rand_t(&[3, 4], 11), rand_t(&[3, 4], 12), rand_t(&[3, 4], 13));
    let mut want = vec![0.0; 12];
    for i in 0..3 {
        let scores: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|p| q.data()[i * 4 + p] * k.data()[j * 4 + p]).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..3 {
            let wgt = scores[j].exp() / z;
            for p in 0..4 {
                want[i * 4 + p] += wgt * v.data()[j * 4 + p];
            }
        }
    }
    let mut g = Graph::default();
    let (qv, kv, vv) = (g.leaf(q, false), g.leaf(k, false), g.leaf(v, false));
    let o = g.attention(qv, kv, vv).unwrap();
    let want = Tensor::new(&[3, 4], want).unwrap();
    assert!(g.value(o).max_abs_diff(&want) < 1e-12);
}

#[test]
fn attention_rows_are_convex_combinations() {
    let (q, k, v) = (rand_t(&[5, 3], 21), rand_t(&[5, 3], 22), rand_t(&[5, 3], 23));
    let mut g = Graph::default();
    let (qv, kv, vv) = (g.leaf(q, false), g.leaf(k, false), g.leaf(v.clone(), false));
    let o = g.attention(qv, kv, vv).unwrap();
    for col in 0..3 {
        let column: Vec<f64> = (0..5).map(|r| v.data()[r * 3 + col]).collect();
        let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for r in 0..5 {
            let x = g.value(o).data()[r * 3 + col];
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }
}

#[test]
fn softmax_sums_to_one_and_is_shift_invariant() {
    for seed in 0..SEEDS {
        let x = rand_t(&[3, 7], seed).map(|v| v * 30.0);
        let mut g = Graph::default();
        let xv = g.leaf(x.clone(), false);
        let s = g.softmax(xv, 1).unwrap();
        let shifted = g.leaf(x.map(|v| v + 123.0), false);
        let s2 = g.softmax(shifted, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(s).data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(g.value(s).data().iter().all(|&p| p > 0.0));
        assert!(g.value(s).max_abs_diff(g.value(s2)) < 1e-12);
    }
}

#[test]
fn layer_norm_rows_are_centered() {
    for seed in 0..SEEDS {
        let x = rand_t(&[4, 9], seed).map(|v| 5.0 + 3.0 * v);
        let mut g = Graph::default();
        let xv = g.leaf(x, false);
        let gain = g.leaf(Tensor::ones(&[9]), false);
        let bias = g.leaf(Tensor::zeros(&[9]), false);
        let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
        for r in 0..4 {
            let row = &g.value(y).data()[r * 9..(r + 1) * 9];
            let mean: f64 = row.iter().sum::<f64>() / 9.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

fn run(group: fn(&mut Cases)) {
    let mut cases = Cases::default();
    group(&mut cases);
    for c in &cases.0 {
        for seed in 0..SEEDS {
            let err = c.error(seed);
            assert!(err < c.tol, "{}: seed {seed} relative error {err:e}", c.name);
        }
    }
}

#[test]
fn gradients_elementwise() {
    run(grad_cases::elementwise);
}

#[test]
fn gradients_reductions_and_shapes() {
    run(grad_cases::reductions_and_shapes);
}

#[test]
fn gradients_linear_algebra() {
    run(grad_cases::linear_algebra);
}

#[test]
fn gradients_volumetric() {
    run(grad_cases::volumetric);
}

#[test]
fn gradients_selective_scan() {
    run(grad_cases::selective_scan);
}

#[test]
fn backward_is_bit_deterministic() {
    let build = || {
        let mut g = Graph::default();
        let x = g.leaf(rand_t(&[1, 2, 4, 4, 4], 5), true);
        let k = g.leaf(rand_t(&[3, 2, 3, 3, 3], 6), true);
        let y = g.conv3d(x, k, None, ConvSpec::same(3)).unwrap();
        let y = g.gelu(y);
        let s = g.softmax(y, 1).unwrap();
        let l = g.mean_all(s);
        let l = g.square(l);
        let grads = g.backward(l).unwrap();
        (grads.get(x).unwrap().clone(), grads.get(k).unwrap().clone())
    };
    let (a1, b1) = build();
    let (a2, b2) = build();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
}

#[test]
fn scan_independent_of_worker_count() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut g = Graph::default();
            let u = g.leaf(rand_t(&[1, 300, 4], 1), false);
            let d = g.leaf(positive_t(&[1, 300, 4], 2).map(|x| 0.1 * x), false);
            let a = g.leaf(positive_t(&[4, 3], 3).map(|x| -x), false);
            let b = g.leaf(rand_t(&[1, 300, 3], 4), false);
            let c = g.leaf(rand_t(&[1, 300, 3], 5), false);
            let y = g.selective_scan(u, d, a, b, c).unwrap();
            g.value(y).clone()
        })
    };
    let single = run(1);
    for threads in [2, 4] {
        assert!((run(threads).max_abs_diff(&single)) < 1e-12);
    }
}
