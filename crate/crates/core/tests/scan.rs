mod common;

use common::oracles::{random_scan_case, sequential_scan};
use common::rng;
use samamba_core::autodiff::{selective_scan, ScanParams};
use samamba_core::Tensor;

#[test]
fn matches_sequential_oracle_on_200_cases() {
    for seed in 0..200 {
        let (u, p) = random_scan_case(seed);
        let got = selective_scan(&u, &p).unwrap();
        let want = sequential_scan(&u, &p);
        assert!(got.max_abs_diff(&want) < 1e-10, "case {seed}");
    }
}

#[test]
fn long_sequences_cross_chunk_boundaries() {
    let mut r = rng(9);
    let (t, c, n) = (517, 3, 4);
    let u = Tensor::uniform(&[t, c], -1.0, 1.0, &mut r);
    let p = ScanParams {
        a: Tensor::uniform(&[c, n], -0.2, -0.01, &mut r),
        b: Tensor::uniform(&[t, n], -1.0, 1.0, &mut r),
        c: Tensor::uniform(&[t, n], -1.0, 1.0, &mut r),
        delta: Tensor::uniform(&[t, c], 0.01, 0.2, &mut r),
    };
    assert!(selective_scan(&u, &p).unwrap().max_abs_diff(&sequential_scan(&u, &p)) < 1e-10);
}

#[test]
fn single_step_is_c_times_bbar_u() {
    let u = Tensor::new(&[1, 1], vec![2.0]).unwrap();
    let p = ScanParams {
        a: Tensor::new(&[1, 2], vec![-1.0, -3.0]).unwrap(),
        b: Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap(),
        c: Tensor::new(&[1, 2], vec![1.5, 2.0]).unwrap(),
        delta: Tensor::new(&[1, 1], vec![0.4]).unwrap(),
    };
    let y = selective_scan(&u, &p).unwrap();
    let want = 1.5 * (0.4 * 0.5 * 2.0) + 2.0 * (0.4 * -1.0 * 2.0);
    assert!((y.item() - want).abs() < 1e-15);
}

#[test]
fn zero_transition_is_memoryless() {
    let (u, mut p) = random_scan_case(3);
    p.a = p.a.map(|_| -1e6);
    let y = selective_scan(&u, &p).unwrap();
    let (t, c) = (u.shape()[0], u.shape()[1]);
    let n = p.a.shape()[1];
    for step in 0..t {
        for e in 0..c {
            let dt = p.delta.data()[step * c + e];
            let want: f64 = (0..n)
                .map(|s| p.c.data()[step * n + s] * dt * p.b.data()[step * n + s] * u.data()[step * c + e])
                .sum();
            assert!((y.data()[step * c + e] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_in_input_for_fixed_parameters() {
    for seed in 0..50 {
        let (u1, p) = random_scan_case(seed);
        let u2 = Tensor::uniform(u1.shape(), -1.0, 1.0, &mut rng(seed + 1000));
        let mut sum = u1.clone();
        sum.add_assign(&u2);
        let mut expected = selective_scan(&u1, &p).unwrap();
        expected.add_assign(&selective_scan(&u2, &p).unwrap());
        assert!(selective_scan(&sum, &p).unwrap().max_abs_diff(&expected) < 1e-10);
    }
}
