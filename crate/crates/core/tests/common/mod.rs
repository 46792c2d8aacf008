#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samamba_core::{Graph, Mode, Tensor, Var};

pub mod grad_cases;
pub mod oracles;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, 0 when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares analytic gradients of `sum(f(inputs) * probe)` against central
/// differences with step `h`. Returns the worst norm-wise relative error.
///
/// `f` is re-run on a fresh graph for every perturbation, so stochastic ops
/// see the same seeded mask each time.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, mode: Mode, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let probe_seed = 0xfeed;
    let eval = |vals: &[Tensor], with_grad: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new(mode, 7);
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let out = f(&mut g, &vars);
        let probe = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng(probe_seed));
        let p = g.constant(probe);
        let prod = g.mul(out, p).unwrap();
        let s = g.sum_all(prod);
        let value = g.value(s).item();
        if !with_grad {
            return (value, Vec::new());
        }
        let grads = g.backward(s).unwrap();
        (value, vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect())
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Tensor::zeros(input.shape());
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fp = eval(&plus, false).0;
            let fm = eval(&minus, false).0;
            numeric.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}
