//! Finite-difference cases for every differentiable primitive.

use samamba_core::autodiff::ConvSpec;
use samamba_core::{Graph, Mode, Tensor, Var};

use super::{gradcheck, rng};

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;
pub const SMOOTH_TOL: f64 = 1e-6;
pub const H: f64 = 1e-4;

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn positive_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, &mut rng(seed))
}

type Make = Box<dyn Fn(u64) -> Vec<Tensor>>;
type Op = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    mode: Mode,
    make: Make,
    f: Op,
}

impl GradCase {
    /// Worst relative error over the inputs drawn from `seed`.
    pub fn error(&self, seed: u64) -> f64 {
        gradcheck(&(self.make)(seed), H, self.mode, &self.f)
    }
}

#[derive(Default)]
pub struct Cases(pub Vec<GradCase>);

impl Cases {
    pub fn add(
        &mut self,
        name: &'static str,
        tol: f64,
        mode: Mode,
        make: impl Fn(u64) -> Vec<Tensor> + 'static,
        f: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
    ) {
        self.0.push(GradCase {
            name,
            tol,
            mode,
            make: Box::new(make),
            f: Box::new(f),
        });
    }
}

/// Every group, in a fixed order.
pub fn all() -> Cases {
    let mut cases = Cases::default();
    for group in [elementwise, reductions_and_shapes, linear_algebra, volumetric, selective_scan] {
        group(&mut cases);
    }
    cases
}

pub fn elementwise(cases: &mut Cases) {
    cases.add("add_broadcast", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3], s), rand_t(&[3], s + 99)], |g, v| g.add(v[0], v[1]).unwrap());
    cases.add("sub_broadcast", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 1, 3], s), rand_t(&[4, 1], s + 99)], |g, v| g.sub(v[0], v[1]).unwrap());
    cases.add("mul_broadcast", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3], s), rand_t(&[2, 1], s + 99)], |g, v| g.mul(v[0], v[1]).unwrap());
    cases.add("div", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[5], s), positive_t(&[5], s + 99)], |g, v| g.div(v[0], v[1]).unwrap());
    cases.add("exp", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s)], |g, v| g.exp(v[0]));
    cases.add("log", SMOOTH_TOL, Mode::Eval, |s| vec![positive_t(&[6], s)], |g, v| g.log(v[0]));
    cases.add("sqrt", SMOOTH_TOL, Mode::Eval, |s| vec![positive_t(&[6], s)], |g, v| g.sqrt(v[0]));
    cases.add("square", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s)], |g, v| g.square(v[0]));
    cases.add("sigmoid", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s).map(|x| 4.0 * x)], |g, v| g.sigmoid(v[0]));
    cases.add("tanh", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s)], |g, v| g.tanh(v[0]));
    cases.add("gelu", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s).map(|x| 3.0 * x)], |g, v| g.gelu(v[0]));
    cases.add("silu", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s).map(|x| 3.0 * x)], |g, v| g.silu(v[0]));
    cases.add("softplus", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s).map(|x| 3.0 * x)], |g, v| g.softplus(v[0]));
    cases.add("scale_add_scalar", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[6], s)], |g, v| {
        let y = g.scale(v[0], -2.5);
        g.add_scalar(y, 0.3)
    });
    // Kinked ops: inputs kept away from the kink.
    let away = |s| vec![rand_t(&[8], s).map(|x| if x.abs() < 0.05 { x + 0.2 } else { x })];
    cases.add("abs", TOL, Mode::Eval, away, |g, v| g.abs(v[0]));
    cases.add("relu", TOL, Mode::Eval, away, |g, v| g.relu(v[0]));
}

pub fn reductions_and_shapes(cases: &mut Cases) {
    cases.add("sum_axes", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3, 4], s)], |g, v| g.sum_axes(v[0], &[0, 2], false).unwrap());
    cases.add("mean_axes", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3, 4], s)], |g, v| g.mean_axes(v[0], &[1], true).unwrap());
    cases.add("mean_all", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3], s)], |g, v| g.mean_all(v[0]));
    cases.add("reshape", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 6], s)], |g, v| g.reshape(v[0], &[3, 4]).unwrap());
    cases.add("permute", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3, 4], s)], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    cases.add("concat", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 1, 3], s), rand_t(&[2, 2, 3], s + 9)], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    cases.add("narrow", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[3, 5], s)], |g, v| g.narrow(v[0], 1, 1, 3).unwrap());
    cases.add("pad", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[1, 1, 2, 2, 2], s)], |g, v| g.pad(v[0], &[(0, 0), (0, 0), (1, 0), (0, 2), (1, 1)]).unwrap());
    cases.add("gather_rows", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[5, 3], s)], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    cases.add("scatter_rows", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3], s)], |g, v| g.scatter_rows(v[0], &[3, 1], 5).unwrap());
}

pub fn linear_algebra(cases: &mut Cases) {
    cases.add("matmul", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[3, 4], s), rand_t(&[4, 2], s + 9)], |g, v| g.matmul(v[0], v[1]).unwrap());
    cases.add("bmm", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3, 4], s), rand_t(&[2, 4, 2], s + 9)], |g, v| g.bmm(v[0], v[1]).unwrap());
    cases.add("linear", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3, 4], s), rand_t(&[4, 5], s + 9), rand_t(&[5], s + 19)], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
    cases.add("softmax", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 4, 3], s).map(|x| 3.0 * x)], |g, v| g.softmax(v[0], 1).unwrap());
    cases.add("log_softmax", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 4, 3], s).map(|x| 3.0 * x)], |g, v| g.log_softmax(v[0], 1).unwrap());
    cases.add("layer_norm", TOL, Mode::Eval, |s| vec![rand_t(&[3, 5], s), rand_t(&[5], s + 9), rand_t(&[5], s + 19)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    cases.add("attention", TOL, Mode::Eval, |s| vec![rand_t(&[4, 3], s), rand_t(&[4, 3], s + 9), rand_t(&[4, 3], s + 19)], |g, v| g.attention(v[0], v[1], v[2]).unwrap());
    cases.add("batched_attention", TOL, Mode::Eval, |s| vec![rand_t(&[2, 4, 3], s), rand_t(&[2, 5, 3], s + 9), rand_t(&[2, 5, 2], s + 19)], |g, v| g.batched_attention(v[0], v[1], v[2]).unwrap());
}

pub fn volumetric(cases: &mut Cases) {
    cases.add("conv3d", TOL, Mode::Eval, |s| vec![rand_t(&[2, 2, 3, 4, 3], s), rand_t(&[3, 2, 3, 3, 3], s + 9), rand_t(&[3], s + 19)], |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::same(3)).unwrap()
    });
    cases.add("conv3d_strided", TOL, Mode::Eval, |s| vec![rand_t(&[1, 2, 4, 4, 4], s), rand_t(&[2, 2, 2, 2, 2], s + 9)], |g, v| {
        g.conv3d(v[0], v[1], None, ConvSpec::new(2, 0)).unwrap()
    });
    cases.add("conv3d_pointwise", TOL, Mode::Eval, |s| vec![rand_t(&[2, 3, 2, 2, 2], s), rand_t(&[2, 3, 1, 1, 1], s + 9)], |g, v| {
        g.conv3d(v[0], v[1], None, ConvSpec::new(1, 0)).unwrap()
    });
    cases.add("conv3d_depthwise", TOL, Mode::Eval, |s| vec![rand_t(&[1, 3, 3, 3, 3], s), rand_t(&[3, 1, 3, 3, 3], s + 9)], |g, v| {
        g.conv3d(v[0], v[1], None, ConvSpec::depthwise(3, 3)).unwrap()
    });
    cases.add("avg_pool3d", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[1, 2, 4, 2, 4], s)], |g, v| g.avg_pool3d(v[0], 2).unwrap());
    cases.add("max_pool3d", TOL, Mode::Eval, |s| vec![rand_t(&[1, 2, 4, 2, 4], s)], |g, v| g.max_pool3d(v[0], 2).unwrap());
    cases.add("global_avg_pool", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 3, 2, 2, 2], s)], |g, v| g.global_avg_pool(v[0]).unwrap());
    cases.add("upsample_nearest", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[1, 2, 2, 1, 2], s)], |g, v| g.upsample_nearest(v[0], 2).unwrap());
    cases.add("resize_trilinear", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[1, 2, 2, 3, 2], s)], |g, v| g.resize_trilinear(v[0], [4, 5, 3]).unwrap());
    cases.add("dropout_train", SMOOTH_TOL, Mode::Train, |s| vec![rand_t(&[20], s)], |g, v| g.dropout(v[0], 0.3).unwrap());
    cases.add("causal_conv1d", SMOOTH_TOL, Mode::Eval, |s| vec![rand_t(&[2, 6, 3], s), rand_t(&[3, 4], s + 9), rand_t(&[3], s + 19)], |g, v| {
        g.causal_conv1d(v[0], v[1], v[2]).unwrap()
    });
}

pub fn selective_scan(cases: &mut Cases) {
    cases.add("selective_scan", TOL, Mode::Eval, |s| {
        vec![
            rand_t(&[2, 9, 3], s),
            positive_t(&[2, 9, 3], s + 1).map(|x| 0.2 * x),
            positive_t(&[3, 2], s + 2).map(|x| -x),
            rand_t(&[2, 9, 2], s + 3),
            rand_t(&[2, 9, 2], s + 4),
        ]
    }, |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4]).unwrap());
}
