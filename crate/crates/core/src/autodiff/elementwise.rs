//! Broadcasting arithmetic, pointwise nonlinearities and reductions.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source `inp`.
pub(crate) fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - inp.len();
    let mut in_strides = vec![0; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        in_strides[i + offset] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += in_strides[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= in_strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

fn scatter_sum(values: impl Iterator<Item = f64>, map: Option<&[usize]>, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let buf = out.data_mut();
    match map {
        Some(map) => {
            for (v, &i) in values.zip(map) {
                buf[i] += v;
            }
        }
        None => {
            for (dst, v) in buf.iter_mut().zip(values) {
                *dst = v;
            }
        }
    }
    out
}

type Partial = fn(f64, f64) -> f64;

impl Graph {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: Partial,
        db: Partial,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::dim(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let map_a = (sa != out_shape).then(|| broadcast_map(&out_shape, &sa));
        let map_b = (sb != out_shape).then(|| broadcast_map(&out_shape, &sb));
        let n: usize = out_shape.iter().product();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let at = |i: usize, m: &Option<Vec<usize>>| m.as_ref().map_or(i, |m| m[i]);
        let data: Vec<f64> = (0..n)
            .map(|i| f(xa[at(i, &map_a)], xb[at(i, &map_b)]))
            .collect();
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |g, inputs, _, needs| {
                let (xa, xb) = (inputs[0].data(), inputs[1].data());
                let gd = g.data();
                let at = |i: usize, m: &Option<Vec<usize>>| m.as_ref().map_or(i, |m| m[i]);
                let ga = needs[0].then(|| {
                    let vals = (0..gd.len()).map(|i| gd[i] * da(xa[at(i, &map_a)], xb[at(i, &map_b)]));
                    scatter_sum(vals, map_a.as_deref(), inputs[0].shape())
                });
                let gb = needs[1].then(|| {
                    let vals = (0..gd.len()).map(|i| gd[i] * db(xa[at(i, &map_a)], xb[at(i, &map_b)]));
                    scatter_sum(vals, map_b.as_deref(), inputs[1].shape())
                });
                vec![ga, gb]
            }),
            op,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    fn unary(&mut self, a: Var, op: &'static str, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(
            value,
            &[a],
            Box::new(move |g, inputs, out, _| {
                let x = inputs[0].data();
                let y = out.data();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * df(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
            op,
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, "neg", |x| -x, |_, _| -1.0)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(g.map(|x| x * c))]),
            "scale",
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, &[a], Box::new(|g, _, _, _| vec![Some(g.clone())]), "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", f64::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, "log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, "sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, "square", |x| x * x, |x, _| 2.0 * x)
    }

    /// `|x|`, with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, "gelu", gelu, |x, _| gelu_grad(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, "silu", |x| x * sigmoid(x), |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, "softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            &[a],
            Box::new(|g, inputs, _, _| vec![Some(Tensor::full(inputs[0].shape(), g.item()))]),
            "sum_all",
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axes`; with `keepdim` the reduced axes stay as extent 1.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::dim("sum_axes", format!("axis {bad} out of range for {shape:?}")));
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let map = broadcast_map(&shape, &kept);
        let mut out = vec![0.0; kept.iter().product()];
        for (x, &i) in self.value(a).data().iter().zip(&map) {
            out[i] += x;
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(
            value,
            &[a],
            Box::new(move |g, inputs, _, _| {
                let gd = g.data();
                let data = map.iter().map(|&i| gd[i]).collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
            }),
            "sum_axes",
        ))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(a);
        let count: usize = axes.iter().filter_map(|&ax| shape.get(ax)).product();
        let s = self.sum_axes(a, axes, keepdim)?;
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn broadcast_map_rows() {
        assert_eq!(broadcast_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn add_broadcast_gradient_reduces() {
        let mut g = Graph::default();
        let a = g.leaf(Tensor::ones(&[2, 3]), true);
        let b = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let s = g.sum_all(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mismatched_broadcast_is_dimension_error() {
        let mut g = Graph::default();
        let a = g.leaf(Tensor::ones(&[2, 3]), false);
        let b = g.leaf(Tensor::ones(&[2]), false);
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sum_axes_keepdim() {
        let mut g = Graph::default();
        let a = g.leaf(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(), false);
        let s = g.sum_axes(a, &[1], false).unwrap();
        assert_eq!(g.shape(s), &[2]);
        assert_eq!(g.value(s).data(), &[6.0, 15.0]);
        let s = g.sum_axes(a, &[0], true).unwrap();
        assert_eq!(g.shape(s), &[1, 3]);
        assert_eq!(g.value(s).data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
