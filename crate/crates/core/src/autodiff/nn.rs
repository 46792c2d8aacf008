//! Linear algebra and neural-network primitives.

use super::gemm::{gemm, Layout};
use super::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

impl Graph {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, 0.0, &mut out);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |g, inputs, _, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::Normal, inputs[1].data(), Layout::Transposed, 0.0, &mut d);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, inputs[0].data(), Layout::Transposed, g.data(), Layout::Normal, 0.0, &mut d);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }),
            "matmul",
        ))
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &xa[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &xb[i * k * n..(i + 1) * k * n],
                Layout::Normal,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![bs, m, n], out),
            &[a, b],
            Box::new(move |g, inputs, _, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            Layout::Normal,
                            &inputs[1].data()[i * k * n..(i + 1) * k * n],
                            Layout::Transposed,
                            0.0,
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                    Tensor::from_parts(vec![bs, m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &inputs[0].data()[i * m * k..(i + 1) * m * k],
                            Layout::Transposed,
                            &gd[i * m * n..(i + 1) * m * n],
                            Layout::Normal,
                            0.0,
                            &mut d[i * k * n..(i + 1) * k * n],
                        );
                    }
                    Tensor::from_parts(vec![bs, k, n], d)
                });
                vec![ga, gb]
            }),
            "bmm",
        ))
    }

    /// Affine map on the last axis: `x[.., in] . w[in, out] + bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let last = *shape.last().ok_or_else(|| Error::dim("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != last {
            return Err(Error::dim("linear", format!("input {shape:?} with weight {ws:?}")));
        }
        let rows = shape.iter().product::<usize>() / last.max(1);
        let flat = self.reshape(x, &[rows, last])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(a), axis, "softmax")?;
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(f64::NEG_INFINITY, |m, j| m.max(x[at(j)]));
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, y),
            &[a],
            Box::new(move |g, _, out, _| {
                let (gd, y) = (g.data(), out.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
            }),
            "softmax",
        ))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(a), axis, "log_softmax")?;
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(f64::NEG_INFINITY, |m, j| m.max(x[at(j)]));
                let lse = max + (0..len).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    y[at(j)] = x[at(j)] - lse;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, y),
            &[a],
            Box::new(move |g, _, out, _| {
                let (gd, y) = (g.data(), out.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| gd[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = gd[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
            }),
            "log_softmax",
        ))
    }

    /// Normalizes over the last axis, then applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim("layer_norm", format!("affine params must be [{c}]")));
        }
        let rows = self.value(x).numel() / c.max(1);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gd[j] + bd[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, y),
            &[x, gain, bias],
            Box::new(move |g, inputs, _, needs| {
                let gd = g.data();
                let gain = inputs[1].data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gd[r * c + j] * gain[j];
                            mean_d += d;
                            mean_dh += d * xhat[r * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            let d = gd[r * c + j] * gain[j];
                            dx[r * c + j] = inv_std[r] * (d - mean_d - xhat[r * c + j] * mean_dh);
                        }
                    }
                    Tensor::from_parts(inputs[0].shape().to_vec(), dx)
                });
                let dgain = needs[1].then(|| {
                    let mut d = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] += gd[r * c + j] * xhat[r * c + j];
                        }
                    }
                    Tensor::from_parts(vec![c], d)
                });
                let dbias = needs[2].then(|| {
                    let mut d = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] += gd[r * c + j];
                        }
                    }
                    Tensor::from_parts(vec![c], d)
                });
                vec![dx, dgain, dbias]
            }),
            "layer_norm",
        ))
    }

    /// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` for `[T, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::dim("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let kt = self.permute(k, &[1, 0])?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (sq[1] as f64).sqrt());
        let weights = self.softmax(scores, 1)?;
        self.matmul(weights, v)
    }

    /// Attention over `[B, T, d]` inputs, independently per batch element.
    pub fn batched_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[2] != sk[2] || sk[1] != sv[1] || sq[0] != sk[0] || sk[0] != sv[0] {
            return Err(Error::dim("batched_attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let kt = self.permute(k, &[0, 2, 1])?;
        let scores = self.bmm(q, kt)?;
        let scores = self.scale(scores, 1.0 / (sq[2] as f64).sqrt());
        let weights = self.softmax(scores, 2)?;
        self.bmm(weights, v)
    }

    /// Inverted dropout; identity in [`Mode::Eval`] or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode() == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng().gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            &[a],
            Box::new(move |g, _, _, _| {
                let d = g.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
            "dropout",
        ))
    }

    /// Non-overlapping average pooling with cubic window `k` on `[B, C, D, H, W]`.
    pub fn avg_pool3d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, d, h, w] = spatial_dims(self.shape(x), "avg_pool3d")?;
        if k == 0 || d % k != 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim("avg_pool3d", format!("extents {d}x{h}x{w} not divisible by {k}")));
        }
        let (od, oh, ow) = (d / k, h / k, w / k);
        let norm = 1.0 / (k * k * k) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * od * oh * ow];
        for bc in 0..b * c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((bc * od + z / k) * oh + y / k) * ow + xx / k;
                        out[o] += xd[((bc * d + z) * h + y) * w + xx] * norm;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, od, oh, ow], out),
            &[x],
            Box::new(move |g, inputs, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; b * c * d * h * w];
                for bc in 0..b * c {
                    for z in 0..d {
                        for y in 0..h {
                            for xx in 0..w {
                                let o = ((bc * od + z / k) * oh + y / k) * ow + xx / k;
                                dx[((bc * d + z) * h + y) * w + xx] = gd[o] * norm;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
            }),
            "avg_pool3d",
        ))
    }

    /// Non-overlapping max pooling; ties resolve to the first voxel in z-major order.
    pub fn max_pool3d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, d, h, w] = spatial_dims(self.shape(x), "max_pool3d")?;
        if k == 0 || d % k != 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim("max_pool3d", format!("extents {d}x{h}x{w} not divisible by {k}")));
        }
        let (od, oh, ow) = (d / k, h / k, w / k);
        let xd = self.value(x).data();
        let n_out = b * c * od * oh * ow;
        let mut out = vec![f64::NEG_INFINITY; n_out];
        let mut arg = vec![0usize; n_out];
        for bc in 0..b * c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((bc * od + z / k) * oh + y / k) * ow + xx / k;
                        let i = ((bc * d + z) * h + y) * w + xx;
                        if xd[i] > out[o] {
                            out[o] = xd[i];
                            arg[o] = i;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, od, oh, ow], out),
            &[x],
            Box::new(move |g, inputs, _, _| {
                let mut dx = Tensor::zeros(inputs[0].shape());
                let buf = dx.data_mut();
                for (o, &i) in arg.iter().enumerate() {
                    buf[i] += g.data()[o];
                }
                vec![Some(dx)]
            }),
            "max_pool3d",
        ))
    }

    /// Mean over the spatial axes of `[B, C, D, H, W]`, giving `[B, C]`.
    ///
    /// Values are summed in sorted order, so any spatial permutation gives the same bits.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, d, h, w] = spatial_dims(self.shape(x), "global_avg_pool")?;
        let n = d * h * w;
        let xd = self.value(x).data();
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; b * c];
        for (o, slot) in out.iter_mut().enumerate() {
            buf.copy_from_slice(&xd[o * n..(o + 1) * n]);
            buf.sort_unstable_by(f64::total_cmp);
            *slot = buf.iter().sum::<f64>() / n as f64;
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c], out),
            &[x],
            Box::new(move |g, inputs, _, _| {
                let inv = 1.0 / n as f64;
                let gd = g.data();
                let dx = (0..b * c * n).map(|i| gd[i / n] * inv).collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
            }),
            "global_avg_pool",
        ))
    }

    /// Causal depthwise 1-D convolution along `T` of `[B, T, C]` with kernel `[C, k]`.
    ///
    /// `y[t, c] = bias[c] + sum_j w[c, j] * x[t - (k - 1) + j, c]`, zero before the start.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || self.shape(bias) != [sx[2]] {
            return Err(Error::dim("causal_conv1d", format!("x {sx:?}, w {sw:?}")));
        }
        let (b, t, c, k) = (sx[0], sx[1], sx[2], sw[1]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(bias).data());
        let mut y = vec![0.0; b * t * c];
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    let mut acc = bd[ci];
                    for j in 0..k {
                        let src = ti + j;
                        if src >= k - 1 {
                            acc += wd[ci * k + j] * xd[(bi * t + src - (k - 1)) * c + ci];
                        }
                    }
                    y[(bi * t + ti) * c + ci] = acc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(sx, y),
            &[x, w, bias],
            Box::new(move |g, inputs, _, needs| {
                let (gd, xd, wd) = (g.data(), inputs[0].data(), inputs[1].data());
                let mut dx = vec![0.0; b * t * c];
                let mut dw = vec![0.0; c * k];
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ti in 0..t {
                        for ci in 0..c {
                            let go = gd[(bi * t + ti) * c + ci];
                            db[ci] += go;
                            for j in 0..k {
                                let src = ti + j;
                                if src >= k - 1 {
                                    let xi = (bi * t + src - (k - 1)) * c + ci;
                                    dx[xi] += wd[ci * k + j] * go;
                                    dw[ci * k + j] += xd[xi] * go;
                                }
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(vec![b, t, c], dx)),
                    needs[1].then(|| Tensor::from_parts(vec![c, k], dw)),
                    needs[2].then(|| Tensor::from_parts(vec![c], db)),
                ]
            }),
            "causal_conv1d",
        ))
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn spatial_dims(shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape).map_err(|_| Error::dim(op, format!("expected [B, C, D, H, W], got {shape:?}")))
}
