//! Shape manipulation: reshape, permute, concat, narrow, pad, row gather/scatter.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

/// Flat index in `outer` of every element of a box of shape `inner` placed at `offset`.
fn embed_map(inner: &[usize], outer: &[usize], offset: &[usize]) -> Vec<usize> {
    let os = strides(outer);
    let n: usize = inner.iter().product();
    let rank = inner.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos: usize = offset.iter().zip(&os).map(|(o, s)| o * s).sum();
    for _ in 0..n {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += os[d];
            if idx[d] < inner[d] {
                break;
            }
            pos -= os[d] * inner[d];
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        out.push(data[pos]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Graph {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(|g, inputs, _, _| {
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), g.data().to_vec()))]
            }),
            "reshape",
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(move |g, _, _, _| {
                let (data, shape) = permute_data(g.data(), g.shape(), &inverse);
                vec![Some(Tensor::from_parts(shape, data))]
            }),
            "permute",
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            parts,
            Box::new(move |g, inputs, _, needs| {
                let gd = g.data();
                let mut grads: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|&w| Vec::with_capacity(outer * w * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, &w) in grads.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&gd[pos..pos + w * inner]);
                        pos += w * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inputs)
                    .zip(needs)
                    .map(|((d, t), &need)| need.then(|| Tensor::from_parts(t.shape().to_vec(), d)))
                    .collect()
            }),
            "concat",
        ))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut offset = vec![0; shape.len()];
        offset[axis] = start;
        let map = embed_map(&out_shape, &shape, &offset);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(move |g, inputs, _, _| {
                let mut out = Tensor::zeros(inputs[0].shape());
                let buf = out.data_mut();
                for (&i, v) in map.iter().zip(g.data()) {
                    buf[i] = *v;
                }
                vec![Some(out)]
            }),
            "narrow",
        ))
    }

    /// Zero padding; `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if pads.len() != shape.len() {
            return Err(Error::dim("pad", format!("{} pads for rank {}", pads.len(), shape.len())));
        }
        let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(d, (b, e))| d + b + e).collect();
        let offset: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let map = embed_map(&shape, &out_shape, &offset);
        let mut out = Tensor::zeros(&out_shape);
        {
            let buf = out.data_mut();
            for (&i, v) in map.iter().zip(self.value(a).data()) {
                buf[i] = *v;
            }
        }
        Ok(self.push(
            out,
            &[a],
            Box::new(move |g, inputs, _, _| {
                let gd = g.data();
                let data = map.iter().map(|&i| gd[i]).collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
            }),
            "pad",
        ))
    }

    /// Selects rows of a `[n, c]` matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::dim("gather_rows", format!("rows out of range for {shape:?}")));
        }
        let c = shape[1];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let rows = rows.to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], data),
            &[a],
            Box::new(move |g, inputs, _, _| {
                let mut out = Tensor::zeros(inputs[0].shape());
                let buf = out.data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        buf[r * c + j] += g.data()[k * c + j];
                    }
                }
                vec![Some(out)]
            }),
            "gather_rows",
        ))
    }

    /// Places the rows of `a` at `rows` of an `[n, c]` zero matrix.
    pub fn scatter_rows(&mut self, a: Var, rows: &[usize], n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != rows.len() || rows.iter().any(|&r| r >= n) {
            return Err(Error::dim("scatter_rows", format!("{} rows into {n} for {shape:?}", rows.len())));
        }
        let c = shape[1];
        let mut out = Tensor::zeros(&[n, c]);
        {
            let buf = out.data_mut();
            let src = self.value(a).data();
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..c {
                    buf[r * c + j] += src[k * c + j];
                }
            }
        }
        let rows = rows.to_vec();
        Ok(self.push(
            out,
            &[a],
            Box::new(move |g, _, _, _| {
                let mut data = Vec::with_capacity(rows.len() * c);
                for &r in &rows {
                    data.extend_from_slice(&g.data()[r * c..(r + 1) * c]);
                }
                vec![Some(Tensor::from_parts(vec![rows.len(), c], data))]
            }),
            "scatter_rows",
        ))
    }
}
