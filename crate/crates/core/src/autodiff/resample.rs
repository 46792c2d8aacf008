//! Separable resampling along spatial axes (nearest and trilinear).

use super::nn::{spatial_dims, split_axis};
use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Two-tap interpolation weights `((i0, w0), (i1, w1))` per output index.
type Taps = Vec<((usize, f64), (usize, f64))>;

fn linear_taps(input: usize, output: usize) -> Taps {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            ((i0, 1.0 - l1), (i1, l1))
        })
        .collect()
}

fn nearest_taps(input: usize, output: usize) -> Taps {
    (0..output)
        .map(|o| {
            let i = (o * input / output).min(input - 1);
            ((i, 1.0), (i, 0.0))
        })
        .collect()
}

impl Graph {
    fn interp_axis(&mut self, x: Var, axis: usize, taps: Taps) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis, "interp_axis")?;
        let out_len = taps.len();
        let xd = self.value(x).data();
        let mut y = vec![0.0; outer * out_len * inner];
        for o in 0..outer {
            for (j, &((i0, w0), (i1, w1))) in taps.iter().enumerate() {
                let dst = (o * out_len + j) * inner;
                let s0 = (o * len + i0) * inner;
                let s1 = (o * len + i1) * inner;
                for i in 0..inner {
                    y[dst + i] = w0 * xd[s0 + i] + w1 * xd[s1 + i];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = out_len;
        Ok(self.push(
            Tensor::from_parts(shape, y),
            &[x],
            Box::new(move |g, inputs, _, _| {
                let gd = g.data();
                let mut dx = vec![0.0; inputs[0].numel()];
                for o in 0..outer {
                    for (j, &((i0, w0), (i1, w1))) in taps.iter().enumerate() {
                        let src = (o * out_len + j) * inner;
                        let d0 = (o * len + i0) * inner;
                        let d1 = (o * len + i1) * inner;
                        for i in 0..inner {
                            dx[d0 + i] += w0 * gd[src + i];
                            dx[d1 + i] += w1 * gd[src + i];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
            }),
            "interp_axis",
        ))
    }

    fn resize_with(&mut self, x: Var, size: [usize; 3], taps: fn(usize, usize) -> Taps, op: &'static str) -> Result<Var> {
        let [_, _, d, h, w] = spatial_dims(self.shape(x), op)?;
        if size.iter().any(|&s| s == 0) || [d, h, w].iter().any(|&s| s == 0) {
            return Err(Error::dim(op, format!("cannot resize {d}x{h}x{w} to {size:?}")));
        }
        let mut y = x;
        for (axis, (&from, &to)) in [d, h, w].iter().zip(&size).enumerate() {
            if from != to {
                y = self.interp_axis(y, axis + 2, taps(from, to))?;
            }
        }
        Ok(y)
    }

    /// Trilinear resize of `[B, C, D, H, W]` (half-pixel centers, edge clamped).
    pub fn resize_trilinear(&mut self, x: Var, size: [usize; 3]) -> Result<Var> {
        self.resize_with(x, size, linear_taps, "resize_trilinear")
    }

    /// Nearest-neighbor resize of `[B, C, D, H, W]`.
    pub fn resize_nearest(&mut self, x: Var, size: [usize; 3]) -> Result<Var> {
        self.resize_with(x, size, nearest_taps, "resize_nearest")
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [_, _, d, h, w] = spatial_dims(self.shape(x), "upsample_nearest")?;
        self.resize_nearest(x, [d * factor, h * factor, w * factor])
    }

    /// Trilinear upsampling by an integer factor.
    pub fn upsample_trilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [_, _, d, h, w] = spatial_dims(self.shape(x), "upsample_trilinear")?;
        self.resize_trilinear(x, [d * factor, h * factor, w * factor])
    }
}
