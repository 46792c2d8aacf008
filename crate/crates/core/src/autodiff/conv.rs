//! 3-D convolution via im2col and GEMM.

use super::gemm::{gemm, gemm_strided, Layout, Strided};
use super::nn::spatial_dims;
use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride, zero padding and channel grouping of a [`Graph::conv3d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    /// Same-size convolution for an odd kernel of side `k`.
    pub const fn same(k: usize) -> Self {
        Self::new(1, k / 2)
    }

    pub const fn depthwise(k: usize, channels: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: channels,
        }
    }
}

/// Output extent of a strided, padded window sweep, or `None` if the kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (kernel <= padded && stride >= 1).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    cout_g: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin_g * self.k[0] * self.k[1] * self.k[2]
    }

    fn positions(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    fn in_volume(&self) -> usize {
        self.inp[0] * self.inp[1] * self.inp[2]
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    /// Output positions per im2col chunk, sized to keep one chunk around 2 MB.
    fn chunk(&self) -> usize {
        (CHUNK_ELEMS / self.rows()).max(64).min(self.positions()).max(1)
    }

    /// Calls `f(row, tap, range)` for every kernel tap and every run of output
    /// positions in `q0..q1` that shares one output row. `range` is the part of
    /// the run inside the input, with its source offset, or `None` if the whole
    /// run falls in padding.
    fn for_each_run(&self, q0: usize, q1: usize, mut f: impl FnMut(usize, usize, usize, Option<(usize, usize, usize)>)) {
        let [d, h, w] = self.inp;
        let [_, oh, ow] = self.out;
        let (s, p) = (self.stride, self.pad);
        let [kd, kh, kw] = self.k;
        let inside = |o: usize, k: usize, n: usize| (o * s + k).checked_sub(p).filter(|&i| i < n);
        for r in 0..self.rows() {
            let (ci, kz, ky, kx) = (r / (kd * kh * kw), r / (kh * kw) % kd, r / kw % kh, r % kw);
            let mut q = q0;
            while q < q1 {
                let ox0 = q % ow;
                let (oy, oz) = (q / ow % oh, q / (ow * oh));
                let run = (ow - ox0).min(q1 - q);
                let rows = inside(oz, kz, d).zip(inside(oy, ky, h));
                let valid = rows.and_then(|(iz, iy)| {
                    // ox*s + kx - p in [0, w)
                    let lo = p.saturating_sub(kx).div_ceil(s).max(ox0);
                    let hi = ((w + p).saturating_sub(kx)).div_ceil(s).min(ox0 + run);
                    (lo < hi).then(|| (lo - ox0, hi - ox0, ((ci * d + iz) * h + iy) * w + lo * s + kx - p))
                });
                f(r, q - q0, run, valid);
                q += run;
            }
        }
    }

    /// Columns `q0..q1` of the im2col matrix of one group, as a `rows x (q1 - q0)` buffer.
    fn im2col(&self, x: &[f64], col: &mut [f64], q0: usize, q1: usize) {
        let len = q1 - q0;
        let s = self.stride;
        self.for_each_run(q0, q1, |r, at, run, valid| {
            let dst = &mut col[r * len + at..r * len + at + run];
            match valid {
                None => dst.fill(0.0),
                Some((lo, hi, src)) => {
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&x[src..src + hi - lo]);
                    } else {
                        for (j, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = x[src + j * s];
                        }
                    }
                }
            }
        });
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64], q0: usize, q1: usize) {
        let len = q1 - q0;
        let s = self.stride;
        self.for_each_run(q0, q1, |r, at, _, valid| {
            if let Some((lo, hi, src)) = valid {
                let from = &col[r * len + at + lo..r * len + at + hi];
                for (j, v) in from.iter().enumerate() {
                    dx[src + j * s] += v;
                }
            }
        });
    }
}

const CHUNK_ELEMS: usize = 1 << 18;

impl Graph {
    /// Cross-correlation of `x[B, Cin, D, H, W]` with `kernel[Cout, Cin / groups, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [b, cin, d, h, w] = spatial_dims(self.shape(x), "conv3d")?;
        let ks = self.shape(kernel).to_vec();
        let groups = spec.groups.max(1);
        if ks.len() != 5 || cin % groups != 0 || ks[0] % groups != 0 || ks[1] != cin / groups {
            return Err(Error::dim(
                "conv3d",
                format!("input channels {cin}, kernel {ks:?}, groups {groups}"),
            ));
        }
        if spec.stride == 0 {
            return Err(Error::dim("conv3d", "stride must be at least 1"));
        }
        let cout = ks[0];
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::dim("conv3d", format!("bias {:?} for {cout} outputs", self.shape(bv))));
            }
        }
        let extent = |i: usize, k: usize| {
            conv_out_extent(i, k, spec.stride, spec.padding).ok_or_else(|| {
                Error::dim("conv3d", format!("kernel {k} larger than padded extent {}", i + 2 * spec.padding))
            })
        };
        let out = [extent(d, ks[2])?, extent(h, ks[3])?, extent(w, ks[4])?];
        let geo = Geometry {
            cin_g: cin / groups,
            cout_g: cout / groups,
            inp: [d, h, w],
            k: [ks[2], ks[3], ks[4]],
            out,
            stride: spec.stride,
            pad: spec.padding,
        };
        let (rows, pos, vol) = (geo.rows(), geo.positions(), geo.in_volume());
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut y = vec![0.0; b * cout * pos];
        let chunk = geo.chunk();
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * chunk] };
        for bi in 0..b {
            for g in 0..groups {
                let xg = &xd[(bi * cin + g * geo.cin_g) * vol..(bi * cin + (g + 1) * geo.cin_g) * vol];
                let wg = &kd[g * geo.cout_g * rows..(g + 1) * geo.cout_g * rows];
                let yg = &mut y[(bi * cout + g * geo.cout_g) * pos..(bi * cout + (g + 1) * geo.cout_g) * pos];
                if geo.is_pointwise() {
                    gemm(geo.cout_g, rows, pos, wg, Layout::Normal, xg, Layout::Normal, 0.0, yg);
                    continue;
                }
                for q0 in (0..pos).step_by(chunk) {
                    let q1 = (q0 + chunk).min(pos);
                    let cols = &mut col[..rows * (q1 - q0)];
                    geo.im2col(xg, cols, q0, q1);
                    gemm_strided(geo.cout_g, rows, q1 - q0, Strided::rows(wg, rows), Strided::rows(cols, q1 - q0), 0.0, &mut yg[q0..], pos);
                }
            }
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for bi in 0..b {
                for co in 0..cout {
                    for v in &mut y[(bi * cout + co) * pos..(bi * cout + co + 1) * pos] {
                        *v += bd[co];
                    }
                }
            }
        }
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let value = Tensor::from_parts(vec![b, cout, out[0], out[1], out[2]], y);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |g, inputs, _, needs| {
                let gd = g.data();
                let xd = inputs[0].data();
                let kd = inputs[1].data();
                let mut dx = needs[0].then(|| vec![0.0; xd.len()]);
                let mut dk = needs[1].then(|| vec![0.0; kd.len()]);
                let pointwise = geo.is_pointwise();
                let chunk = geo.chunk();
                let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * chunk] };
                let mut dcol = if pointwise { Vec::new() } else { vec![0.0; rows * chunk] };
                for bi in 0..b {
                    for grp in 0..groups {
                        let xs = (bi * cin + grp * geo.cin_g) * vol..(bi * cin + (grp + 1) * geo.cin_g) * vol;
                        let gy = &gd[(bi * cout + grp * geo.cout_g) * pos..(bi * cout + (grp + 1) * geo.cout_g) * pos];
                        let wrange = grp * geo.cout_g * rows..(grp + 1) * geo.cout_g * rows;
                        if pointwise {
                            if let Some(dk) = dk.as_mut() {
                                gemm(geo.cout_g, pos, rows, gy, Layout::Normal, &xd[xs.clone()], Layout::Transposed, 1.0, &mut dk[wrange.clone()]);
                            }
                            if let Some(dx) = dx.as_mut() {
                                gemm(rows, geo.cout_g, pos, &kd[wrange], Layout::Transposed, gy, Layout::Normal, 1.0, &mut dx[xs]);
                            }
                            continue;
                        }
                        for q0 in (0..pos).step_by(chunk) {
                            let q1 = (q0 + chunk).min(pos);
                            let len = q1 - q0;
                            let gy_chunk = Strided::rows(&gy[q0..], pos);
                            if let Some(dk) = dk.as_mut() {
                                let cols = &mut col[..rows * len];
                                geo.im2col(&xd[xs.clone()], cols, q0, q1);
                                // dk += gy[:, q0..q1] * cols^T
                                gemm_strided(geo.cout_g, len, rows, gy_chunk, Strided::new(cols, 1, len), 1.0, &mut dk[wrange.clone()], rows);
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dc = &mut dcol[..rows * len];
                                // dcol = W^T * gy[:, q0..q1]
                                gemm_strided(rows, geo.cout_g, len, Strided::new(&kd[wrange.clone()], 1, rows), gy_chunk, 0.0, dc, len);
                                geo.col2im(dc, &mut dx[xs.clone()], q0, q1);
                            }
                        }
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::from_parts(inputs[0].shape().to_vec(), d)),
                    dk.map(|d| Tensor::from_parts(inputs[1].shape().to_vec(), d)),
                ];
                if inputs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![0.0; cout];
                        for bi in 0..b {
                            for (co, acc) in db.iter_mut().enumerate() {
                                *acc += gd[(bi * cout + co) * pos..(bi * cout + co + 1) * pos].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_parts(vec![cout], db)
                    }));
                }
                grads
            }),
            "conv3d",
        ))
    }
}
