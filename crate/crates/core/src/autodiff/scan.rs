//! Selective state-space scan.
//!
//! For every channel `e` and state `n`:
//!
//! ```text
//! abar[t] = exp(delta[t, e] * a[e, n])
//! bbar[t] = delta[t, e] * b[t, n]
//! h[t]    = abar[t] * h[t - 1] + bbar[t] * u[t, e],   h[-1] = 0
//! y[t, e] = sum_n c[t, n] * h[t]
//! ```
//!
//! The forward pass is evaluated in independent chunks whose local states
//! are stitched together by carrying the previous chunk's final state
//! through the cumulative decay; this reproduces the sequential recurrence
//! up to rounding.

use rayon::prelude::*;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Chunk length for the forward scan.
pub const SCAN_CHUNK: usize = 64;

/// Parameters of one selective scan over a `[T, C]` sequence.
#[derive(Clone, Debug)]
pub struct ScanParams {
    /// State transition per channel, `[C, N]`; negative entries give `abar` in (0, 1).
    pub a: Tensor,
    /// Input map per step, `[T, N]`.
    pub b: Tensor,
    /// Output map per step, `[T, N]`.
    pub c: Tensor,
    /// Input-dependent step size, `[T, C]`.
    pub delta: Tensor,
}

struct ScanDims {
    t: usize,
    e: usize,
    n: usize,
}

/// Runs the scan over `u[T, C]`.
pub fn selective_scan(u: &Tensor, p: &ScanParams) -> Result<Tensor> {
    let (t, e) = match u.shape() {
        [t, e] => (*t, *e),
        s => return Err(Error::dim("selective_scan", format!("u must be [T, C], got {s:?}"))),
    };
    let n = p.a.shape().get(1).copied().unwrap_or(0);
    check_params(t, e, n, p.a.shape(), p.b.shape(), p.c.shape(), p.delta.shape())?;
    let dims = ScanDims { t, e, n };
    let (y, _) = scan_forward(&dims, u.data(), p.delta.data(), p.a.data(), p.b.data(), p.c.data(), SCAN_CHUNK);
    Ok(Tensor::from_parts(vec![t, e], y))
}

fn check_params(
    t: usize,
    e: usize,
    n: usize,
    a: &[usize],
    b: &[usize],
    c: &[usize],
    delta: &[usize],
) -> Result<()> {
    if t == 0 {
        return Err(Error::dim("selective_scan", "sequence must be non-empty"));
    }
    let ok = a == [e, n] && b == [t, n] && c == [t, n] && delta == [t, e];
    if !ok {
        return Err(Error::dim(
            "selective_scan",
            format!("T={t}, C={e}: a {a:?}, b {b:?}, c {c:?}, delta {delta:?}"),
        ));
    }
    Ok(())
}

/// Returns `(y[T, E], h[T, E, N])` for one sequence.
fn scan_forward(
    dims: &ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    chunk: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { t, e, n } = *dims;
    let en = e * n;
    let chunk = chunk.max(1);
    let mut h = vec![0.0; t * en];
    // Per-step cumulative decay since the start of its chunk.
    let mut decay = vec![0.0; t * en];

    h.par_chunks_mut(chunk * en)
        .zip(decay.par_chunks_mut(chunk * en))
        .enumerate()
        .for_each(|(ci, (hc, pc))| {
            let start = ci * chunk;
            let len = hc.len() / en;
            let mut state = vec![0.0; en];
            let mut prod = vec![1.0; en];
            for k in 0..len {
                let ti = start + k;
                for ei in 0..e {
                    let dt = delta[ti * e + ei];
                    let x = u[ti * e + ei];
                    for ni in 0..n {
                        let j = ei * n + ni;
                        let abar = (dt * a[j]).exp();
                        state[j] = abar * state[j] + dt * b[ti * n + ni] * x;
                        prod[j] *= abar;
                        hc[k * en + j] = state[j];
                        pc[k * en + j] = prod[j];
                    }
                }
            }
        });

    let chunks = t.div_ceil(chunk);
    let mut carry = vec![0.0; en];
    for ci in 1..chunks {
        let prev_end = ci * chunk - 1;
        for j in 0..en {
            carry[j] = h[prev_end * en + j];
        }
        let end = ((ci + 1) * chunk).min(t);
        for ti in ci * chunk..end {
            for j in 0..en {
                h[ti * en + j] += decay[ti * en + j] * carry[j];
            }
        }
    }

    let mut y = vec![0.0; t * e];
    y.par_chunks_mut(e).enumerate().for_each(|(ti, yt)| {
        for (ei, out) in yt.iter_mut().enumerate() {
            let mut acc = 0.0;
            for ni in 0..n {
                acc += c[ti * n + ni] * h[ti * en + ei * n + ni];
            }
            *out = acc;
        }
    });
    (y, h)
}

struct ScanGrads {
    du: Vec<f64>,
    ddelta: Vec<f64>,
    da: Vec<f64>,
    db: Vec<f64>,
    dc: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn scan_backward(
    dims: &ScanDims,
    gy: &[f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    h: &[f64],
    grads: &mut ScanGrads,
) {
    let ScanDims { t, e, n } = *dims;
    let en = e * n;
    let mut dh = vec![0.0; en];
    for ti in (0..t).rev() {
        for ei in 0..e {
            let g = gy[ti * e + ei];
            let dt = delta[ti * e + ei];
            let x = u[ti * e + ei];
            let mut ddt = 0.0;
            let mut dx = 0.0;
            for ni in 0..n {
                let j = ei * n + ni;
                dh[j] += g * c[ti * n + ni];
                grads.dc[ti * n + ni] += g * h[ti * en + j];
                let abar = (dt * a[j]).exp();
                let h_prev = if ti > 0 { h[(ti - 1) * en + j] } else { 0.0 };
                let dabar = dh[j] * h_prev * abar;
                ddt += dabar * a[j];
                grads.da[j] += dabar * dt;
                let bn = b[ti * n + ni];
                ddt += dh[j] * x * bn;
                grads.db[ti * n + ni] += dh[j] * x * dt;
                dx += dh[j] * dt * bn;
                dh[j] *= abar;
            }
            grads.ddelta[ti * e + ei] += ddt;
            grads.du[ti * e + ei] += dx;
        }
    }
}

impl Graph {
    /// Batched selective scan: `u, delta: [B, T, E]`, `a: [E, N]`, `b, c: [B, T, N]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let [bs, t, e] = <[usize; 3]>::try_from(su.as_slice())
            .map_err(|_| Error::dim("selective_scan", format!("u must be [B, T, E], got {su:?}")))?;
        let n = self.shape(a).get(1).copied().unwrap_or(0);
        if self.shape(delta) != su.as_slice()
            || self.shape(a) != [e, n]
            || self.shape(b) != [bs, t, n]
            || self.shape(c) != [bs, t, n]
        {
            return Err(Error::dim(
                "selective_scan",
                format!(
                    "u {su:?}, delta {:?}, a {:?}, b {:?}, c {:?}",
                    self.shape(delta),
                    self.shape(a),
                    self.shape(b),
                    self.shape(c)
                ),
            ));
        }
        if t == 0 {
            return Err(Error::dim("selective_scan", "sequence must be non-empty"));
        }
        let dims = ScanDims { t, e, n };
        let (ud, dd, ad, bd, cd) = (
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let mut y = Vec::with_capacity(bs * t * e);
        let mut states = Vec::with_capacity(bs * t * e * n);
        for bi in 0..bs {
            let seq = bi * t * e..(bi + 1) * t * e;
            let st = bi * t * n..(bi + 1) * t * n;
            let (yb, hb) = scan_forward(&dims, &ud[seq.clone()], &dd[seq], ad, &bd[st.clone()], &cd[st], SCAN_CHUNK);
            y.extend(yb);
            states.extend(hb);
        }
        Ok(self.push(
            Tensor::from_parts(vec![bs, t, e], y),
            &[u, delta, a, b, c],
            Box::new(move |g, inputs, _, needs| {
                let dims = ScanDims { t, e, n };
                let gd = g.data();
                let (ud, dd, ad, bd, cd) = (
                    inputs[0].data(),
                    inputs[1].data(),
                    inputs[2].data(),
                    inputs[3].data(),
                    inputs[4].data(),
                );
                let mut du = vec![0.0; bs * t * e];
                let mut ddelta = vec![0.0; bs * t * e];
                let mut da = vec![0.0; e * n];
                let mut db = vec![0.0; bs * t * n];
                let mut dc = vec![0.0; bs * t * n];
                for bi in 0..bs {
                    let seq = bi * t * e..(bi + 1) * t * e;
                    let st = bi * t * n..(bi + 1) * t * n;
                    let mut grads = ScanGrads {
                        du: vec![0.0; t * e],
                        ddelta: vec![0.0; t * e],
                        da: vec![0.0; e * n],
                        db: vec![0.0; t * n],
                        dc: vec![0.0; t * n],
                    };
                    scan_backward(
                        &dims,
                        &gd[seq.clone()],
                        &ud[seq.clone()],
                        &dd[seq.clone()],
                        ad,
                        &bd[st.clone()],
                        &cd[st.clone()],
                        &states[bi * t * e * n..(bi + 1) * t * e * n],
                        &mut grads,
                    );
                    du[seq.clone()].copy_from_slice(&grads.du);
                    ddelta[seq].copy_from_slice(&grads.ddelta);
                    for (acc, v) in da.iter_mut().zip(&grads.da) {
                        *acc += v;
                    }
                    db[st.clone()].copy_from_slice(&grads.db);
                    dc[st].copy_from_slice(&grads.dc);
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(vec![bs, t, e], du)),
                    needs[1].then(|| Tensor::from_parts(vec![bs, t, e], ddelta)),
                    needs[2].then(|| Tensor::from_parts(vec![e, n], da)),
                    needs[3].then(|| Tensor::from_parts(vec![bs, t, n], db)),
                    needs[4].then(|| Tensor::from_parts(vec![bs, t, n], dc)),
                ]
            }),
            "selective_scan",
        ))
    }
}
