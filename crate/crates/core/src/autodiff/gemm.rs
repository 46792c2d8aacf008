//! Safe wrapper over `matrixmultiply::dgemm`.

/// Layout of a row-major operand as seen by the product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Use the stored `[rows, cols]` matrix as is.
    Normal,
    /// Use the transpose of the stored matrix.
    Transposed,
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size `m x k` and `op(b)` of size `k x n`.
///
/// `a` and `b` are row-major buffers; `Transposed` means the buffer stores the
/// operand's transpose (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k, 1),
        Layout::Transposed => (1, m),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n, 1),
        Layout::Transposed => (1, k),
    };
    gemm_strided(m, k, n, Strided::new(a, rsa, csa), Strided::new(b, rsb, csb), beta, c, n);
}

/// Read-only matrix view with explicit row and column strides.
#[derive(Clone, Copy, Debug)]
pub struct Strided<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Strided<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    /// Row-major `[rows, ld]` buffer, of which the product reads a leading block.
    pub fn rows(data: &'a [f64], ld: usize) -> Self {
        Self::new(data, ld, 1)
    }
}

/// One past the largest offset of a `rows x cols` block with the given strides.
fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

/// `c = beta * c + a * b` on strided views; `c` is row-major with leading dimension `ldc`.
///
/// With `beta == 0` the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(m: usize, k: usize, n: usize, a: Strided, b: Strided, beta: f64, c: &mut [f64], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= span(m, n, ldc, 1), "gemm: output length");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
        }
        return;
    }
    assert!(a.data.len() >= span(m, k, a.rs, a.cs), "gemm: lhs length");
    assert!(b.data.len() >= span(k, n, b.rs, b.cs), "gemm: rhs length");
    // SAFETY: the asserted spans cover every index reachable through the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn all_layouts_match_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, al) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, bl) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, al, bb, bl, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn strided_blocks_match_dense() {
        // The right factor is the 2 x 2 block at column 1 of a 2 x 5 buffer; the
        // product lands in columns 2..4 of a 2 x 6 buffer.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [9.0, 1.0, 2.0, 9.0, 9.0, 9.0, 3.0, 4.0, 9.0, 9.0];
        let mut c = [0.5; 12];
        gemm_strided(2, 2, 2, Strided::rows(&a, 2), Strided::rows(&b[1..], 5), 0.0, &mut c[2..], 6);
        assert_eq!(c, [0.5, 0.5, 7.0, 10.0, 0.5, 0.5, 0.5, 0.5, 15.0, 22.0, 0.5, 0.5]);
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, &a, Layout::Normal, &b, Layout::Normal, 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }
}
