//! Allocation-free numeric kernels shared by the autodiff graph and the
//! incremental inference path.

/// A strided view of a logical `rows × cols` matrix inside a flat slice.
#[derive(Debug, Clone, Copy)]
pub struct MatView {
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatView {
    pub fn dense(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Dense `rows × cols` storage read as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        let r = (rows - 1) as isize * self.row_stride;
        let c = (cols - 1) as isize * self.col_stride;
        (self.offset as isize + r.max(0) + c.max(0)) as usize
    }
}

/// `c = alpha · a · b + beta · c` over strided views, with `a` logically
/// `m × k` and `b` logically `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        av.last_index(m, k) < a.len().max(1) || k == 0,
        "gemm: lhs view out of bounds"
    );
    assert!(
        bv.last_index(k, n) < b.len().max(1) || k == 0,
        "gemm: rhs view out of bounds"
    );
    assert!(cv.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    assert!(cv.row_stride >= 0 && cv.col_stride >= 0);
    // SAFETY: every element addressed by the three views lies within its slice
    // (checked above), and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride,
            av.col_stride,
            b.as_ptr().add(bv.offset),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride,
            cv.col_stride,
        );
    }
}

/// Dense matrix product. `a` is stored `m × k` (or `k × m` when `trans_a`),
/// `b` is stored `k × n` (or `n × k` when `trans_b`), `c` is `m × n`.
/// With `accumulate` the product is added into `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    let av = if trans_a {
        MatView::transposed(m)
    } else {
        MatView::dense(k)
    };
    let bv = if trans_b {
        MatView::transposed(k)
    } else {
        MatView::dense(n)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm_view(m, k, n, 1.0, a, av, b, bv, beta, c, MatView::dense(n));
}

/// `gemm` into a newly allocated `m × n` buffer, skipping the zero fill.
#[allow(clippy::too_many_arguments)]
pub fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool) -> Vec<f64> {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    let len = m * n;
    let mut c: Vec<f64> = Vec::with_capacity(len);
    if len == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the lengths of `a` and `b` are checked above and `c` has
    // capacity for `m × n` dense elements. With beta = 0 dgemm writes every
    // element of `c` without reading it (zeros when k = 0), so all `len`
    // elements are initialized before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(len);
    }
    c
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Log-softmax of one row written into `out`.
pub fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - log_z;
    }
}

/// Row-wise layer normalisation. Returns per-row `1/sqrt(var + eps)` when
/// `inv_std` is provided, and the normalised (pre-gain) values in `xhat`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    mut xhat: Option<&mut [f64]>,
    mut inv_std: Option<&mut [f64]>,
) {
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            let h = (xr[j] - mean) * istd;
            or[j] = h * gain[j] + bias[j];
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * cols + j] = h;
            }
        }
        if let Some(s) = inv_std.as_deref_mut() {
            s[r] = istd;
        }
    }
}

pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}
