//! Raw numeric kernels shared by graph ops and plain inference paths.

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`),
/// `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `(c_in, len)` signal into `(c_in * k, out_len)` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col(x: &[f64], c_in: usize, len: usize, k: usize, pad: usize, dil: usize, out_len: usize, cols: &mut [f64]) {
    for c in 0..c_in {
        let row_x = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            let off = (kk * dil) as isize - pad as isize;
            for (t, v) in row.iter_mut().enumerate() {
                let src = t as isize + off;
                *v = if src >= 0 && (src as usize) < len { row_x[src as usize] } else { 0.0 };
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the signal gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im(cols: &[f64], c_in: usize, len: usize, k: usize, pad: usize, dil: usize, out_len: usize, dx: &mut [f64]) {
    for c in 0..c_in {
        for kk in 0..k {
            let row = &cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            let off = (kk * dil) as isize - pad as isize;
            for (t, v) in row.iter().enumerate() {
                let src = t as isize + off;
                if src >= 0 && (src as usize) < len {
                    dx[c * len + src as usize] += v;
                }
            }
        }
    }
}

/// Reflect-mode index (edge sample not repeated), valid for any offset.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Normalized, truncated Gaussian kernel of odd `size`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    assert!(size % 2 == 1, "gaussian kernel size must be odd");
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
