//! Strided matrix product on top of `matrixmultiply`.

/// Row and column stride of a matrix view.
pub(crate) type Strides = (usize, usize);

/// `c = beta * c + a * b` with `a: m x k`, `b: k x n`, `c: m x n`, each given
/// as a slice plus strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, s: Strides| (rows - 1) * s.0 + (cols - 1) * s.1;
    assert!(c.len() > last(m, n, sc), "gemm: output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.0 + j * sc.1] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > last(m, k, sa), "gemm: left view out of bounds");
    assert!(b.len() > last(k, n, sb), "gemm: right view out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, &a, (k, 1), &b, (n, 1), 2.0, &mut c, (n, 1));
        // b read through its transpose view: bt is n x k, use strides (1, n).
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &a, (k, 1), &b, (n, 1), 0.0, &mut c2, (n, 1));
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - (2.0 + want)).abs() < 1e-12);
                assert!((c2[i * n + j] - want).abs() < 1e-12);
            }
        }
        let mut ct = vec![0.0; n * m];
        // (a b)^T = b^T a^T
        gemm(n, k, m, &b, (1, n), &a, (1, k), 0.0, &mut ct, (m, 1));
        for i in 0..m {
            for j in 0..n {
                assert!((ct[j * m + i] - c2[i * n + j]).abs() < 1e-12);
            }
        }
    }
}
