//! Thin row-major dense helpers over `matrixmultiply`.

/// Aᵀ A for a row-major `rows × cols` matrix.
pub fn gram(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    let mut c = vec![0.0; cols * cols];
    unsafe {
        matrixmultiply::dgemm(
            cols, rows, cols, 1.0,
            a.as_ptr(), 1, cols as isize,
            a.as_ptr(), cols as isize, 1,
            0.0,
            c.as_mut_ptr(), cols as isize, 1,
        );
    }
    c
}

/// A (m × k) · B (k × n).
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// A (m × k) · Bᵀ where B is stored as (n × k).
pub fn matmul_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}
