//! Thin dense kernels on top of `matrixmultiply`.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

fn view(m: &DMatrix<f64>, op: Op) -> (usize, usize, isize, isize) {
    let (r, c) = m.shape();
    // column-major storage: (i, j) lives at i + j * r
    match op {
        Op::N => (r, c, 1, r as isize),
        Op::T => (c, r, r as isize, 1),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm(c: &mut DMatrix<f64>, alpha: f64, a: &DMatrix<f64>, op_a: Op, b: &DMatrix<f64>, op_b: Op, beta: f64) {
    let (m, k, rsa, csa) = view(a, op_a);
    let (kb, n, rsb, csb) = view(b, op_b);
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        *c *= beta;
        return;
    }
    let rsc = 1isize;
    let csc = m as isize;
    // SAFETY: strides and extents describe the column-major buffers of a, b and c exactly.
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
            rsc,
            csc,
        );
    }
}

/// `op(a) * op(b)` into a fresh matrix.
pub fn matmul(a: &DMatrix<f64>, op_a: Op, b: &DMatrix<f64>, op_b: Op) -> DMatrix<f64> {
    let m = if op_a == Op::N { a.nrows() } else { a.ncols() };
    let n = if op_b == Op::N { b.ncols() } else { b.nrows() };
    let mut c = DMatrix::zeros(m, n);
    gemm(&mut c, 1.0, a, op_a, b, op_b, 0.0);
    c
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Copies the upper triangle onto the lower one.
pub fn symmetrize_from_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}
