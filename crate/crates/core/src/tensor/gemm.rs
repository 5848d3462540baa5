/// Whether an operand is used as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GemmOp {
    N,
    T,
}

/// `c = op(a) * op(b) + beta * c` on row-major `f64` buffers.
///
/// `op(a)` is `[m, k]` and `op(b)` is `[k, n]`. With `GemmOp::T` the operand
/// is stored transposed (`a` as `[k, m]`, `b` as `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_f64(
    op_a: GemmOp,
    op_b: GemmOp,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        GemmOp::N => (k as isize, 1),
        GemmOp::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        GemmOp::N => (n as isize, 1),
        GemmOp::T => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
