use super::Scalar;

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as raw_gemm;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as raw_gemm;

/// `c (m x n) = op(a) * op(b) + beta * c` over row-major buffers.
///
/// `a` holds an `m x k` matrix, or `k x m` when `trans_a` is set; likewise
/// `b` holds `k x n`, or `n x k` when `trans_b` is set. With `beta == 0` the
/// previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Scalar],
    trans_a: bool,
    b: &[Scalar],
    trans_b: bool,
    c: &mut [Scalar],
    beta: Scalar,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches:
    // a is read over m*k elements, b over k*n, c written over m*n.
    unsafe {
        raw_gemm(
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
