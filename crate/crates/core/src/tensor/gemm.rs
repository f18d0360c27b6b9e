use super::Real;

/// `c (m x n) = op(a) * op(b) [+ c]`, all buffers row-major.
///
/// `a` is stored `m x k`, or `k x m` when `trans_a`; `b` is stored `k x n`,
/// or `n x k` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    trans_a: bool,
    b: &[R],
    trans_b: bool,
    c: &mut [R],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: extents checked above; a, b and c are distinct borrows.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            R::one(),
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
