// Safe wrappers around the `matrixmultiply` kernels. The kernels run
// single-threaded, so summation order is fixed for a given problem size.

fn check(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        last < len,
        "gemm operand {what} out of bounds: last index {last}, len {len}"
    );
}

macro_rules! gemm_impl {
    ($name:ident, $ty:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            a: &[$ty],
            a_strides: (usize, usize),
            b: &[$ty],
            b_strides: (usize, usize),
            c: &mut [$ty],
            c_strides: (usize, usize),
            accumulate: bool,
        ) {
            check(a.len(), m, k, a_strides, "a");
            check(b.len(), k, n, b_strides, "b");
            check(c.len(), m, n, c_strides, "c");
            if m == 0 || n == 0 {
                return;
            }
            let beta = if accumulate { 1.0 } else { 0.0 };
            // SAFETY: every index the kernel touches was bounds-checked above,
            // and `c` is borrowed mutably so it cannot alias `a` or `b`.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    a_strides.0 as isize,
                    a_strides.1 as isize,
                    b.as_ptr(),
                    b_strides.0 as isize,
                    b_strides.1 as isize,
                    beta,
                    c.as_mut_ptr(),
                    c_strides.0 as isize,
                    c_strides.1 as isize,
                );
            }
        }
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);
