use std::fmt::Debug;

use num_traits::Float;

/// Element type of parameters and activations.
///
/// `f32` is the working precision; `f64` exists for gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static + std::iter::Sum {
    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "matrix view out of bounds: last index {last}, len {len}");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: all three views were bounds-checked above and `c`
                // is borrowed mutably, so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn of(x: f64) -> Self {
                x as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major `c (m x n) += a (m x k) @ b (k x n)`.
pub fn matmul_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (n as isize, 1), T::one(), c, (n as isize, 1));
}

/// Row-major `c (m x n) += a (m x k) @ b^T` where `b` is stored `n x k`.
pub fn matmul_bt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, (k as isize, 1), b, (1, k as isize), T::one(), c, (n as isize, 1));
}

/// Row-major `c (m x n) += a^T @ b` where `a` is stored `k x m` and `b` is `k x n`.
pub fn matmul_at_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm(m, k, n, T::one(), a, (1, m as isize), b, (n as isize, 1), T::one(), c, (n as isize, 1));
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
