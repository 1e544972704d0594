//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! kernels run at f32 or f64. The pipeline itself instantiates f64 (see the
//! aliases at the crate root); f32 exists for experiments and tests.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 constant representable in Scalar")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar convertible to f64")
    }

    /// c[m x n] = alpha * op(a) * op(b) + beta * c, row-major with explicit
    /// strides so transposed views cost nothing. The default is a naive
    /// triple loop; f32/f64 route to matrixmultiply's packed kernels.
    ///
    /// # Safety
    /// Pointers must be valid for the strided extents implied by m, k, n.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    let av = *a.offset(i as isize * rsa + p as isize * csa);
                    let bv = *b.offset(p as isize * rsb + j as isize * csb);
                    acc = acc + av * bv;
                }
                let cp = c.offset(i as isize * rsc + j as isize * csc);
                *cp = alpha * acc + beta * *cp;
            }
        }
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_f64() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        unsafe {
            <f64 as Scalar>::gemm(
                2, 3, 2, 1.0, a.as_ptr(), 3, 1, b.as_ptr(), 2, 1, 0.0, c.as_mut_ptr(), 2, 1,
            );
        }
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_view_via_strides() {
        // a^T * b where a is stored 3x2: pass row stride 1, col stride 2.
        let a = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 storing [[1,4],[2,5],[3,6]]
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        unsafe {
            <f64 as Scalar>::gemm(
                2, 3, 2, 1.0, a.as_ptr(), 1, 2, b.as_ptr(), 2, 1, 0.0, c.as_mut_ptr(), 2, 1,
            );
        }
        // rows of a^T are [1,2,3] and [4,5,6]
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn f32_instantiation_works() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [0.0f32];
        unsafe {
            <f32 as Scalar>::gemm(1, 2, 1, 1.0, a.as_ptr(), 2, 1, b.as_ptr(), 1, 1, 0.0, c.as_mut_ptr(), 1, 1);
        }
        assert_eq!(c[0], 11.0);
    }
}
