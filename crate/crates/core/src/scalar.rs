use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type the tape and every layer are generic over.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c += a · b` for strided `m×k` and `k×n` operands.
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, c: &mut [Self], sc: Strides);
}

/// Row and column strides of a matrix view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strides(pub isize, pub isize);

fn check_extent(len: usize, rows: usize, cols: usize, s: Strides) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * s.0 + (cols as isize - 1) * s.1;
    assert!(s.0 >= 0 && s.1 >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: Strides,
                b: &[Self],
                sb: Strides,
                c: &mut [Self],
                sc: Strides,
            ) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                check_extent(a.len(), m, k, sa);
                check_extent(b.len(), k, n, sb);
                check_extent(c.len(), m, n, sc);
                // SAFETY: every operand's extent was checked above, and `c`
                // is borrowed mutably so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0,
                        sa.1,
                        b.as_ptr(),
                        sb.0,
                        sb.1,
                        1.0,
                        c.as_mut_ptr(),
                        sc.0,
                        sc.1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
