//! Floating point element types and the matrix product kernel they share.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::macs;

/// Element type of [`crate::Tensor4`]. Implemented for `f32` (training)
/// and `f64` (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Width in bytes, used as a tag in binary files.
    const WIDTH: u8;

    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    ///
    /// # Safety
    /// The strided views must stay inside the given slices. Callers go
    /// through [`gemm`] which checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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
    );

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64_lossy(v: f64) -> f32 {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64_lossy(v: f64) -> f64 {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Storage order of a matrix operand inside its slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Row-major, rows of `cols` contiguous elements.
    Normal,
    /// The slice holds the row-major transpose of the operand.
    Transposed,
}

impl Layout {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        let _ = rows;
        match self {
            Layout::Normal => (cols as isize, 1),
            Layout::Transposed => (1, rows as isize),
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta · c`, all dense.
///
/// Every call adds `m·k·n` to the thread's multiply-accumulate tally.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_layout: Layout,
    b: &[S],
    b_layout: Layout,
    beta: S,
    c: &mut [S],
) {
    assert!(a.len() >= m * k, "gemm: lhs has {} < {}", a.len(), m * k);
    assert!(b.len() >= k * n, "gemm: rhs has {} < {}", b.len(), k * n);
    assert!(c.len() >= m * n, "gemm: out has {} < {}", c.len(), m * n);
    macs::record((m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a_layout.strides(m, k);
    let (rsb, csb) = b_layout.strides(k, n);
    // SAFETY: lengths checked above; strides describe dense m×k, k×n, m×n views.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
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

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, al) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, bl) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, al, bb, bl, 0.0, &mut c);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn beta_one_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(1, 2, 1, &a, Layout::Normal, &b, Layout::Normal, 1.0, &mut c);
        assert_eq!(c[0], 21.0);
    }
}
