//! Small row-major matrix kernels used by the convolution lowering.
//!
//! Every kernel accumulates each output element over the reduction index in
//! ascending order, so results are bit-identical to a naive loop that sums in
//! the same order.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · bᵀ` with `b` given already transposed as `bt[n×k]`.
pub(crate) fn matmul_a_bt_acc<T: Scalar>(a: &[T], bt: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(c.len(), m * k);
    for (c_row, a_row) in c.chunks_exact_mut(k).zip(a.chunks_exact(n)) {
        for (&av, bt_row) in a_row.iter().zip(bt.chunks_exact(k)) {
            for (cv, &bv) in c_row.iter_mut().zip(bt_row) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_definition() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // aᵀ b with a 2x3, b 2x2 -> 3x2
        let b2 = [1.0, 2.0, 3.0, 4.0];
        let mut c2 = [0.0; 6];
        matmul_at_b_acc(&a, &b2, &mut c2, 2, 3, 2);
        assert_eq!(c2, [13.0, 18.0, 17.0, 24.0, 21.0, 30.0]);

        // a bᵀ with a 2x2, bt 2x3 -> 2x3
        let mut c3 = [0.0; 6];
        matmul_a_bt_acc(&b2, &a, &mut c3, 2, 2, 3);
        assert_eq!(c3, [9.0, 12.0, 15.0, 19.0, 26.0, 33.0]);
    }
}
