//! Plain matrix kernels over row-major slices.

use crate::scalar::Scalar;

/// `out = a · b`, a: m×k, b: k×n.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, k, 1, b, n, 1, &mut out);
    out
}

/// `out = a · bᵀ`, a: m×k, b: n×k.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, k, 1, b, 1, k, &mut out);
    out
}

/// `out = aᵀ · b`, a: k×m, b: k×n.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, 1, m, b, n, 1, &mut out);
    out
}

pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let ab = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), ab);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), ab);
    }

    #[test]
    fn fast_path_matches_reference_loop() {
        let a: Vec<f64> = (0..35).map(|v| (v as f64 * 0.37).sin()).collect(); // 5×7
        let b: Vec<f64> = (0..42).map(|v| (v as f64 * 0.11).cos()).collect(); // 7×6
        let mut reference = vec![0.0; 30];
        for i in 0..5 {
            for j in 0..6 {
                reference[i * 6 + j] = (0..7).map(|p| a[i * 7 + p] * b[p * 6 + j]).sum();
            }
        }
        let fast = matmul(&a, &b, 5, 7, 6);
        for (x, y) in fast.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12);
        }
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        for (x, y) in matmul(&af, &bf, 5, 7, 6).iter().zip(&reference) {
            assert!((*x as f64 - y).abs() < 1e-5);
        }
    }
}
