//! Row-major matmul kernels. The ikj loop order keeps the inner loop over
//! contiguous output/B rows so it autovectorizes.

use super::Element;

/// C[m×n] = A[m×k] · B[k×n]
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// C[m×k] = A[m×n] · B[k×n]ᵀ  (rows of A dotted with rows of B)
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(n)) {
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *cv = acc;
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · B[m×n]
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_identity() {
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        assert_eq!(matmul_nn(&a, &b, 2, 2, 2), b);
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.25 - 1.0).collect(); // 4x3 / 2x? reuse

        // nt: A[2x3] · (B[4x3])ᵀ = C[2x4]
        let bt: Vec<f64> = {
            let mut t = vec![0.0; 12];
            for r in 0..4 {
                for c in 0..3 {
                    t[c * 4 + r] = b[r * 3 + c];
                }
            }
            t
        };
        assert_eq!(matmul_nt(&a, &b, 2, 3, 4), matmul_nn(&a, &bt, 2, 3, 4));

        // tn: (A[2x3])ᵀ · D[2x4] = C[3x4]
        let d: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let at: Vec<f64> = {
            let mut t = vec![0.0; 6];
            for r in 0..2 {
                for c in 0..3 {
                    t[c * 2 + r] = a[r * 3 + c];
                }
            }
            t
        };
        assert_eq!(matmul_tn(&a, &d, 2, 3, 4), matmul_nn(&at, &d, 3, 2, 4));
    }
}
