//! Small dense linear-algebra kernels shared by the tape and the
//! evaluation metrics. Matrices are row-major slices.

use nalgebra::{DMatrix, SymmetricEigen};

/// `C[m,n] = A[m,k] · B[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four lanes so the reduction vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Eigen-decomposition of the symmetric part of `a` (n×n).
///
/// Returns eigenvalues and the eigenvector matrix `Q` (row-major, columns
/// are eigenvectors) so that `sym(a) = Q diag(λ) Qᵀ`.
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[i * n + j] + a[j * n + i]));
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues.iter().copied().collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            q[i * n + j] = eig.eigenvectors[(i, j)];
        }
    }
    (vals, q)
}

/// `Q diag(d) Qᵀ` for row-major `Q` (n×n).
pub fn reassemble(q: &[f64], d: &[f64], n: usize) -> Vec<f64> {
    let mut qd = q.to_vec();
    for i in 0..n {
        for j in 0..n {
            qd[i * n + j] *= d[j];
        }
    }
    matmul_nt(&qd, q, n, n, n)
}

/// Inverse square root of a symmetric matrix with eigenvalues clamped
/// from below at `floor`.
pub fn sym_inv_sqrt(a: &[f64], n: usize, floor: f64) -> Vec<f64> {
    let (vals, q) = sym_eigen(a, n);
    let d: Vec<f64> = vals.iter().map(|&l| l.max(floor).powf(-0.5)).collect();
    reassemble(&q, &d, n)
}

/// Thin SVD `A = U diag(s) Vᵀ` of an m×n matrix. `u` is m×r, `vt` is r×n
/// with r = min(m, n), both row-major; `s` is descending.
pub fn svd(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mat = DMatrix::from_row_slice(m, n, a);
    let svd = mat.svd(true, true);
    let r = m.min(n);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut uo = vec![0.0; m * r];
    for i in 0..m {
        for j in 0..r {
            uo[i * r + j] = u[(i, j)];
        }
    }
    let mut vo = vec![0.0; r * n];
    for i in 0..r {
        for j in 0..n {
            vo[i * n + j] = vt[(i, j)];
        }
    }
    (uo, svd.singular_values.iter().copied().collect(), vo)
}

/// Column-center an N×d matrix in place; returns the column means.
pub fn center_columns(x: &mut [f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for i in 0..n {
        for j in 0..d {
            x[i * d + j] -= mean[j];
        }
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        let bt = transpose(&b, 3, 2);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn inverse_sqrt_of_diagonal() {
        let a = [4.0, 0.0, 0.0, 9.0];
        let r = sym_inv_sqrt(&a, 2, 1e-12);
        assert!((r[0] - 0.5).abs() < 1e-12);
        assert!((r[3] - 1.0 / 3.0).abs() < 1e-12);
        assert!(r[1].abs() < 1e-12);
    }

    #[test]
    fn svd_reconstructs() {
        let a = [3.0, 1.0, 1.0, -1.0, 3.0, 1.0];
        let (u, s, vt) = svd(&a, 2, 3);
        let mut us = u.clone();
        for i in 0..2 {
            for j in 0..2 {
                us[i * 2 + j] *= s[j];
            }
        }
        let back = matmul(&us, &vt, 2, 2, 3);
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
