//! Linear centered kernel alignment between paired representations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::pca::{project, shared_pca_basis};

/// Column-center a `[n, d]` matrix into a fresh buffer.
fn centered(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.values().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut out = vec![0.0; n * d];
    for (orow, row) in out.chunks_mut(d).zip(x.values().chunks(d)) {
        for ((o, &v), &m) in orow.iter_mut().zip(row.iter()).zip(mean.iter()) {
            *o = v - m;
        }
    }
    out
}

/// Squared Frobenius norm of B^T A for column-centered buffers.
fn gram_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    // g[i, j] = sum_r b[r, i] * a[r, j]; accumulate ||g||_F^2
    let mut g = vec![0.0; db * da];
    for r in 0..n {
        let arow = &a[r * da..(r + 1) * da];
        let brow = &b[r * db..(r + 1) * db];
        for (i, &bv) in brow.iter().enumerate() {
            if bv == 0.0 {
                continue;
            }
            let grow = &mut g[i * da..(i + 1) * da];
            for (gv, &av) in grow.iter_mut().zip(arow.iter()) {
                *gv += bv * av;
            }
        }
    }
    g.iter().map(|v| v * v).sum()
}

/// Linear CKA between paired sample matrices `x: [n, dx]`, `y: [n, dy]`.
/// Columns are mean-centered internally. Returns a value in [0, 1];
/// bitwise-identical inputs return exactly 1.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::InvalidInput("expected [samples, d] matrices".into()));
    }
    let n = x.shape()[0];
    if y.shape()[0] != n {
        return Err(Error::InvalidInput(format!(
            "row counts differ: {} vs {} (samples must be paired)",
            n,
            y.shape()[0]
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 samples".into()));
    }
    let (dx, dy) = (x.shape()[1], y.shape()[1]);
    let xc = centered(x);
    let yc = centered(y);
    let s_xy = gram_sq(&xc, dx, &yc, dy, n);
    let s_xx = gram_sq(&xc, dx, &xc, dx, n);
    let s_yy = gram_sq(&yc, dy, &yc, dy, n);
    if s_xx == 0.0 || s_yy == 0.0 {
        return Err(Error::Degenerate(
            "zero-variance representations; CKA undefined".into(),
        ));
    }
    if s_xy == s_xx && s_xy == s_yy {
        return Ok(1.0);
    }
    let r = s_xy / (s_xx.sqrt() * s_yy.sqrt());
    if r > 1.0 + 1e-9 || r < -1e-12 {
        return Err(Error::Numeric(format!("CKA {r} outside [0, 1]")));
    }
    Ok(r.clamp(0.0, 1.0))
}

/// Representation-change magnitude: project `before` and `after` through
/// one shared PCA basis, then `1 - CKA`. Zero means unchanged geometry.
pub fn delta_cka(before: &Tensor, after: &Tensor, pca_dim: usize) -> Result<f64> {
    let (basis, _info) = shared_pca_basis(before, after, pca_dim)?;
    let pb = project(before, &basis)?;
    let pa = project(after, &basis)?;
    Ok(1.0 - linear_cka(&pb, &pa)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Orthonormal d x d matrix by Gram-Schmidt on a random basis.
    fn random_orthogonal(rng: &mut Rng, d: usize) -> Vec<f64> {
        let mut q = vec![0.0; d * d];
        for col in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for prev in 0..col {
                let mut dot = 0.0;
                for i in 0..d {
                    dot += v[i] * q[i * d + prev];
                }
                for i in 0..d {
                    v[i] -= dot * q[i * d + prev];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..d {
                q[i * d + col] = v[i] / norm;
            }
        }
        q
    }

    fn matmul(x: &Tensor, m: &[f64], d_out: usize) -> Tensor {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; n * d_out];
        for (orow, xrow) in out.chunks_mut(d_out).zip(x.values().chunks(d)) {
            for (i, &xv) in xrow.iter().enumerate() {
                for j in 0..d_out {
                    orow[j] += xv * m[i * d_out + j];
                }
            }
        }
        Tensor::new(vec![n, d_out], out).unwrap()
    }

    #[test]
    fn cka_of_identical_matrices_is_exactly_one() {
        let mut rng = Rng::new(7);
        let x = random_matrix(&mut rng, 60, 8);
        assert_eq!(linear_cka(&x, &x).unwrap(), 1.0);
        assert_eq!(delta_cka(&x, &x, 4).unwrap(), 0.0);
    }

    #[test]
    fn cka_is_symmetric() {
        let mut rng = Rng::new(8);
        let x = random_matrix(&mut rng, 64, 6);
        let y = random_matrix(&mut rng, 64, 6);
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_and_scaling_invariance() {
        let mut rng = Rng::new(9);
        let x = random_matrix(&mut rng, 80, 6);
        let q = random_orthogonal(&mut rng, 6);
        let xq = matmul(&x, &q, 6);
        let base = linear_cka(&x, &xq).unwrap();
        assert!((base - 1.0).abs() < 1e-9, "orthogonal: {base}");

        let scaled = Tensor::new(
            vec![80, 6],
            x.values().iter().map(|v| v * -2.5).collect(),
        )
        .unwrap();
        let s = linear_cka(&x, &scaled).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "scaling: {s}");
    }

    // Independent random matrices (n=500, d=32): CKA is small; mean over
    // 10 fixed-seed trials stays below 0.2.
    #[test]
    fn independent_random_matrices_have_low_cka() {
        let mut acc = 0.0;
        for trial in 0..10 {
            let mut rng = Rng::new(1000 + trial);
            let x = random_matrix(&mut rng, 500, 32);
            let y = random_matrix(&mut rng, 500, 32);
            acc += linear_cka(&x, &y).unwrap();
        }
        let mean = acc / 10.0;
        assert!(mean < 0.2, "mean CKA {mean}");
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let x = Tensor::new(vec![4, 3], vec![1.0; 12]).unwrap();
        let mut rng = Rng::new(10);
        let y = random_matrix(&mut rng, 4, 3);
        assert!(matches!(linear_cka(&x, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn delta_cka_zero_under_orthogonal_transform() {
        let mut rng = Rng::new(11);
        let x = random_matrix(&mut rng, 100, 8);
        let q = random_orthogonal(&mut rng, 8);
        let xq = matmul(&x, &q, 8);
        let d = delta_cka(&x, &xq, 8).unwrap();
        assert!(d.abs() < 1e-9, "delta {d}");
    }

    // Replacing representations with independent noise reshapes geometry:
    // delta CKA is large (n=500, d=32, pca_dim=16, fixed seeds).
    #[test]
    fn delta_cka_large_for_independent_noise() {
        let mut rng = Rng::new(12);
        let before = random_matrix(&mut rng, 500, 32);
        let after = random_matrix(&mut rng, 500, 32);
        let d = delta_cka(&before, &after, 16).unwrap();
        assert!(d > 0.8, "delta {d}");
    }
}
