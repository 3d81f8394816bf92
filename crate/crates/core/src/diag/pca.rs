//! Shared PCA basis via covariance eigendecomposition (cyclic Jacobi).
//! Deterministic: fixed sweep order, fixed sign convention.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome flags of a basis computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaInfo {
    /// Columns actually kept (== requested unless rank-deficient).
    pub kept: usize,
    /// True when the data had rank below the requested dimension.
    pub reduced: bool,
    /// Eigenvalues of the kept directions, descending.
    pub eigenvalues: Vec<f64>,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_symmetric(a: &mut [f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

/// Top principal directions of the mean-centered concatenation of
/// `before` and `after` (one shared basis for both).
///
/// Sign convention: each direction's largest-magnitude component (lowest
/// index on ties) is positive. Rank deficiency below `pca_dim` reduces
/// the basis and sets [`PcaInfo::reduced`].
pub fn shared_pca_basis(before: &Tensor, after: &Tensor, pca_dim: usize) -> Result<(Tensor, PcaInfo)> {
    if before.shape().len() != 2 || after.shape().len() != 2 {
        return Err(Error::InvalidInput("expected [samples, d] matrices".into()));
    }
    let d = before.shape()[1];
    if after.shape()[1] != d {
        return Err(Error::InvalidInput(format!(
            "column counts differ: {} vs {}",
            d,
            after.shape()[1]
        )));
    }
    if pca_dim == 0 || pca_dim > d {
        return Err(Error::InvalidInput(format!(
            "pca_dim {pca_dim} outside [1, {d}]"
        )));
    }
    let n = before.shape()[0] + after.shape()[0];
    if n < pca_dim.max(2) {
        return Err(Error::InvalidInput(format!(
            "{n} combined rows cannot support a {pca_dim}-dim basis"
        )));
    }

    // column means over the concatenation
    let mut mean = vec![0.0; d];
    for t in [before, after] {
        for row in t.values().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // covariance of the centered concatenation
    let mut cov = vec![0.0; d * d];
    let mut crow = vec![0.0; d];
    for t in [before, after] {
        for row in t.values().chunks(d) {
            for (c, (&v, &m)) in crow.iter_mut().zip(row.iter().zip(mean.iter())) {
                *c = v - m;
            }
            for i in 0..d {
                let ci = crow[i];
                if ci == 0.0 {
                    continue;
                }
                let covrow = &mut cov[i * d..(i + 1) * d];
                for (cv, &cj) in covrow.iter_mut().zip(crow.iter()) {
                    *cv += ci * cj;
                }
            }
        }
    }
    let denom = (n - 1) as f64;
    for c in cov.iter_mut() {
        *c /= denom;
    }

    let (eig, vecs) = jacobi_symmetric(&mut cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap().then(i.cmp(&j)));

    let max_eig = eig[order[0]].max(0.0);
    let rank_tol = 1e-12 * max_eig.max(1e-300);
    let usable = order.iter().take_while(|&&i| eig[i] > rank_tol).count();
    let kept = usable.min(pca_dim);
    if kept == 0 {
        return Err(Error::Degenerate(
            "representations have no variance; basis undefined".into(),
        ));
    }
    let reduced = kept < pca_dim;

    let mut basis = vec![0.0; d * kept];
    let mut eigenvalues = Vec::with_capacity(kept);
    for (col, &src) in order[..kept].iter().enumerate() {
        eigenvalues.push(eig[src]);
        // deterministic sign: largest-magnitude component positive
        let mut best = 0usize;
        let mut best_mag = -1.0;
        for i in 0..d {
            let mag = vecs[i * d + src].abs();
            if mag > best_mag {
                best_mag = mag;
                best = i;
            }
        }
        let flip = if vecs[best * d + src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[i * kept + col] = flip * vecs[i * d + src];
        }
    }
    Ok((
        Tensor::new(vec![d, kept], basis)?,
        PcaInfo {
            kept,
            reduced,
            eigenvalues,
        },
    ))
}

/// Project `[n, d]` rows through a `[d, k]` basis.
pub fn project(x: &Tensor, basis: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || basis.shape().len() != 2 || x.shape()[1] != basis.shape()[0] {
        return Err(Error::InvalidInput(format!(
            "cannot project {:?} through {:?}",
            x.shape(),
            basis.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = basis.shape()[1];
    let mut out = vec![0.0; n * k];
    for (orow, xrow) in out.chunks_mut(k).zip(x.values().chunks(d)) {
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let brow = &basis.values()[i * k..(i + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += xv * bv;
            }
        }
    }
    Tensor::new(vec![n, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identical_inputs_project_identically() {
        let mut rng = Rng::new(1);
        let x = random_matrix(&mut rng, 40, 6);
        let (basis, info) = shared_pca_basis(&x, &x, 3).unwrap();
        assert_eq!(info.kept, 3);
        assert!(!info.reduced);
        let p1 = project(&x, &basis).unwrap();
        let p2 = project(&x, &basis).unwrap();
        assert_eq!(p1.values(), p2.values());
    }

    #[test]
    fn full_dim_basis_is_orthonormal() {
        let mut rng = Rng::new(2);
        let x = random_matrix(&mut rng, 50, 5);
        let y = random_matrix(&mut rng, 50, 5);
        let (basis, _) = shared_pca_basis(&x, &y, 5).unwrap();
        let b = basis.values();
        for i in 0..5 {
            for j in 0..5 {
                let mut dot = 0.0;
                for r in 0..5 {
                    dot += b[r * 5 + i] * b[r * 5 + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "B^T B [{i},{j}] = {dot}");
            }
        }
    }

    // 2-D points on the line y = 2x: the single principal direction is
    // the (normalized) line direction, up to the fixed sign convention.
    #[test]
    fn line_data_gives_line_direction() {
        let ts: Vec<f64> = (-10..=10).map(|i| i as f64 / 3.0).collect();
        let vals: Vec<f64> = ts.iter().flat_map(|&t| [t, 2.0 * t]).collect();
        let x = Tensor::new(vec![ts.len(), 2], vals).unwrap();
        let (basis, info) = shared_pca_basis(&x, &x, 1).unwrap();
        let b = basis.values();
        let want = [1.0 / 5.0_f64.sqrt(), 2.0 / 5.0_f64.sqrt()];
        assert!((b[0] - want[0]).abs() < 1e-9, "{b:?}");
        assert!((b[1] - want[1]).abs() < 1e-9, "{b:?}");
        assert_eq!(info.kept, 1);
    }

    // Rank-1 data with pca_dim 2 reduces and says so.
    #[test]
    fn rank_deficiency_reduces_with_flag() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let vals: Vec<f64> = ts.iter().flat_map(|&t| [t, 2.0 * t, -t]).collect();
        let x = Tensor::new(vec![20, 3], vals).unwrap();
        let (basis, info) = shared_pca_basis(&x, &x, 2).unwrap();
        assert!(info.reduced);
        assert_eq!(info.kept, 1);
        assert_eq!(basis.shape(), &[3, 1]);
    }

    #[test]
    fn pca_dim_above_d_is_invalid() {
        let mut rng = Rng::new(3);
        let x = random_matrix(&mut rng, 10, 3);
        assert!(shared_pca_basis(&x, &x, 4).is_err());
    }

    #[test]
    fn basis_is_deterministic() {
        let mut rng = Rng::new(4);
        let x = random_matrix(&mut rng, 30, 8);
        let y = random_matrix(&mut rng, 30, 8);
        let (b1, _) = shared_pca_basis(&x, &y, 4).unwrap();
        let (b2, _) = shared_pca_basis(&x, &y, 4).unwrap();
        let bits1: Vec<u64> = b1.values().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = b2.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }
}
