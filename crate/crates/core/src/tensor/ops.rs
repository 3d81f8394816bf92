//! Hot numeric kernels. Plain loops arranged so the innermost dimension
//! is contiguous for both operands; the compiler autovectorizes these.
//!
//! Dot products use eight fixed partial accumulators: sequential f64
//! sums form a dependency chain the compiler must not reorder, while the
//! eight-lane pattern is an equally fixed (hence bitwise-reproducible)
//! order that vectorizes.

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ab = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ab[l] * bb[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// da[m,k] += dc[m,n] * b[k,n]^T  (i.e. da[i,p] += dot(dc[i,:], b[p,:]))
pub(crate) fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dv) in darow.iter_mut().enumerate() {
            *dv += dot(dcrow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// db[k,n] += a[m,k]^T * dc[m,n]  (axpy per row of dc)
pub(crate) fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dv, &gv) in dbrow.iter_mut().zip(dcrow.iter()) {
                *dv += av * gv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T — contiguous dot products, no transpose
/// materialization.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// da[m,k] += dc[m,n] * b[n,k] (axpy rows of b scaled by dc entries)
pub(crate) fn matmul_nt_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (j, &g) in dcrow.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let brow = &b[j * k..(j + 1) * k];
            for (d, &bv) in darow.iter_mut().zip(brow.iter()) {
                *d += g * bv;
            }
        }
    }
}

/// db[n,k] += dc[m,n]^T * a[m,k] (axpy rows of a scaled by dc entries)
pub(crate) fn matmul_nt_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (j, &g) in dcrow.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let dbrow = &mut db[j * k..(j + 1) * k];
            for (d, &av) in dbrow.iter_mut().zip(arow.iter()) {
                *d += g * av;
            }
        }
    }
}

/// out[c,r] = x[r,c] for one matrix
pub(crate) fn transpose_into(x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let xrow = &x[r * cols..(r + 1) * cols];
        for (c, &v) in xrow.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044715;

/// Tanh-form GELU; returns (y, t) with t = tanh(c*(x + a*x^3)) cached for
/// the backward pass.
pub(crate) fn gelu_fwd(x: f64) -> (f64, f64) {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    (0.5 * x * (1.0 + t), t)
}

pub(crate) fn gelu_bwd(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
