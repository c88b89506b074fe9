//! Small dense symmetric linear algebra: cyclic Jacobi eigendecomposition and
//! the PSD matrix square root it powers. Matrices are row-major `n x n`
//! slices; sizes stay small (feature dims for the Fréchet distance).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::shape_err;

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

fn check_square(a: &[f64], n: usize) -> Result<()> {
    if n == 0 || a.len() != n * n {
        return Err(shape_err!("matrix length {} is not {n}x{n}", a.len()));
    }
    if !math::all_finite(a) {
        return Err(Error::NonFinite("matrix contains NaN/Inf".into()));
    }
    Ok(())
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(math::abs(v)))
}

fn off_diag_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    math::sqrt(s)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the orthonormal eigenvectors as
/// a row-major matrix whose column `j` is the eigenvector for eigenvalue `j`.
pub fn sym_eig(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_square(a, n)?;
    let scale = max_abs(a);
    for i in 0..n {
        for j in (i + 1)..n {
            let asym = math::abs(a[i * n + j] - a[j * n + i]);
            if asym > SYMMETRY_TOL * scale.max(1e-300) {
                return Err(Error::Numeric(alloc::format!(
                    "matrix not symmetric: |a[{i},{j}] - a[{j},{i}]| = {asym:e} exceeds relative tolerance {SYMMETRY_TOL:e}"
                )));
            }
        }
    }

    // work on the symmetrized copy so tiny asymmetries cannot bias rotations
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let fro = {
        let mut s = 0.0;
        for &x in &m {
            s += x * x;
        }
        math::sqrt(s)
    };
    let target = OFF_DIAG_TOL * fro.max(1.0);

    let mut converged = off_diag_norm(&m, n) <= target;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= MAX_SWEEPS {
            return Err(Error::Numeric(alloc::format!(
                "Jacobi eigensolver did not converge within the {MAX_SWEEPS}-sweep cap"
            )));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if math::abs(apq) <= target / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // tan of the smaller rotation angle
                let t = {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (math::abs(theta) + math::sqrt(theta * theta + 1.0))
                };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;

                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p * n + j];
                    let mqj = m[q * n + j];
                    m[p * n + j] = c * mpj - s * mqj;
                    m[q * n + j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
        sweeps += 1;
        converged = off_diag_norm(&m, n) <= target;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| eig[i].partial_cmp(&eig[j]).expect("finite eigenvalues"));

    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0f64; n * n];
    for (col, &src) in order.iter().enumerate() {
        values.push(eig[src]);
        for i in 0..n {
            vectors[i * n + col] = v[i * n + src];
        }
    }
    Ok((values, vectors))
}

/// Symmetric PSD square root via `sym_eig`, clamping slightly negative
/// eigenvalues to zero. Rejects genuinely indefinite input.
pub fn psd_sqrt(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (values, vectors) = sym_eig(a, n)?;
    let max_mag = values.iter().fold(0.0f64, |m, &v| m.max(math::abs(v)));
    let floor = -1e-10 * max_mag.max(1e-300);
    if let Some(&worst) = values
        .iter()
        .filter(|&&v| v < floor)
        .min_by(|a, b| a.partial_cmp(b).unwrap())
    {
        return Err(Error::Numeric(alloc::format!(
            "matrix is not positive semi-definite: most negative eigenvalue {worst:e}"
        )));
    }
    let roots: Vec<f64> = values.iter().map(|&v| math::sqrt(v.max(0.0))).collect();
    // S = V diag(sqrt) V^T
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += vectors[i * n + k] * roots[k] * vectors[j * n + k];
            }
            out[i * n + j] = acc;
            out[j * n + i] = acc;
        }
    }
    Ok(out)
}

pub(crate) fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            let brow = &b[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            math::axpy(orow, aik, brow);
        }
    }
    out
}

pub(crate) fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}
