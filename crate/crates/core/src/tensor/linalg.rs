use super::{Matrix, Vector};
use crate::error::{NifError, Result};

/// First jitter tried after a failed factorization.
pub const DEFAULT_JITTER: f64 = 1e-12;
/// Jitter is escalated ×10 per retry and never exceeds this.
pub const MAX_JITTER: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-10;

fn try_cholesky(m: &Matrix, jitter: f64) -> std::result::Result<Matrix, usize> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(j);
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky factor without any jitter; the error carries the failing pivot.
pub fn cholesky_exact(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(NifError::Shape(format!(
            "cholesky of non-square {:?} matrix",
            m.shape()
        )));
    }
    try_cholesky(m, 0.0).map_err(|pivot| {
        NifError::numeric_at(format!("matrix not positive definite (pivot {pivot})"), pivot)
    })
}

/// Lower-triangular `L` with `L Lᵀ = m`.
///
/// The plain factorization is tried first. Only if a pivot is non-positive is
/// `jitter · I` added, escalating ×10 per retry until [`MAX_JITTER`]; past that
/// the error reports the failing pivot. A non-positive `jitter` means
/// [`DEFAULT_JITTER`].
pub fn cholesky(m: &Matrix, jitter: f64) -> Result<Matrix> {
    if !m.is_square() {
        return Err(NifError::Shape(format!(
            "cholesky of non-square {:?} matrix",
            m.shape()
        )));
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(NifError::Precondition(
            "cholesky input is not symmetric".into(),
        ));
    }
    let mut pivot = match try_cholesky(m, 0.0) {
        Ok(l) => return Ok(l),
        Err(p) => p,
    };
    let mut eps = if jitter > 0.0 { jitter } else { DEFAULT_JITTER };
    while eps <= MAX_JITTER * (1.0 + 1e-9) {
        match try_cholesky(m, eps) {
            Ok(l) => return Ok(l),
            Err(p) => pivot = p,
        }
        eps *= 10.0;
    }
    Err(NifError::numeric_at(
        format!("matrix not positive definite (pivot {pivot}) after jitter {MAX_JITTER:e}"),
        pivot,
    ))
}

fn check_lower(l: &Matrix, len: usize) -> Result<()> {
    if !l.is_square() || l.rows() != len {
        return Err(NifError::Shape(format!(
            "triangular factor {:?} against vector of length {len}",
            l.shape()
        )));
    }
    if let Some(i) = (0..l.rows()).find(|&i| l[(i, i)] == 0.0) {
        return Err(NifError::numeric_at(
            format!("zero diagonal entry at {i} in triangular factor"),
            i,
        ));
    }
    Ok(())
}

/// Solves `L y = b`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Result<Vector> {
    check_lower(l, b.len())?;
    let n = b.len();
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let row = l.row(i);
        let s: f64 = (0..i).map(|k| row[k] * y[k]).sum();
        y[i] = (b[i] - s) / row[i];
    }
    Ok(y)
}

/// Solves `Lᵀ x = y`.
pub fn solve_lower_transpose(l: &Matrix, y: &[f64]) -> Result<Vector> {
    check_lower(l, y.len())?;
    let n = y.len();
    let mut x = Vector::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Solves `(L Lᵀ) v = rhs`.
pub fn cholesky_solve(l: &Matrix, rhs: &[f64]) -> Result<Vector> {
    let y = solve_lower(l, rhs)?;
    solve_lower_transpose(l, &y)
}

/// `(L Lᵀ)⁻¹`, symmetric.
pub fn cholesky_inverse(l: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, &e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    inv.symmetrize();
    Ok(inv)
}

/// `ln |L Lᵀ| = 2 Σ ln Lᵢᵢ`
pub fn logdet_from_cholesky(l: &Matrix) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..l.rows() {
        let d = l[(i, i)];
        if !(d > 0.0) {
            return Err(NifError::numeric_at(
                format!("non-positive diagonal {d} at {i} in Cholesky factor"),
                i,
            ));
        }
        acc += d.ln();
    }
    Ok(2.0 * acc)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues (ascending) and the matrix whose columns are the
/// matching orthonormal eigenvectors.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vector, Matrix)> {
    if !m.is_square() {
        return Err(NifError::Shape(format!(
            "eigendecomposition of non-square {:?} matrix",
            m.shape()
        )));
    }
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    const MAX_SWEEPS: usize = 100;

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale * n as f64 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(NifError::numeric("Jacobi eigensolver did not converge"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values: Vector = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, new_j)] = v[(i, old_j)];
        }
    }
    Ok((values, vectors))
}

/// Symmetric square root of a PSD matrix; negative eigenvalues are clamped to 0.
pub fn sqrtm_psd(m: &Matrix) -> Result<Matrix> {
    if !m.is_symmetric(1e-8) {
        return Err(NifError::Precondition(
            "sqrtm_psd input is not symmetric".into(),
        ));
    }
    let (values, vectors) = symmetric_eigen(m)?;
    let n = m.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, lambda) in values.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        if root == 0.0 {
            continue;
        }
        let col = vectors.col(k);
        out.add_outer(root, &col, &col);
    }
    out.symmetrize();
    Ok(out)
}
