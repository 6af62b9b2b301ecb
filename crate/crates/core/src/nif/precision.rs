use crate::error::{NifError, Result};
use crate::tensor::{
    cholesky, cholesky_inverse, cholesky_solve, logdet_from_cholesky, solve_lower,
    solve_lower_transpose, Matrix, Vector, DEFAULT_JITTER,
};

/// A factored symmetric positive-definite latent precision `Λ`.
///
/// The dense form keeps `Λ` and its Cholesky factor. The diagonal form is
/// what nearest-neighbour upsampling produces and makes every solve
/// elementwise.
#[derive(Clone, Debug)]
pub enum Precision {
    Dense { lambda: Matrix, chol: Matrix },
    Diagonal(Vector),
}

impl Precision {
    pub fn dense(lambda: Matrix) -> Result<Self> {
        let chol = cholesky(&lambda, DEFAULT_JITTER)?;
        Ok(Precision::Dense { lambda, chol })
    }

    pub fn diagonal(diag: Vector) -> Result<Self> {
        if let Some(i) = diag.iter().position(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(NifError::numeric_at(
                format!("diagonal precision entry {i} is {}", diag[i]),
                i,
            ));
        }
        Ok(Precision::Diagonal(diag))
    }

    pub fn dim(&self) -> usize {
        match self {
            Precision::Dense { lambda, .. } => lambda.rows(),
            Precision::Diagonal(d) => d.len(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        match self {
            Precision::Dense { lambda, .. } => lambda.clone(),
            Precision::Diagonal(d) => Matrix::from_diag(d),
        }
    }

    pub fn cholesky_factor(&self) -> Matrix {
        match self {
            Precision::Dense { chol, .. } => chol.clone(),
            Precision::Diagonal(d) => Matrix::from_diag(&d.iter().map(|v| v.sqrt()).collect::<Vec<_>>()),
        }
    }

    /// `Λ⁻¹ v`
    pub fn solve(&self, v: &[f64]) -> Result<Vector> {
        match self {
            Precision::Dense { chol, .. } => cholesky_solve(chol, v),
            Precision::Diagonal(d) => Ok(v.iter().zip(d.iter()).map(|(x, di)| x / di).collect()),
        }
    }

    /// `ln |Λ|`
    pub fn logdet(&self) -> Result<f64> {
        match self {
            Precision::Dense { chol, .. } => logdet_from_cholesky(chol),
            Precision::Diagonal(d) => Ok(d.iter().map(|v| v.ln()).sum()),
        }
    }

    /// `I + Λ`, refactored.
    pub fn plus_identity(&self) -> Result<Precision> {
        match self {
            Precision::Dense { lambda, .. } => {
                Precision::dense(lambda.add(&Matrix::identity(lambda.rows()))?)
            }
            Precision::Diagonal(d) => Precision::diagonal(d.iter().map(|v| v + 1.0).collect()),
        }
    }

    /// `L⁻ᵀ ε` with `Λ = L Lᵀ`: turns a standard normal draw into a
    /// `N(0, Λ⁻¹)` draw.
    pub fn whiten_transpose(&self, eps: &[f64]) -> Result<Vector> {
        match self {
            Precision::Dense { chol, .. } => solve_lower_transpose(chol, eps),
            Precision::Diagonal(d) => Ok(eps.iter().zip(d.iter()).map(|(e, di)| e / di.sqrt()).collect()),
        }
    }

    pub fn inverse(&self) -> Result<SymGrad> {
        match self {
            Precision::Dense { chol, .. } => Ok(SymGrad::Dense(cholesky_inverse(chol)?)),
            Precision::Diagonal(d) => Ok(SymGrad::Diagonal(d.iter().map(|v| 1.0 / v).collect())),
        }
    }

    pub fn zero_grad(&self) -> SymGrad {
        match self {
            Precision::Dense { lambda, .. } => SymGrad::Dense(Matrix::zeros(lambda.rows(), lambda.rows())),
            Precision::Diagonal(d) => SymGrad::Diagonal(Vector::zeros(d.len())),
        }
    }

    /// Cotangent on `Λ` induced by `z̄` through `z = L⁻ᵀ ε`.
    ///
    /// Dense case: `L̄ = −tril(v aᵀ)` with `v = L⁻ᵀε`, `a = L⁻¹z̄`, then the
    /// Cholesky adjoint `Λ̄ = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹)` where `Φ` keeps the lower
    /// triangle and halves the diagonal.
    pub fn whiten_transpose_vjp(&self, eps: &[f64], z_bar: &[f64]) -> Result<SymGrad> {
        match self {
            Precision::Diagonal(d) => Ok(SymGrad::Diagonal(
                d.iter()
                    .zip(eps)
                    .zip(z_bar)
                    .map(|((di, e), g)| -0.5 * g * e * di.powf(-1.5))
                    .collect(),
            )),
            Precision::Dense { chol, .. } => {
                let n = chol.rows();
                let v = solve_lower_transpose(chol, eps)?;
                let a = solve_lower(chol, z_bar)?;
                let mut l_bar = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        l_bar[(i, j)] = -v[i] * a[j];
                    }
                }
                // P = Φ(Lᵀ L̄)
                let mut p = chol.transpose().matmul(&l_bar)?;
                for i in 0..n {
                    p[(i, i)] *= 0.5;
                    for j in i + 1..n {
                        p[(i, j)] = 0.0;
                    }
                }
                // L⁻ᵀ P L⁻¹: solve column-wise, then row-wise.
                let mut tmp = Matrix::zeros(n, n);
                for j in 0..n {
                    let col = solve_lower_transpose(chol, &p.col(j))?;
                    for i in 0..n {
                        tmp[(i, j)] = col[i];
                    }
                }
                let mut out = Matrix::zeros(n, n);
                for i in 0..n {
                    let row = solve_lower_transpose(chol, tmp.row(i))?;
                    out.row_mut(i).copy_from_slice(&row);
                }
                out.symmetrize();
                Ok(SymGrad::Dense(out))
            }
        }
    }
}

/// Cotangent on a symmetric latent matrix, stored in the same structure as
/// the [`Precision`] it belongs to. For the diagonal form only diagonal
/// entries are tracked; off-diagonal contributions are dropped because a
/// diagonal `Λ` has no off-diagonal parameters to receive them.
#[derive(Clone, Debug)]
pub enum SymGrad {
    Dense(Matrix),
    Diagonal(Vector),
}

impl SymGrad {
    /// `self += k · sym(a bᵀ)`
    pub fn add_outer(&mut self, k: f64, a: &[f64], b: &[f64]) {
        match self {
            SymGrad::Dense(m) => {
                m.add_outer(0.5 * k, a, b);
                m.add_outer(0.5 * k, b, a);
            }
            SymGrad::Diagonal(d) => {
                for ((di, ai), bi) in d.iter_mut().zip(a).zip(b) {
                    *di += k * ai * bi;
                }
            }
        }
    }

    /// `self += k · other`
    pub fn add_scaled(&mut self, k: f64, other: &SymGrad) {
        match (self, other) {
            (SymGrad::Dense(m), SymGrad::Dense(o)) => {
                for (x, y) in m.data_mut().iter_mut().zip(o.data()) {
                    *x += k * y;
                }
            }
            (SymGrad::Diagonal(d), SymGrad::Diagonal(o)) => d.axpy(k, o),
            (SymGrad::Dense(m), SymGrad::Diagonal(o)) => {
                for (i, v) in o.iter().enumerate() {
                    m[(i, i)] += k * v;
                }
            }
            (SymGrad::Diagonal(d), SymGrad::Dense(o)) => d.axpy(k, &o.diag()),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        match self {
            SymGrad::Dense(m) => m.clone(),
            SymGrad::Diagonal(d) => Matrix::from_diag(d),
        }
    }

    /// Diagonal entries.
    pub fn diag(&self) -> Vector {
        match self {
            SymGrad::Dense(m) => m.diag(),
            SymGrad::Diagonal(d) => d.clone(),
        }
    }
}
