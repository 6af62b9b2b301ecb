use super::layers::{check_dim, check_stamp, fresh_stamp, parity_merge, parity_split};
use super::mlp::{Mlp, MlpCache};
use crate::error::{NifError, Result};
use crate::nif::{
    decode, intermediates, manifold_term, vjp_stochastic_inverse, DeviationScale, GaussianNifParams,
    StochasticInverse, LOG_SIGMA_MAX, LOG_SIGMA_MIN,
};
use crate::tensor::{Matrix, SeededRng, Vector};

/// Coupling across dimensions. Under the parity split `x = (x₁, x₂)` the
/// latent is the concatenation `z = [z₁; z₂]` with `z₁ = x₁` and
/// `x₂ ~ N(A z₂ + b(x₁), s·diag(exp ls(x₁)))`, where `A` is a learned
/// `n₂ × m₂` matrix and one MLP on `x₁` produces `(b, ls)`.
///
/// `invert` is the normalizing direction; its log contribution is the
/// inner layer's manifold term at `s = 1` regardless of the sampling scale.
#[derive(Clone, Debug)]
pub struct StochasticCoupling {
    dim: usize,
    a: Matrix,
    conditioner: Mlp,
    stamp: u64,
}

#[derive(Clone, Debug)]
pub struct StochasticCouplingCache {
    stamp: u64,
    inner: GaussianNifParams,
    inverse: StochasticInverse,
    raw_log_sigma: Vector,
    mlp: MlpCache,
}

impl StochasticCoupling {
    /// Starts from `A = [I; 0]`.
    pub fn new(dim: usize, latent_half: usize, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let n2 = dim / 2;
        let mut a = Matrix::zeros(n2, latent_half);
        for k in 0..latent_half.min(n2) {
            a[(k, k)] = 1.0;
        }
        StochasticCoupling::with_map(dim, a, hidden, rng)
    }

    pub fn with_map(dim: usize, a: Matrix, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let (n1, n2) = (dim.div_ceil(2), dim / 2);
        let m2 = a.cols();
        if a.rows() != n2 || m2 == 0 || m2 >= n2 {
            return Err(NifError::Shape(format!(
                "stochastic coupling over {dim} dims needs an {n2}×m₂ map with 1 ≤ m₂ < {n2}, got {}×{m2}",
                a.rows()
            )));
        }
        Ok(StochasticCoupling {
            dim,
            a,
            conditioner: Mlp::new(n1, hidden, 2 * n2, rng),
            stamp: fresh_stamp(),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.dim.div_ceil(2) + self.a.cols()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn num_params(&self) -> usize {
        self.a.data().len() + self.conditioner.num_params()
    }

    /// `[A (row-major), conditioner]`.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.a.data());
        self.conditioner.write_params(out);
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("stochastic coupling parameters", src.len(), self.num_params())?;
        let na = self.a.data().len();
        self.a.data_mut().copy_from_slice(&src[..na]);
        self.conditioner.read_params(&src[na..])?;
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// The inner NIF for a given `x₁`, plus the unclamped `ls` and the MLP cache.
    fn inner(&self, x1: &[f64]) -> Result<(GaussianNifParams, Vector, MlpCache)> {
        let (cond, cache) = self.conditioner.forward(x1);
        let n2 = self.dim / 2;
        let b = Vector::from(&cond[..n2]);
        let raw = Vector::from(&cond[n2..]);
        let p = GaussianNifParams::new(self.a.clone(), b, raw.clone())?;
        Ok((p, raw, cache))
    }

    /// Returns `x` and the manifold term at the generated `x₂`.
    pub fn generate(&self, z: &[f64], s: DeviationScale, rng: &mut SeededRng) -> Result<(Vector, f64)> {
        check_dim("latent", z.len(), self.latent_dim())?;
        let n1 = self.dim.div_ceil(2);
        let (z1, z2) = z.split_at(n1);
        let (inner, _, _) = self.inner(z1)?;
        let x2 = decode(&inner, z2, s, rng)?;
        let term = manifold_term(&inner, &x2, DeviationScale::MODEL)?;
        Ok((parity_merge(z1, &x2), term))
    }

    /// Returns `z` and the manifold term. `s = 0` yields the mean
    /// `Λ⁻¹u`; otherwise `z₂ = Λ⁻¹u + √s L⁻ᵀε`.
    pub fn invert(
        &self,
        x: &[f64],
        s: DeviationScale,
        rng: &mut SeededRng,
    ) -> Result<(Vector, f64, StochasticCouplingCache)> {
        check_dim("data", x.len(), self.dim)?;
        let (x1, x2) = parity_split(x);
        let (inner, raw_log_sigma, mlp) = self.inner(&x1)?;
        let aux = intermediates(&inner, &x2, DeviationScale::MODEL)?;
        let eps = if s.is_manifold() {
            Vector::zeros(self.a.cols())
        } else {
            rng.standard_normal(self.a.cols()).scale(s.value().sqrt())
        };
        let mut sample = aux.lambda.whiten_transpose(&eps)?;
        sample.axpy(1.0, &aux.mean);
        let term = aux.manifold_term();
        let mut z = x1.into_inner();
        z.extend_from_slice(&sample);
        let cache = StochasticCouplingCache {
            stamp: self.stamp,
            inner,
            inverse: StochasticInverse {
                sample,
                mean: aux.mean.clone(),
                eps,
                aux,
            },
            raw_log_sigma,
            mlp,
        };
        Ok((Vector::from(z), term, cache))
    }

    /// Reparameterized gradients of `invert` with `ε` held fixed.
    pub fn vjp(
        &self,
        cache: &StochasticCouplingCache,
        z_bar: &[f64],
        term_bar: f64,
        grad: &mut [f64],
    ) -> Result<Vector> {
        check_stamp(self.stamp, cache.stamp)?;
        check_dim("latent cotangent", z_bar.len(), self.latent_dim())?;
        let n1 = self.dim.div_ceil(2);
        let (z1_bar, z2_bar) = z_bar.split_at(n1);
        let g = vjp_stochastic_inverse(&cache.inner, &cache.inverse, z2_bar, term_bar)?;
        let na = self.a.data().len();
        let a_bar = g.a.as_ref().expect("dense inner map has a gradient");
        for (acc, v) in grad[..na].iter_mut().zip(a_bar.data()) {
            *acc += v;
        }
        let mut cond_bar = g.b.clone().into_inner();
        for (v, raw) in g.log_sigma.iter().zip(cache.raw_log_sigma.iter()) {
            let inside = (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(raw);
            cond_bar.push(if inside { *v } else { 0.0 });
        }
        let mut x1_bar = self.conditioner.backward(&cache.mlp, &cond_bar, &mut grad[na..]);
        x1_bar.axpy(1.0, z1_bar);
        Ok(parity_merge(&x1_bar, &g.x))
    }
}
