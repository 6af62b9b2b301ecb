use super::{clamp_log_sigma, GaussianNifParams, NoisyLinear, Precision, SymGrad};
use crate::error::{NifError, Result};
use crate::tensor::{Matrix, Vector};

/// Nearest-neighbour 2× upsampling as a NIF layer.
///
/// The implied `A` copies latent pixel `(c, i, j)` to the four output pixels
/// `(c, 2i+{0,1}, 2j+{0,1})` with weight 1. Each latent pixel owns a disjoint
/// set of rows of `A`, so `Λ = Aᵀ Σ⁻¹ A` is diagonal and every solve costs
/// `O(dim x)`. Images are flattened channel-major, then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleNifParams {
    channels: usize,
    height: usize,
    width: usize,
    b: Vector,
    log_sigma: Vector,
}

impl UpsampleNifParams {
    /// `height` and `width` describe the latent image.
    pub fn new(channels: usize, height: usize, width: usize, b: Vector, log_sigma: Vector) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(NifError::Shape("upsampling shape must be positive".into()));
        }
        let n = 4 * channels * height * width;
        if b.len() != n || log_sigma.len() != n {
            return Err(NifError::Shape(format!(
                "b ({}) and log_sigma ({}) must have length {n}",
                b.len(),
                log_sigma.len()
            )));
        }
        let log_sigma = log_sigma.iter().map(|v| clamp_log_sigma(*v)).collect();
        Ok(UpsampleNifParams {
            channels,
            height,
            width,
            b,
            log_sigma,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Latent index feeding output element `n`.
    pub fn parent(&self, n: usize) -> usize {
        let out_w = 2 * self.width;
        let plane = 4 * self.height * self.width;
        let (c, rem) = (n / plane, n % plane);
        let (r, col) = (rem / out_w, rem % out_w);
        c * self.height * self.width + (r / 2) * self.width + col / 2
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Vector, &mut Vector) {
        (&mut self.b, &mut self.log_sigma)
    }

    pub(crate) fn reclamp(&mut self) {
        for v in self.log_sigma.iter_mut() {
            *v = clamp_log_sigma(*v);
        }
    }

    pub fn dense_map(&self) -> Matrix {
        let mut a = Matrix::zeros(self.data_dim(), self.latent_dim());
        for n in 0..self.data_dim() {
            a[(n, self.parent(n))] = 1.0;
        }
        a
    }

    /// The same layer with `A` materialized.
    pub fn to_dense(&self) -> Result<GaussianNifParams> {
        GaussianNifParams::new(self.dense_map(), self.b.clone(), self.log_sigma.clone())
    }
}

impl NoisyLinear for UpsampleNifParams {
    fn data_dim(&self) -> usize {
        4 * self.channels * self.height * self.width
    }

    fn latent_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn offset(&self) -> &[f64] {
        &self.b
    }

    fn log_sigma(&self) -> &[f64] {
        &self.log_sigma
    }

    fn apply(&self, z: &[f64]) -> Vector {
        (0..self.data_dim()).map(|n| z[self.parent(n)]).collect()
    }

    fn apply_transpose(&self, y: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.latent_dim());
        for (n, v) in y.iter().enumerate() {
            out[self.parent(n)] += v;
        }
        out
    }

    fn gram(&self, d: &[f64]) -> Result<Precision> {
        Precision::diagonal(self.apply_transpose(d))
    }

    fn gram_vjp(&self, lambda_bar: &SymGrad, _d: &[f64], d_bar: &mut [f64], _a_bar: Option<&mut Matrix>) {
        let diag = lambda_bar.diag();
        for (n, g) in d_bar.iter_mut().enumerate() {
            *g += diag[self.parent(n)];
        }
    }

    fn has_learnable_map(&self) -> bool {
        false
    }
}
