use std::sync::atomic::{AtomicU64, Ordering};

use super::mlp::{Mlp, MlpCache};
use crate::error::{NifError, Result};
use crate::tensor::{SeededRng, Vector};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

/// Identifies one parameter state of a layer. Caches record the stamp they
/// were produced under, and a VJP against a newer stamp is rejected.
pub(crate) fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn check_stamp(layer: u64, cache: u64) -> Result<()> {
    if layer == cache {
        Ok(())
    } else {
        Err(NifError::State(
            "cache was produced before the layer's parameters changed".into(),
        ))
    }
}

/// Dimension-preserving invertible layer.
///
/// `forward` is the normalizing direction and reports `ln|det ∂y/∂x|`;
/// `inverse` reports the negation. Gradients are available for `forward`.
pub trait Bijection {
    type Cache;

    fn dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn write_params(&self, out: &mut Vec<f64>);
    /// Replaces all parameters; `src` must hold exactly `num_params` values.
    fn read_params(&mut self, src: &[f64]) -> Result<()>;
    fn forward(&self, x: &[f64]) -> Result<(Vector, f64, Self::Cache)>;
    fn inverse(&self, y: &[f64]) -> Result<(Vector, f64)>;
    /// Accumulates parameter cotangents into `grad` and returns `x̄` given
    /// cotangents for the output and for the log-determinant.
    fn vjp(&self, cache: &Self::Cache, y_bar: &[f64], logdet_bar: f64, grad: &mut [f64]) -> Result<Vector>;
}

pub(crate) fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(NifError::Shape(format!("{what} has length {got}, expected {want}")))
    }
}

/// Even indices go to the first half, odd indices to the second.
pub fn parity_split(x: &[f64]) -> (Vector, Vector) {
    let first = x.iter().step_by(2).copied().collect();
    let second = x.iter().skip(1).step_by(2).copied().collect();
    (first, second)
}

/// Inverse of [`parity_split`].
pub fn parity_merge(first: &[f64], second: &[f64]) -> Vector {
    let mut out = Vector::zeros(first.len() + second.len());
    for (i, v) in first.iter().enumerate() {
        out[2 * i] = *v;
    }
    for (i, v) in second.iter().enumerate() {
        out[2 * i + 1] = *v;
    }
    out
}

// ActNorm ---------------------------------------------------------------------

/// `y = exp(log_scale) ⊙ x + bias`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    log_scale: Vector,
    bias: Vector,
    initialized: bool,
    stamp: u64,
}

#[derive(Clone, Debug)]
pub struct ActNormCache {
    stamp: u64,
    x: Vector,
}

impl ActNorm {
    /// Uninitialized: must see a batch via [`ActNorm::initialize`] first.
    pub fn new(dim: usize) -> Self {
        ActNorm {
            log_scale: Vector::zeros(dim),
            bias: Vector::zeros(dim),
            initialized: false,
            stamp: fresh_stamp(),
        }
    }

    /// Initialized to the identity map.
    pub fn identity(dim: usize) -> Self {
        let mut a = ActNorm::new(dim);
        a.initialized = true;
        a
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn set_initialized(&mut self, flag: bool) {
        self.initialized = flag;
        self.stamp = fresh_stamp();
    }

    pub fn log_scale(&self) -> &Vector {
        &self.log_scale
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    /// Chooses scale and bias so the batch leaves with zero mean and unit
    /// (population) standard deviation per dimension. Dimensions with no
    /// spread keep unit scale.
    pub fn initialize(&mut self, batch: &[Vector]) -> Result<()> {
        if batch.is_empty() {
            return Err(NifError::Precondition("ActNorm initialization needs a nonempty batch".into()));
        }
        let n = batch.len() as f64;
        for k in 0..self.dim() {
            let mean = batch.iter().map(|x| x[k]).sum::<f64>() / n;
            let var = batch.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let std = if std > 1e-12 { std } else { 1.0 };
            self.log_scale[k] = -std.ln();
            self.bias[k] = -mean / std;
        }
        self.initialized = true;
        self.stamp = fresh_stamp();
        Ok(())
    }

    fn ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(NifError::State("ActNorm used before data-dependent initialization".into()))
        }
    }
}

impl Bijection for ActNorm {
    type Cache = ActNormCache;

    fn dim(&self) -> usize {
        self.bias.len()
    }

    fn num_params(&self) -> usize {
        2 * self.dim()
    }

    /// `[log_scale, bias]`.
    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.log_scale);
        out.extend_from_slice(&self.bias);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("ActNorm parameters", src.len(), self.num_params())?;
        let d = self.dim();
        self.log_scale.copy_from_slice(&src[..d]);
        self.bias.copy_from_slice(&src[d..]);
        self.stamp = fresh_stamp();
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Result<(Vector, f64, ActNormCache)> {
        self.ready()?;
        check_dim("ActNorm input", x.len(), self.dim())?;
        let y = (0..x.len())
            .map(|k| self.log_scale[k].exp() * x[k] + self.bias[k])
            .collect();
        let cache = ActNormCache {
            stamp: self.stamp,
            x: Vector::from(x),
        };
        Ok((y, self.log_scale.iter().sum(), cache))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vector, f64)> {
        self.ready()?;
        check_dim("ActNorm input", y.len(), self.dim())?;
        let x = (0..y.len())
            .map(|k| (y[k] - self.bias[k]) * (-self.log_scale[k]).exp())
            .collect();
        Ok((x, -self.log_scale.iter().sum::<f64>()))
    }

    fn vjp(&self, cache: &ActNormCache, y_bar: &[f64], logdet_bar: f64, grad: &mut [f64]) -> Result<Vector> {
        check_stamp(self.stamp, cache.stamp)?;
        let d = self.dim();
        let mut x_bar = Vector::zeros(d);
        for k in 0..d {
            let scale = self.log_scale[k].exp();
            x_bar[k] = scale * y_bar[k];
            grad[k] += y_bar[k] * scale * cache.x[k] + logdet_bar;
            grad[d + k] += y_bar[k];
        }
        Ok(x_bar)
    }
}

// Affine coupling ---------------------------------------------------------------

/// `y₁ = x₁`, `y₂ = exp(2 tanh h(x₁)) ⊙ x₂ + t(x₁)` under the parity split,
/// with `(h, t)` produced by one MLP conditioner.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    dim: usize,
    conditioner: Mlp,
    stamp: u64,
}

#[derive(Clone, Debug)]
pub struct CouplingCache {
    stamp: u64,
    x2: Vector,
    tanh_h: Vector,
    scale: Vector,
    mlp: MlpCache,
}

impl AffineCoupling {
    pub fn new(dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if dim < 2 {
            return Err(NifError::Shape("affine coupling needs dimension ≥ 2".into()));
        }
        let (n1, n2) = (dim.div_ceil(2), dim / 2);
        Ok(AffineCoupling {
            dim,
            conditioner: Mlp::new(n1, hidden, 2 * n2, rng),
            stamp: fresh_stamp(),
        })
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    fn halves(&self, cond: &[f64]) -> (Vector, Vector) {
        let n2 = self.dim / 2;
        (Vector::from(&cond[..n2]), Vector::from(&cond[n2..]))
    }
}

impl Bijection for AffineCoupling {
    type Cache = CouplingCache;

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_params(&self) -> usize {
        self.conditioner.num_params()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.conditioner.write_params(out);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<()> {
        self.conditioner.read_params(src)?;
        self.stamp = fresh_stamp();
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Result<(Vector, f64, CouplingCache)> {
        check_dim("coupling input", x.len(), self.dim)?;
        let (x1, x2) = parity_split(x);
        let (cond, mlp) = self.conditioner.forward(&x1);
        let (h, t) = self.halves(&cond);
        let tanh_h: Vector = h.iter().map(|v| v.tanh()).collect();
        let scale: Vector = tanh_h.iter().map(|v| (2.0 * v).exp()).collect();
        let y2: Vector = (0..x2.len()).map(|i| scale[i] * x2[i] + t[i]).collect();
        let logdet = 2.0 * tanh_h.iter().sum::<f64>();
        let cache = CouplingCache {
            stamp: self.stamp,
            x2,
            tanh_h,
            scale,
            mlp,
        };
        Ok((parity_merge(&x1, &y2), logdet, cache))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vector, f64)> {
        check_dim("coupling input", y.len(), self.dim)?;
        let (y1, y2) = parity_split(y);
        let (h, t) = self.halves(&self.conditioner.eval(&y1));
        let mut logdet = 0.0;
        let x2: Vector = (0..y2.len())
            .map(|i| {
                let th = h[i].tanh();
                logdet -= 2.0 * th;
                (y2[i] - t[i]) * (-2.0 * th).exp()
            })
            .collect();
        Ok((parity_merge(&y1, &x2), logdet))
    }

    fn vjp(&self, cache: &CouplingCache, y_bar: &[f64], logdet_bar: f64, grad: &mut [f64]) -> Result<Vector> {
        check_stamp(self.stamp, cache.stamp)?;
        let (y1_bar, y2_bar) = parity_split(y_bar);
        let n2 = y2_bar.len();
        let mut cond_bar = Vector::zeros(2 * n2);
        let mut x2_bar = Vector::zeros(n2);
        for i in 0..n2 {
            let dscale = 2.0 * (1.0 - cache.tanh_h[i] * cache.tanh_h[i]);
            cond_bar[i] = (y2_bar[i] * cache.x2[i] * cache.scale[i] + logdet_bar) * dscale;
            cond_bar[n2 + i] = y2_bar[i];
            x2_bar[i] = cache.scale[i] * y2_bar[i];
        }
        let mut x1_bar = self.conditioner.backward(&cache.mlp, &cond_bar, grad);
        x1_bar.axpy(1.0, &y1_bar);
        Ok(parity_merge(&x1_bar, &x2_bar))
    }
}

// Permutation -------------------------------------------------------------------

/// `y[i] = x[perm[i]]`.
#[derive(Clone, Debug)]
pub struct Permutation {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(NifError::Precondition(format!("not a permutation: {perm:?}")));
            }
            inverse[p] = i;
        }
        Ok(Permutation { perm, inverse })
    }

    pub fn identity(dim: usize) -> Self {
        Permutation::new((0..dim).collect()).unwrap()
    }

    pub fn reverse(dim: usize) -> Self {
        Permutation::new((0..dim).rev().collect()).unwrap()
    }

    /// A permutation that moves indices across the parity split: reversal
    /// for even `dim`, a cyclic shift by one for odd `dim` (where reversal
    /// would keep every index's parity).
    pub fn alternating(dim: usize) -> Self {
        if dim % 2 == 0 {
            Permutation::reverse(dim)
        } else {
            Permutation::new((0..dim).map(|i| (i + 1) % dim).collect()).unwrap()
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }
}

impl Bijection for Permutation {
    type Cache = ();

    fn dim(&self) -> usize {
        self.perm.len()
    }

    fn num_params(&self) -> usize {
        0
    }

    fn write_params(&self, _out: &mut Vec<f64>) {}

    fn read_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("permutation parameters", src.len(), 0)
    }

    fn forward(&self, x: &[f64]) -> Result<(Vector, f64, ())> {
        check_dim("permutation input", x.len(), self.dim())?;
        Ok((self.perm.iter().map(|&p| x[p]).collect(), 0.0, ()))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vector, f64)> {
        check_dim("permutation input", y.len(), self.dim())?;
        Ok((self.inverse.iter().map(|&p| y[p]).collect(), 0.0))
    }

    fn vjp(&self, _cache: &(), y_bar: &[f64], _logdet_bar: f64, _grad: &mut [f64]) -> Result<Vector> {
        Ok(self.inverse.iter().map(|&p| y_bar[p]).collect())
    }
}
