//! Flow stacks around a NIF layer: the NF baseline, NIF with a closed-form
//! Gaussian prior, and deep NIF with a second flow on the latent side.

use rayon::prelude::*;

use crate::error::{NifError, Result};
use crate::flow::{Bijection, FlowStack};
use crate::nif::{
    closed_form_logpx, decode, elbo_closed_form, pseudo_inverse, stochastic_inverse, vjp_closed_form_logpx,
    vjp_stochastic_inverse, DeviationScale, GaussianNifParams, NifGrads, NoisyLinear, Precision, SymGrad,
    UpsampleNifParams,
};
use crate::tensor::{random_orthonormal, std_normal_logpdf, symmetric_eigen, Matrix, SeededRng, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Nf,
    NifClosed,
    NifDeep,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Nf => "NF",
            Variant::NifClosed => "NIF_CLOSED",
            Variant::NifDeep => "NIF_DEEP",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "NF" => Some(Variant::Nf),
            "NIF_CLOSED" => Some(Variant::NifClosed),
            "NIF_DEEP" => Some(Variant::NifDeep),
            _ => None,
        }
    }
}

/// Prior variance multiplier used when sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t >= 0.0 {
            Ok(Temperature(t))
        } else {
            Err(NifError::Precondition(format!("temperature must be finite and ≥ 0, got {t}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    /// Pseudo-inverse `Λ⁻¹u`.
    Deterministic,
    /// One draw from the stochastic inverse at `s = 1`.
    Stochastic,
}

#[derive(Clone, Debug)]
pub enum NifLayer {
    Dense(GaussianNifParams),
    Upsample(UpsampleNifParams),
}

impl NoisyLinear for NifLayer {
    fn data_dim(&self) -> usize {
        self.inner().data_dim()
    }
    fn latent_dim(&self) -> usize {
        self.inner().latent_dim()
    }
    fn offset(&self) -> &[f64] {
        self.inner().offset()
    }
    fn log_sigma(&self) -> &[f64] {
        self.inner().log_sigma()
    }
    fn apply(&self, z: &[f64]) -> Vector {
        self.inner().apply(z)
    }
    fn apply_transpose(&self, y: &[f64]) -> Vector {
        self.inner().apply_transpose(y)
    }
    fn gram(&self, d: &[f64]) -> Result<Precision> {
        self.inner().gram(d)
    }
    fn gram_vjp(&self, lambda_bar: &SymGrad, d: &[f64], d_bar: &mut [f64], a_bar: Option<&mut Matrix>) {
        self.inner().gram_vjp(lambda_bar, d, d_bar, a_bar)
    }
    fn has_learnable_map(&self) -> bool {
        self.inner().has_learnable_map()
    }
}

impl NifLayer {
    fn inner(&self) -> &dyn NoisyLinear {
        match self {
            NifLayer::Dense(p) => p,
            NifLayer::Upsample(p) => p,
        }
    }

    pub fn num_params(&self) -> usize {
        let n = self.data_dim();
        match self {
            NifLayer::Dense(p) => p.a().data().len() + 2 * n,
            NifLayer::Upsample(_) => 2 * n,
        }
    }

    /// Dense: `[A (row-major), b, log_sigma]`; upsampling: `[b, log_sigma]`.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        if let NifLayer::Dense(p) = self {
            out.extend_from_slice(p.a().data());
        }
        out.extend_from_slice(self.offset());
        out.extend_from_slice(self.log_sigma());
    }

    /// Replaces the parameters, clamping `log_sigma` into range.
    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(NifError::Shape(format!(
                "NIF layer expects {} parameters, got {}",
                self.num_params(),
                src.len()
            )));
        }
        let n = self.data_dim();
        match self {
            NifLayer::Dense(p) => {
                let (a, b, ls) = p.parts_mut();
                let na = a.data().len();
                a.data_mut().copy_from_slice(&src[..na]);
                b.copy_from_slice(&src[na..na + n]);
                ls.copy_from_slice(&src[na + n..]);
                p.reclamp();
            }
            NifLayer::Upsample(p) => {
                let (b, ls) = p.parts_mut();
                b.copy_from_slice(&src[..n]);
                ls.copy_from_slice(&src[n..]);
                p.reclamp();
            }
        }
        Ok(())
    }

    fn accumulate(&self, g: &NifGrads, grad: &mut [f64]) {
        let mut at = 0;
        if let Some(a) = &g.a {
            for (acc, v) in grad.iter_mut().zip(a.data()) {
                *acc += v;
            }
            at = a.data().len();
        }
        let n = g.b.len();
        for i in 0..n {
            grad[at + i] += g.b[i];
            grad[at + n + i] += g.log_sigma[i];
        }
    }
}

/// Architecture of a freshly built model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub data_dim: usize,
    /// Ignored by NF, whose latent has the data dimension.
    pub latent_dim: usize,
    /// Coupling blocks in the data-side flow.
    pub couplings: usize,
    /// Coupling blocks in the latent-side flow (NIF_DEEP only).
    pub latent_couplings: usize,
    pub hidden: Vec<usize>,
    /// Latent image `(channels, height, width)`: selects the upsampling
    /// NIF layer instead of a dense one.
    pub upsample: Option<(usize, usize, usize)>,
    /// Monte-Carlo draws per example for the NIF_DEEP bound.
    pub elbo_samples: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    variant: Variant,
    high: FlowStack,
    nif: Option<NifLayer>,
    low: FlowStack,
    elbo_samples: usize,
    /// Whether the dense NIF layer has had its data-dependent fit.
    nif_fitted: bool,
}

/// A log-density value and whether it is exact or a lower bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogProb {
    pub value: f64,
    pub exact: bool,
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let n = cfg.data_dim;
        if n == 0 {
            return Err(NifError::Shape("data dimension must be positive".into()));
        }
        let high = FlowStack::standard(n, cfg.couplings, &cfg.hidden, rng)?;
        let (nif, low) = match cfg.variant {
            Variant::Nf => (None, FlowStack::empty(n)),
            _ => {
                let nif = match cfg.upsample {
                    Some((c, h, w)) => NifLayer::Upsample(UpsampleNifParams::new(
                        c,
                        h,
                        w,
                        Vector::zeros(n),
                        Vector::zeros(n),
                    )?),
                    None => {
                        let m = cfg.latent_dim;
                        if m == 0 || m > n {
                            return Err(NifError::Shape(format!(
                                "latent dimension {m} must be in 1..={n}"
                            )));
                        }
                        let a = random_orthonormal(n, m, rng);
                        NifLayer::Dense(GaussianNifParams::new(a, Vector::zeros(n), Vector::zeros(n))?)
                    }
                };
                let m = nif.latent_dim();
                let low = if cfg.variant == Variant::NifDeep {
                    FlowStack::standard(m, cfg.latent_couplings, &cfg.hidden, rng)?
                } else {
                    FlowStack::empty(m)
                };
                (Some(nif), low)
            }
        };
        let mut model = Model::from_parts(cfg.variant, high, nif, low, cfg.elbo_samples.max(1))?;
        model.nif_fitted = model.nif.is_none();
        Ok(model)
    }

    pub fn from_parts(
        variant: Variant,
        high: FlowStack,
        nif: Option<NifLayer>,
        low: FlowStack,
        elbo_samples: usize,
    ) -> Result<Self> {
        let shape = |m: String| Err(NifError::Shape(m));
        match (&variant, &nif) {
            (Variant::Nf, Some(_)) => return shape("NF model cannot have a NIF layer".into()),
            (Variant::Nf, None) => {
                if !low.is_empty() || low.dim() != high.dim() {
                    return shape("NF model has no latent-side flow".into());
                }
            }
            (_, None) => return shape(format!("{} model needs a NIF layer", variant.as_str())),
            (_, Some(p)) => {
                if p.data_dim() != high.dim() || p.latent_dim() != low.dim() {
                    return shape(format!(
                        "NIF layer {}→{} does not chain with flows over {} and {}",
                        p.latent_dim(),
                        p.data_dim(),
                        low.dim(),
                        high.dim()
                    ));
                }
                if variant == Variant::NifClosed && !low.is_empty() {
                    return shape("NIF_CLOSED model has no latent-side flow".into());
                }
            }
        }
        if elbo_samples == 0 {
            return Err(NifError::Precondition("elbo_samples must be ≥ 1".into()));
        }
        Ok(Model {
            variant,
            high,
            nif,
            low,
            elbo_samples,
            nif_fitted: true,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn data_dim(&self) -> usize {
        self.high.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.low.dim()
    }

    pub fn high_flow(&self) -> &FlowStack {
        &self.high
    }

    pub fn high_flow_mut(&mut self) -> &mut FlowStack {
        &mut self.high
    }

    pub fn low_flow(&self) -> &FlowStack {
        &self.low
    }

    pub fn low_flow_mut(&mut self) -> &mut FlowStack {
        &mut self.low
    }

    pub fn nif(&self) -> Option<&NifLayer> {
        self.nif.as_ref()
    }

    pub fn elbo_samples(&self) -> usize {
        self.elbo_samples
    }

    pub fn set_elbo_samples(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(NifError::Precondition("elbo_samples must be ≥ 1".into()));
        }
        self.elbo_samples = k;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.high.is_initialized() && self.low.is_initialized() && self.nif_fitted
    }

    /// Data-dependent initialization; already initialized parts are left
    /// alone. A fresh dense NIF layer is fitted by probabilistic PCA to the
    /// batch as seen through the data-side flow, and the latent-side flow
    /// is initialized from the pseudo-inverses of the batch.
    pub fn initialize(&mut self, batch: &[Vector]) -> Result<()> {
        let vs = self.high.initialize(batch)?;
        if !self.nif_fitted {
            if let Some(NifLayer::Dense(p)) = &mut self.nif {
                *p = ppca_fit(p, &vs)?;
            }
            self.nif_fitted = true;
        }
        if let Some(nif) = &self.nif {
            if !self.low.is_initialized() {
                let us = vs
                    .iter()
                    .map(|v| pseudo_inverse(nif, v))
                    .collect::<Result<Vec<_>>>()?;
                self.low.initialize(&us)?;
            }
        }
        Ok(())
    }

    /// Marks every ActNorm initialized at its current parameters.
    pub fn mark_initialized(&mut self) {
        self.high.mark_initialized();
        self.low.mark_initialized();
        self.nif_fitted = true;
    }

    pub fn num_params(&self) -> usize {
        self.high.num_params() + self.nif.as_ref().map_or(0, |p| p.num_params()) + self.low.num_params()
    }

    /// `[data-side flow, NIF layer, latent-side flow]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.high.write_params(&mut out);
        if let Some(p) = &self.nif {
            p.write_params(&mut out);
        }
        self.low.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(NifError::Shape(format!(
                "model expects {} parameters, got {}",
                self.num_params(),
                src.len()
            )));
        }
        let (h, rest) = src.split_at(self.high.num_params());
        let nn = self.nif.as_ref().map_or(0, |p| p.num_params());
        let (mid, l) = rest.split_at(nn);
        self.high.read_params(h)?;
        if let Some(p) = &mut self.nif {
            p.read_params(mid)?;
        }
        self.low.read_params(l)
    }

    pub fn log_prob(&self, x: &[f64], rng: &mut SeededRng) -> Result<LogProb> {
        Ok(LogProb {
            value: self.evaluate(x, rng, None)?,
            exact: self.variant != Variant::NifDeep,
        })
    }

    /// The variational bound with the expectation over the stochastic
    /// inverse taken exactly. NIF_CLOSED only.
    pub fn elbo_closed_form(&self, x: &[f64]) -> Result<f64> {
        if self.variant != Variant::NifClosed {
            return Err(NifError::Precondition("closed-form ELBO needs a NIF_CLOSED model".into()));
        }
        let (v, ld, _) = self.high.forward(x)?;
        Ok(ld + elbo_closed_form(self.nif.as_ref().unwrap(), &v)?)
    }

    /// `log p(x)` (or its bound), adding `∂/∂θ` into `grad` when given.
    fn evaluate(&self, x: &[f64], rng: &mut SeededRng, grad: Option<&mut [f64]>) -> Result<f64> {
        let nif_index = self.high.layers().len();
        let (v, ld_high, cache_high) = self.high.forward(x)?;
        let (high_grad, nif_grad, low_grad) = match grad {
            Some(g) => {
                let (h, rest) = g.split_at_mut(self.high.num_params());
                let (n, l) = rest.split_at_mut(self.nif.as_ref().map_or(0, |p| p.num_params()));
                (Some(h), Some(n), Some(l))
            }
            None => (None, None, None),
        };
        let want_grad = high_grad.is_some();
        let (inner, v_bar) = match (&self.nif, self.variant) {
            (None, _) => (std_normal_logpdf(&v), v.scale(-1.0)),
            (Some(nif), Variant::NifClosed) => {
                let value = closed_form_logpx(nif, &v)?;
                let mut v_bar = Vector::zeros(0);
                if let Some(ng) = nif_grad {
                    let g = vjp_closed_form_logpx(nif, &v, 1.0)?;
                    nif.accumulate(&g, ng);
                    v_bar = g.x;
                }
                (value, v_bar)
            }
            (Some(nif), _) => {
                let weight = 1.0 / self.elbo_samples as f64;
                let mut total = 0.0;
                let mut v_bar = Vector::zeros(v.len());
                let mut nif_grad = nif_grad;
                let mut low_grad = low_grad;
                for _ in 0..self.elbo_samples {
                    let inv = stochastic_inverse(nif, &v, DeviationScale::MODEL, rng)?;
                    let (z, ld_low, cache_low) = self.low.forward(&inv.sample)?;
                    total += weight * (std_normal_logpdf(&z) + ld_low + inv.aux.manifold_term());
                    if let (Some(ng), Some(lg)) = (nif_grad.as_deref_mut(), low_grad.as_deref_mut()) {
                        let u_bar = self.low.vjp(&cache_low, &z.scale(-weight), weight, lg)?;
                        let g = vjp_stochastic_inverse(nif, &inv, &u_bar, weight)?;
                        nif.accumulate(&g, ng);
                        v_bar.axpy(1.0, &g.x);
                    }
                }
                (total, v_bar)
            }
        };
        let value = ld_high + inner;
        if !value.is_finite() {
            return Err(NifError::numeric_at(
                format!("non-finite log density after layer {nif_index}"),
                nif_index,
            ));
        }
        if want_grad {
            self.high.vjp(&cache_high, &v_bar, 1.0, high_grad.unwrap())?;
        }
        Ok(value)
    }

    /// `−mean log p(x)` over `batch` and its gradient. Examples are
    /// evaluated in parallel with per-example child streams and summed in
    /// order, so the result does not depend on the thread count.
    pub fn loss_and_grads(&self, batch: &[Vector], rng: &mut SeededRng) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(NifError::Precondition("empty batch".into()));
        }
        let base = SeededRng::new(rng.next_u64());
        let per_example: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut child = base.child(i as u64);
                let mut grad = vec![0.0; self.num_params()];
                let value = self.evaluate(x, &mut child, Some(&mut grad)).map_err(|e| match e {
                    NifError::Numeric { message, .. } => {
                        NifError::numeric_at(format!("example {i}: {message}"), i)
                    }
                    other => other,
                })?;
                Ok((value, grad))
            })
            .collect::<Result<_>>()?;
        let scale = -1.0 / batch.len() as f64;
        let mut grads = vec![0.0; self.num_params()];
        let mut total = 0.0;
        for (value, g) in &per_example {
            total += value;
            for (acc, v) in grads.iter_mut().zip(g) {
                *acc += v;
            }
        }
        grads.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, grads))
    }

    /// `z ~ N(0, tI)`, pushed through the latent flow, the NIF decoder at
    /// deviation scale `s`, and the data-side flow. NF ignores `s`.
    pub fn sample(&self, t: Temperature, s: DeviationScale, rng: &mut SeededRng) -> Result<Vector> {
        let z = rng.standard_normal(self.latent_dim()).scale(t.value().sqrt());
        let pre = match &self.nif {
            None => z,
            Some(nif) => {
                let (u, _) = self.low.inverse(&z)?;
                decode(nif, &u, s, rng)?
            }
        };
        Ok(self.high.inverse(&pre)?.0)
    }

    pub fn embed(&self, x: &[f64], mode: EmbedMode, rng: &mut SeededRng) -> Result<Vector> {
        let (v, _, _) = self.high.forward(x)?;
        let u = match (&self.nif, mode) {
            (None, _) => return Ok(v),
            (Some(nif), EmbedMode::Deterministic) => pseudo_inverse(nif, &v)?,
            (Some(nif), EmbedMode::Stochastic) => stochastic_inverse(nif, &v, DeviationScale::MODEL, rng)?.sample,
        };
        Ok(self.low.forward(&u)?.0)
    }

    /// Projection of `x` onto the model manifold through the flows.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vector> {
        let mut unused = SeededRng::new(0);
        let z = self.embed(x, EmbedMode::Deterministic, &mut unused)?;
        let pre = match &self.nif {
            None => z,
            Some(nif) => {
                let (u, _) = self.low.inverse(&z)?;
                decode(nif, &u, DeviationScale::MANIFOLD, &mut unused)?
            }
        };
        Ok(self.high.inverse(&pre)?.0)
    }
}

/// Maximum-likelihood probabilistic PCA of `vs`: `b` is the mean, `A` the
/// top `M` principal directions scaled by `√(λ − σ²)`, and `Σ = σ² I` with
/// `σ²` the mean variance left outside them. With fewer points than
/// dimensions the eigenproblem is solved on the Gram matrix. Keeps the
/// current `A` when the batch spans fewer than `M` directions.
fn ppca_fit(current: &GaussianNifParams, vs: &[Vector]) -> Result<GaussianNifParams> {
    let (n, m) = current.a().shape();
    let count = vs.len();
    if count == 0 {
        return Err(NifError::Precondition("cannot fit the NIF layer to an empty batch".into()));
    }
    let mut mean = Vector::zeros(n);
    vs.iter().for_each(|v| mean.axpy(1.0 / count as f64, v));
    let centered: Vec<Vector> = vs.iter().map(|v| v.sub(&mean)).collect();
    let total = centered.iter().map(|c| c.norm_sq()).sum::<f64>() / count as f64;

    let (values, directions) = if count > n {
        let mut cov = Matrix::zeros(n, n);
        centered.iter().for_each(|c| cov.add_outer(1.0 / count as f64, c, c));
        let (vals, vecs) = symmetric_eigen(&cov)?;
        let top: Vec<usize> = (n - m..n).rev().collect();
        (top.iter().map(|&k| vals[k]).collect::<Vec<_>>(), top.iter().map(|&k| vecs.col(k)).collect::<Vec<_>>())
    } else {
        let mut gram = Matrix::zeros(count, count);
        for i in 0..count {
            for j in 0..=i {
                let g = centered[i].dot(&centered[j]) / count as f64;
                gram.row_mut(i)[j] = g;
                gram.row_mut(j)[i] = g;
            }
        }
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let floor = 1e-12 * total.max(f64::MIN_POSITIVE);
        if m > count || vals[count - m] <= floor {
            let keep = GaussianNifParams::new(current.a().clone(), mean, current.log_sigma().to_vec().into())?;
            return Ok(keep);
        }
        let top: Vec<usize> = (count - m..count).rev().collect();
        let dirs = top
            .iter()
            .map(|&k| {
                let u = vecs.col(k);
                let mut w = Vector::zeros(n);
                centered.iter().zip(u.iter()).for_each(|(c, ui)| w.axpy(*ui, c));
                let norm = w.norm();
                w.scale(1.0 / norm)
            })
            .collect();
        (top.iter().map(|&k| vals[k]).collect(), dirs)
    };

    let kept: f64 = values.iter().sum();
    let sigma2 = if n > m { ((total - kept) / (n - m) as f64).max(0.0) } else { 0.0 };
    let sigma2 = sigma2.max(1e-6 * total / n as f64).max(f64::MIN_POSITIVE);
    let mut a = Matrix::zeros(n, m);
    for (j, (lambda, w)) in values.iter().zip(&directions).enumerate() {
        let scale = (lambda - sigma2).max(1e-3 * sigma2).sqrt();
        for i in 0..n {
            a.row_mut(i)[j] = scale * w[i];
        }
    }
    GaussianNifParams::new(a, mean, Vector::filled(n, sigma2.ln()))
}
