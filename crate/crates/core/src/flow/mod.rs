//! Invertible layers and the stochastic coupling layer.

mod layers;
mod mlp;
mod stochastic;

pub use layers::{
    parity_merge, parity_split, ActNorm, ActNormCache, AffineCoupling, Bijection, CouplingCache, Permutation,
};
pub use mlp::{Mlp, MlpCache};
pub use stochastic::{StochasticCoupling, StochasticCouplingCache};

use crate::error::{NifError, Result};
use crate::tensor::{SeededRng, Vector};

#[derive(Clone, Debug)]
pub enum FlowLayer {
    ActNorm(ActNorm),
    Coupling(AffineCoupling),
    Permutation(Permutation),
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    ActNorm(ActNormCache),
    Coupling(CouplingCache),
    Permutation,
}

impl FlowLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::ActNorm(_) => "actnorm",
            FlowLayer::Coupling(_) => "coupling",
            FlowLayer::Permutation(_) => "permutation",
        }
    }
}

impl Bijection for FlowLayer {
    type Cache = LayerCache;

    fn dim(&self) -> usize {
        match self {
            FlowLayer::ActNorm(l) => l.dim(),
            FlowLayer::Coupling(l) => l.dim(),
            FlowLayer::Permutation(l) => l.dim(),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            FlowLayer::ActNorm(l) => l.num_params(),
            FlowLayer::Coupling(l) => l.num_params(),
            FlowLayer::Permutation(l) => l.num_params(),
        }
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            FlowLayer::ActNorm(l) => l.write_params(out),
            FlowLayer::Coupling(l) => l.write_params(out),
            FlowLayer::Permutation(l) => l.write_params(out),
        }
    }

    fn read_params(&mut self, src: &[f64]) -> Result<()> {
        match self {
            FlowLayer::ActNorm(l) => l.read_params(src),
            FlowLayer::Coupling(l) => l.read_params(src),
            FlowLayer::Permutation(l) => l.read_params(src),
        }
    }

    fn forward(&self, x: &[f64]) -> Result<(Vector, f64, LayerCache)> {
        Ok(match self {
            FlowLayer::ActNorm(l) => {
                let (y, ld, c) = l.forward(x)?;
                (y, ld, LayerCache::ActNorm(c))
            }
            FlowLayer::Coupling(l) => {
                let (y, ld, c) = l.forward(x)?;
                (y, ld, LayerCache::Coupling(c))
            }
            FlowLayer::Permutation(l) => {
                let (y, ld, ()) = l.forward(x)?;
                (y, ld, LayerCache::Permutation)
            }
        })
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vector, f64)> {
        match self {
            FlowLayer::ActNorm(l) => l.inverse(y),
            FlowLayer::Coupling(l) => l.inverse(y),
            FlowLayer::Permutation(l) => l.inverse(y),
        }
    }

    fn vjp(&self, cache: &LayerCache, y_bar: &[f64], logdet_bar: f64, grad: &mut [f64]) -> Result<Vector> {
        match (self, cache) {
            (FlowLayer::ActNorm(l), LayerCache::ActNorm(c)) => l.vjp(c, y_bar, logdet_bar, grad),
            (FlowLayer::Coupling(l), LayerCache::Coupling(c)) => l.vjp(c, y_bar, logdet_bar, grad),
            (FlowLayer::Permutation(l), LayerCache::Permutation) => l.vjp(&(), y_bar, logdet_bar, grad),
            _ => Err(NifError::State("cache belongs to a different layer kind".into())),
        }
    }
}

/// Composition of [`FlowLayer`]s. `forward` runs the layers in order (data
/// towards latent); `inverse` runs them backwards.
#[derive(Clone, Debug)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<FlowLayer>,
}

#[derive(Clone, Debug)]
pub struct StackCache {
    layers: Vec<LayerCache>,
}

impl FlowStack {
    pub fn empty(dim: usize) -> Self {
        FlowStack {
            dim,
            layers: Vec::new(),
        }
    }

    /// `couplings` repetitions of ActNorm → affine coupling → permutation.
    /// One-dimensional stacks get a single ActNorm, since coupling needs two
    /// dimensions.
    pub fn standard(dim: usize, couplings: usize, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let mut stack = FlowStack::empty(dim);
        if couplings == 0 {
            return Ok(stack);
        }
        if dim < 2 {
            stack.push(FlowLayer::ActNorm(ActNorm::new(dim)))?;
            return Ok(stack);
        }
        for _ in 0..couplings {
            stack.push(FlowLayer::ActNorm(ActNorm::new(dim)))?;
            stack.push(FlowLayer::Coupling(AffineCoupling::new(dim, hidden, rng)?))?;
            stack.push(FlowLayer::Permutation(Permutation::alternating(dim)))?;
        }
        Ok(stack)
    }

    pub fn push(&mut self, layer: FlowLayer) -> Result<()> {
        layers::check_dim("layer", layer.dim(), self.dim)?;
        self.layers.push(layer);
        Ok(())
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            FlowLayer::ActNorm(a) => a.is_initialized(),
            _ => true,
        })
    }

    /// Marks every ActNorm as initialized without touching its parameters.
    pub fn mark_initialized(&mut self) {
        for l in &mut self.layers {
            if let FlowLayer::ActNorm(a) = l {
                a.set_initialized(true);
            }
        }
    }

    /// Pushes `batch` through the stack, initializing each uninitialized
    /// ActNorm from the activations that reach it. Returns the batch's
    /// image under the whole stack.
    pub fn initialize(&mut self, batch: &[Vector]) -> Result<Vec<Vector>> {
        let mut current = batch.to_vec();
        for layer in &mut self.layers {
            if let FlowLayer::ActNorm(a) = layer {
                if !a.is_initialized() {
                    a.initialize(&current)?;
                }
            }
            current = current
                .iter()
                .map(|x| layer.forward(x).map(|(y, _, _)| y))
                .collect::<Result<_>>()?;
        }
        Ok(current)
    }

    fn offsets(&self) -> Vec<usize> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let start = at;
                at += l.num_params();
                start
            })
            .collect()
    }
}

fn finite_or_layer(v: &Vector, ld: f64, index: usize) -> Result<()> {
    if v.all_finite() && ld.is_finite() {
        Ok(())
    } else {
        Err(NifError::numeric_at(format!("non-finite output from flow layer {index}"), index))
    }
}

impl Bijection for FlowStack {
    type Cache = StackCache;

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            l.write_params(out);
        }
    }

    fn read_params(&mut self, src: &[f64]) -> Result<()> {
        layers::check_dim("flow parameters", src.len(), self.num_params())?;
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.num_params();
            l.read_params(&src[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Result<(Vector, f64, StackCache)> {
        layers::check_dim("flow input", x.len(), self.dim)?;
        let mut v = Vector::from(x);
        let mut total = 0.0;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld, c) = layer.forward(&v)?;
            finite_or_layer(&y, ld, i)?;
            total += ld;
            caches.push(c);
            v = y;
        }
        Ok((v, total, StackCache { layers: caches }))
    }

    fn inverse(&self, y: &[f64]) -> Result<(Vector, f64)> {
        layers::check_dim("flow input", y.len(), self.dim)?;
        let mut v = Vector::from(y);
        let mut total = 0.0;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (x, ld) = layer.inverse(&v)?;
            finite_or_layer(&x, ld, i)?;
            total += ld;
            v = x;
        }
        Ok((v, total))
    }

    fn vjp(&self, cache: &StackCache, y_bar: &[f64], logdet_bar: f64, grad: &mut [f64]) -> Result<Vector> {
        if cache.layers.len() != self.layers.len() {
            return Err(NifError::State("cache depth does not match the stack".into()));
        }
        let offsets = self.offsets();
        let mut bar = Vector::from(y_bar);
        for i in (0..self.layers.len()).rev() {
            let n = self.layers[i].num_params();
            let g = &mut grad[offsets[i]..offsets[i] + n];
            bar = self.layers[i].vjp(&cache.layers[i], &bar, logdet_bar, g)?;
        }
        Ok(bar)
    }
}

#[cfg(test)]
mod tests;
