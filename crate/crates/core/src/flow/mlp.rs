use crate::error::{NifError, Result};
use crate::tensor::{Matrix, SeededRng, Vector};

#[derive(Clone, Debug)]
struct Dense {
    w: Matrix,
    b: Vector,
}

/// Fully connected network with `tanh` hidden activations and a linear
/// output layer. The output layer starts at zero, so a fresh network maps
/// every input to `0`.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Layer inputs recorded by [`Mlp::forward`]; entry `l` feeds layer `l`.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Vector>,
}

impl Mlp {
    /// Hidden weights are drawn from `N(0, 1/fan_in)`.
    pub fn new(input: usize, hidden: &[usize], output: usize, rng: &mut SeededRng) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let mut w = Matrix::zeros(fan_out, fan_in);
                if l < last {
                    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                    w.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
                }
                Dense {
                    w,
                    b: Vector::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.rows()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|d| d.w.rows()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|d| d.w.data().len() + d.b.len()).sum()
    }

    /// Appends parameters as `[W₀ (row-major), b₀, W₁, b₁, …]`.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for d in &self.layers {
            out.extend_from_slice(d.w.data());
            out.extend_from_slice(&d.b);
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return Err(NifError::Shape(format!(
                "MLP expects {} parameters, got {}",
                self.num_params(),
                src.len()
            )));
        }
        let mut at = 0;
        for d in &mut self.layers {
            let nw = d.w.data().len();
            d.w.data_mut().copy_from_slice(&src[at..at + nw]);
            at += nw;
            let nb = d.b.len();
            d.b.copy_from_slice(&src[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Vector {
        self.forward(x).0
    }

    pub fn forward(&self, x: &[f64]) -> (Vector, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = Vector::from(x);
        for (l, d) in self.layers.iter().enumerate() {
            let mut next = d.w.matvec(&a).expect("MLP width mismatch");
            next.axpy(1.0, &d.b);
            if l + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(a);
            a = next;
        }
        (a, MlpCache { inputs })
    }

    /// Accumulates parameter cotangents into `grad` (laid out as in
    /// [`Mlp::write_params`]) and returns the input cotangent.
    pub fn backward(&self, cache: &MlpCache, out_bar: &[f64], grad: &mut [f64]) -> Vector {
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |at, d| {
                let start = *at;
                *at += d.w.data().len() + d.b.len();
                Some(start)
            })
            .collect();
        let mut delta = Vector::from(out_bar);
        for l in (0..self.layers.len()).rev() {
            let d = &self.layers[l];
            let input = &cache.inputs[l];
            let (rows, cols) = d.w.shape();
            let g = &mut grad[offsets[l]..offsets[l] + rows * cols + rows];
            for i in 0..rows {
                let row = &mut g[i * cols..(i + 1) * cols];
                for (gj, aj) in row.iter_mut().zip(input.iter()) {
                    *gj += delta[i] * aj;
                }
            }
            for i in 0..rows {
                g[rows * cols + i] += delta[i];
            }
            let mut prev = d.w.tmatvec(&delta).expect("MLP width mismatch");
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(input.iter()) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        delta
    }
}
