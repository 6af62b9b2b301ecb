//! Minibatch training with Adam, bits per dimension, and checkpoints.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::collections::BTreeMap;
use std::io::Write;

use crate::data::{minibatch_indices, Dataset};
use crate::error::{NifError, Result};
use crate::eval::bpd_over_dataset;
use crate::model::{Model, ModelConfig, Variant};
use crate::tensor::{SeededRng, Vector};

/// `−log p / (dim · ln 2)`, plus 8 bits when the density is over data
/// rescaled from bytes to `[0, 1)`.
pub fn bits_per_dim(log_prob_nats: f64, dim: usize, dequantized_256: bool) -> f64 {
    let bits = -log_prob_nats / (dim as f64 * std::f64::consts::LN_2);
    if dequantized_256 {
        bits + 8.0
    } else {
        bits
    }
}

/// Uniform dequantization of byte values: `(k + u) / 256`, `u ~ U[0, 1)`.
pub fn dequantize(x: &[f64], rng: &mut SeededRng) -> Vector {
    x.iter().map(|k| (k + rng.uniform()) / 256.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub variant: Variant,
    pub latent_dim: usize,
    pub couplings: usize,
    pub latent_couplings: usize,
    pub hidden: Vec<usize>,
    /// Latent image `(channels, height, width)` for the upsampling layer.
    pub upsample: Option<(usize, usize, usize)>,
    pub elbo_samples: usize,
    pub dequantize: bool,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            seed,
            batch_size: 64,
            steps: 2000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 10.0,
            variant: Variant::NifClosed,
            latent_dim: 2,
            couplings: 6,
            latent_couplings: 2,
            hidden: vec![64, 64],
            upsample: None,
            elbo_samples: 1,
            dequantize: false,
            eval_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(NifError::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("batch_size", self.batch_size)?;
        positive("steps", self.steps)?;
        positive("eval_every", self.eval_every)?;
        positive("elbo_samples", self.elbo_samples)?;
        if self.variant != Variant::Nf && self.upsample.is_none() {
            positive("latent_dim", self.latent_dim)?;
        }
        if self.hidden.iter().any(|h| *h == 0) {
            return Err(NifError::config("hidden", "widths must be positive"));
        }
        for (key, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NifError::config(key, "must be positive and finite"));
            }
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(NifError::config(key, "must lie in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, data_dim: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            data_dim,
            latent_dim: self.latent_dim,
            couplings: self.couplings,
            latent_couplings: self.latent_couplings,
            hidden: self.hidden.clone(),
            upsample: self.upsample,
            elbo_samples: self.elbo_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            clip_norm: c.grad_clip_norm,
        }
    }
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// One bias-corrected Adam update after global-norm clipping. Non-finite
/// gradients abort the step and leave `state` and `params` untouched.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(NifError::Shape(format!(
            "Adam state for {} parameters got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NifError::numeric_at(format!("non-finite gradient at parameter {i}"), i));
    }
    let mut g = grads.to_vec();
    clip_global_norm(&mut g, cfg.clip_norm);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..g.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Training loss of every completed step, `NaN` for aborted ones.
    pub losses: Vec<f64>,
    /// Indices of steps skipped because of a numeric failure.
    pub aborted: Vec<usize>,
}

fn batch_inputs(data: &[Vector], idx: &[usize], dequant: bool, rng: &mut SeededRng) -> Vec<Vector> {
    idx.iter()
        .map(|&i| {
            if dequant {
                dequantize(&data[i], rng)
            } else {
                data[i].clone()
            }
        })
        .collect()
}

/// Runs the training loop on the `Train` split, writing `step,loss,bpd`
/// lines to `sink` every `eval_every` steps and after the last one. The
/// evaluation BPD uses the `Test` split when it is nonempty.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    extra: BTreeMap<String, String>,
    sink: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = dataset.train();
    if train_set.is_empty() {
        return Err(NifError::Precondition("training split is empty".into()));
    }
    let test_set = dataset.test();
    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    let data = train_set.examples();

    let root = SeededRng::new(cfg.seed);
    let mut model = Model::new(&cfg.model_config(dataset.dim()), &mut root.child(0))?;
    let mut stream = root.child(2);
    let epoch_seeds = root.child(1);
    let batch_size = cfg.batch_size.min(data.len());
    let batches_per_epoch = data.len() / batch_size;
    let adam_cfg = AdamConfig::from(cfg);
    let mut adam = AdamState::new(model.num_params());
    let mut params = model.params();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut aborted = Vec::new();
    let mut epoch_batches: Vec<Vec<usize>> = Vec::new();

    writeln!(sink, "step,loss,bpd")?;
    for step in 0..cfg.steps {
        let (epoch, within) = (step / batches_per_epoch, step % batches_per_epoch);
        if within == 0 {
            let seed = epoch_seeds.child(epoch as u64).next_u64();
            epoch_batches = minibatch_indices(data.len(), batch_size, seed)?;
        }
        let mut step_rng = SeededRng::new(stream.next_u64());
        let batch = batch_inputs(data, &epoch_batches[within], cfg.dequantize, &mut step_rng);
        if !model.is_initialized() {
            model.initialize(&batch)?;
            params = model.params();
        }
        let outcome = model
            .loss_and_grads(&batch, &mut step_rng)
            .and_then(|(loss, grads)| {
                let mut next = params.clone();
                let mut next_adam = adam.clone();
                adam_step(&mut next_adam, &mut next, &grads, &adam_cfg)?;
                Ok((loss, next, next_adam))
            });
        match outcome {
            Ok((loss, next, next_adam)) => {
                model.set_params(&next)?;
                params = model.params();
                adam = next_adam;
                losses.push(loss);
            }
            Err(NifError::Numeric { .. }) => {
                aborted.push(step);
                losses.push(f64::NAN);
                if aborted.len() * 100 > cfg.steps {
                    return Err(NifError::Train(format!(
                        "{} of {} steps aborted on numeric failures (limit 1%)",
                        aborted.len(),
                        cfg.steps
                    )));
                }
                continue;
            }
            Err(other) => return Err(other),
        }
        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_every == 0 || last {
            let mut eval_rng = root.child(3).child(step as u64);
            let bpd = bpd_over_dataset(&model, eval_set.examples(), cfg.dequantize, &mut eval_rng)?;
            writeln!(sink, "{},{},{}", step + 1, losses[step], bpd.bpd)?;
        }
    }
    let checkpoint = Checkpoint {
        model,
        adam,
        config: cfg.clone(),
        rng: stream.state(),
        extra,
    };
    Ok(TrainOutcome {
        checkpoint,
        losses,
        aborted,
    })
}

#[cfg(test)]
mod tests;
