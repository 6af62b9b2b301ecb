//! Checkpoint files. Layout:
//!
//! ```text
//! "NIFC" | version: u32 LE | meta_len: u64 LE | meta: UTF-8 | values: f64 LE
//! ```
//!
//! The metadata is sorted `key=value` lines describing the architecture,
//! training configuration, RNG position and tensor manifest. The values are
//! the model parameters followed by the Adam first and second moments.

use std::collections::BTreeMap;
use std::path::Path;

use super::{AdamState, TrainConfig};
use crate::error::{NifError, Result};
use crate::flow::{ActNorm, AffineCoupling, Bijection, FlowLayer, FlowStack, Permutation};
use crate::model::{Model, NifLayer, Variant};
use crate::nif::{GaussianNifParams, UpsampleNifParams};
use crate::tensor::{Matrix, RngState, SeededRng, Vector};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NIFC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

const CONFIG_KEYS: [&str; 17] = [
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "couplings",
    "dequantize",
    "elbo_samples",
    "eval_every",
    "grad_clip_norm",
    "hidden",
    "latent_couplings",
    "latent_dim",
    "learning_rate",
    "seed",
    "steps",
    "upsample",
    "variant",
];

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Position of the training step stream after the last step.
    pub rng: RngState,
    /// Free-form provenance, stored as `extra.<key>` lines.
    pub extra: BTreeMap<String, String>,
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x")
}

fn encode_stack(stack: &FlowStack) -> String {
    let layers: Vec<String> = stack
        .layers()
        .iter()
        .map(|l| match l {
            FlowLayer::ActNorm(a) => format!("actnorm:{}", a.is_initialized() as u8),
            FlowLayer::Coupling(c) => format!("coupling:{}", join_widths(&c.conditioner().hidden_widths())),
            FlowLayer::Permutation(p) => format!(
                "permutation:{}",
                p.indices().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(".")
            ),
        })
        .collect();
    layers.join(";")
}

fn metadata(c: &Checkpoint) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    let model = &c.model;
    put("model.variant", model.variant().as_str().into());
    put("model.data_dim", model.data_dim().to_string());
    put("model.latent_dim", model.latent_dim().to_string());
    put("model.elbo_samples", model.elbo_samples().to_string());
    put("model.high", encode_stack(model.high_flow()));
    put("model.low", encode_stack(model.low_flow()));
    put(
        "model.nif",
        match model.nif() {
            None => "none".into(),
            Some(NifLayer::Dense(_)) => "dense".into(),
            Some(NifLayer::Upsample(p)) => {
                let (ch, h, w) = p.latent_shape();
                format!("upsample:{ch}x{h}x{w}")
            }
        },
    );
    let cfg = &c.config;
    put("config.seed", cfg.seed.to_string());
    put("config.batch_size", cfg.batch_size.to_string());
    put("config.steps", cfg.steps.to_string());
    put("config.learning_rate", format!("{:?}", cfg.learning_rate));
    put("config.adam_beta1", format!("{:?}", cfg.adam_beta1));
    put("config.adam_beta2", format!("{:?}", cfg.adam_beta2));
    put("config.adam_eps", format!("{:?}", cfg.adam_eps));
    put("config.grad_clip_norm", format!("{:?}", cfg.grad_clip_norm));
    put("config.variant", cfg.variant.as_str().into());
    put("config.latent_dim", cfg.latent_dim.to_string());
    put("config.couplings", cfg.couplings.to_string());
    put("config.latent_couplings", cfg.latent_couplings.to_string());
    put("config.hidden", join_widths(&cfg.hidden));
    put(
        "config.upsample",
        match cfg.upsample {
            None => "none".into(),
            Some((ch, h, w)) => format!("{ch}x{h}x{w}"),
        },
    );
    put("config.elbo_samples", cfg.elbo_samples.to_string());
    put("config.dequantize", cfg.dequantize.to_string());
    put("config.eval_every", cfg.eval_every.to_string());
    put("rng.seed", c.rng.seed.to_string());
    put("rng.word_pos", c.rng.word_pos.to_string());
    put(
        "rng.spare",
        c.rng.spare.map_or_else(|| "none".into(), |v| format!("{v:?}")),
    );
    put("adam.step", c.adam.step.to_string());
    put("tensor.params", model.num_params().to_string());
    put("tensor.adam_m", c.adam.m.len().to_string());
    put("tensor.adam_v", c.adam.v.len().to_string());
    for (k, v) in &c.extra {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(NifError::Precondition(format!(
                "extra entry {k:?} cannot be stored as a metadata line"
            )));
        }
        m.insert(format!("extra.{k}"), v.clone());
    }
    Ok(m)
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let params = c.model.params();
    if c.adam.m.len() != params.len() || c.adam.v.len() != params.len() {
        return Err(NifError::Shape(format!(
            "Adam moments of length {}/{} for {} parameters",
            c.adam.m.len(),
            c.adam.v.len(),
            params.len()
        )));
    }
    let mut meta = String::new();
    for (k, v) in metadata(c)? {
        meta.push_str(&k);
        meta.push('=');
        meta.push_str(&v);
        meta.push('\n');
    }
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 24 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for v in params.iter().chain(&c.adam.m).chain(&c.adam.v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parsed metadata: value and byte offset of its line.
struct Meta {
    entries: BTreeMap<String, (String, usize)>,
    end: usize,
}

impl Meta {
    fn raw(&self, key: &str) -> Result<(&str, usize)> {
        self.entries
            .get(key)
            .map(|(v, at)| (v.as_str(), *at))
            .ok_or_else(|| NifError::format(HEADER_LEN, format!("missing metadata key `{key}`")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (v, at) = self.raw(key)?;
        v.parse()
            .map_err(|_| NifError::format(at, format!("bad value {v:?} for `{key}`")))
    }
}

fn parse_meta(text: &str, base: usize) -> Result<Meta> {
    let mut entries = BTreeMap::new();
    let mut at = base;
    let mut previous: Option<String> = None;
    for line in text.split_inclusive('\n') {
        let Some(body) = line.strip_suffix('\n') else {
            return Err(NifError::format(at, "metadata line is not newline-terminated"));
        };
        let Some((k, v)) = body.split_once('=') else {
            return Err(NifError::format(at, "metadata line has no `=`"));
        };
        if previous.as_deref().is_some_and(|p| p >= k) {
            return Err(NifError::format(at, format!("metadata key `{k}` is out of order or repeated")));
        }
        let known = k.strip_prefix("extra.").is_some_and(|e| !e.is_empty())
            || k.strip_prefix("config.").is_some_and(|c| CONFIG_KEYS.contains(&c))
            || matches!(
                k,
                "model.variant"
                    | "model.data_dim"
                    | "model.latent_dim"
                    | "model.elbo_samples"
                    | "model.high"
                    | "model.low"
                    | "model.nif"
                    | "rng.seed"
                    | "rng.word_pos"
                    | "rng.spare"
                    | "adam.step"
                    | "tensor.params"
                    | "tensor.adam_m"
                    | "tensor.adam_v"
            );
        if !known {
            return Err(NifError::format(at, format!("unknown metadata key `{k}`")));
        }
        previous = Some(k.to_string());
        entries.insert(k.to_string(), (v.to_string(), at));
        at += line.len();
    }
    Ok(Meta { entries, end: at })
}

fn parse_widths(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split('x').map(|w| w.parse().ok().filter(|v| *v > 0)).collect()
}

enum LayerSpec {
    ActNorm(bool),
    Coupling(Vec<usize>),
    Permutation(Vec<usize>),
}

fn parse_stack(meta: &Meta, key: &str, dim: usize) -> Result<Vec<LayerSpec>> {
    let (text, at) = meta.raw(key)?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let bad = |m: String| NifError::format(at, format!("`{key}`: {m}"));
    text.split(';')
        .map(|layer| {
            let (kind, arg) = layer
                .split_once(':')
                .ok_or_else(|| bad(format!("layer {layer:?} has no `:`")))?;
            match kind {
                "actnorm" => match arg {
                    "0" => Ok(LayerSpec::ActNorm(false)),
                    "1" => Ok(LayerSpec::ActNorm(true)),
                    _ => Err(bad(format!("bad ActNorm flag {arg:?}"))),
                },
                "coupling" => {
                    if dim < 2 {
                        return Err(bad("coupling layer needs dimension ≥ 2".into()));
                    }
                    parse_widths(arg)
                        .map(LayerSpec::Coupling)
                        .ok_or_else(|| bad(format!("bad hidden widths {arg:?}")))
                }
                "permutation" => {
                    let idx = arg
                        .split('.')
                        .map(|i| i.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad permutation {arg:?}")))?;
                    if idx.len() != dim {
                        return Err(bad(format!("permutation of length {} in dimension {dim}", idx.len())));
                    }
                    Permutation::new(idx.clone()).map_err(|e| bad(e.to_string()))?;
                    Ok(LayerSpec::Permutation(idx))
                }
                _ => Err(bad(format!("unknown layer kind {kind:?}"))),
            }
        })
        .collect()
}

/// Parameter count of a stack, or `None` on overflow.
fn stack_params(specs: &[LayerSpec], dim: usize) -> Option<usize> {
    specs.iter().try_fold(0usize, |acc, s| {
        let n = match s {
            LayerSpec::ActNorm(_) => dim.checked_mul(2)?,
            LayerSpec::Coupling(hidden) => {
                let mut widths = vec![dim.div_ceil(2)];
                widths.extend_from_slice(hidden);
                widths.push(2 * (dim / 2));
                widths.windows(2).try_fold(0usize, |a, p| {
                    a.checked_add(p[0].checked_add(1)?.checked_mul(p[1])?)
                })?
            }
            LayerSpec::Permutation(_) => 0,
        };
        acc.checked_add(n)
    })
}

fn build_stack(specs: Vec<LayerSpec>, dim: usize) -> Result<FlowStack> {
    let mut stack = FlowStack::empty(dim);
    // Coupling weights are overwritten from the file right after.
    let mut scratch = SeededRng::new(0);
    for s in specs {
        stack.push(match s {
            LayerSpec::ActNorm(init) => {
                let mut a = ActNorm::new(dim);
                a.set_initialized(init);
                FlowLayer::ActNorm(a)
            }
            LayerSpec::Coupling(h) => FlowLayer::Coupling(AffineCoupling::new(dim, &h, &mut scratch)?),
            LayerSpec::Permutation(p) => FlowLayer::Permutation(Permutation::new(p)?),
        })?;
    }
    Ok(stack)
}

enum NifSpec {
    None,
    Dense,
    Upsample(usize, usize, usize),
}

fn parse_nif(meta: &Meta) -> Result<NifSpec> {
    let (text, at) = meta.raw("model.nif")?;
    match text {
        "none" => Ok(NifSpec::None),
        "dense" => Ok(NifSpec::Dense),
        _ => {
            let shape = text
                .strip_prefix("upsample:")
                .and_then(parse_widths)
                .filter(|w| w.len() == 3)
                .ok_or_else(|| NifError::format(at, format!("bad `model.nif` value {text:?}")))?;
            Ok(NifSpec::Upsample(shape[0], shape[1], shape[2]))
        }
    }
}

fn parse_config(meta: &Meta) -> Result<TrainConfig> {
    let variant_of = |key: &str| -> Result<Variant> {
        let (v, at) = meta.raw(key)?;
        Variant::parse(v).ok_or_else(|| NifError::format(at, format!("unknown variant {v:?}")))
    };
    let (hidden, at) = meta.raw("config.hidden")?;
    let hidden = parse_widths(hidden).ok_or_else(|| NifError::format(at, "bad `config.hidden`"))?;
    let (up, at) = meta.raw("config.upsample")?;
    let upsample = match up {
        "none" => None,
        _ => {
            let w = parse_widths(up)
                .filter(|w| w.len() == 3)
                .ok_or_else(|| NifError::format(at, "bad `config.upsample`"))?;
            Some((w[0], w[1], w[2]))
        }
    };
    Ok(TrainConfig {
        seed: meta.get("config.seed")?,
        batch_size: meta.get("config.batch_size")?,
        steps: meta.get("config.steps")?,
        learning_rate: meta.get("config.learning_rate")?,
        adam_beta1: meta.get("config.adam_beta1")?,
        adam_beta2: meta.get("config.adam_beta2")?,
        adam_eps: meta.get("config.adam_eps")?,
        grad_clip_norm: meta.get("config.grad_clip_norm")?,
        variant: variant_of("config.variant")?,
        latent_dim: meta.get("config.latent_dim")?,
        couplings: meta.get("config.couplings")?,
        latent_couplings: meta.get("config.latent_couplings")?,
        hidden,
        upsample,
        elbo_samples: meta.get("config.elbo_samples")?,
        dequantize: meta.get("config.dequantize")?,
        eval_every: meta.get("config.eval_every")?,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(NifError::format(bytes.len(), "file too short for the checkpoint header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(NifError::format(0, "not a checkpoint: bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NifError::format(
            4,
            format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| NifError::format(bytes.len(), "metadata block runs past the end of the file"))?;
    let text = std::str::from_utf8(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| NifError::format(HEADER_LEN + e.valid_up_to(), "metadata is not UTF-8"))?;
    let meta = parse_meta(text, HEADER_LEN)?;

    let (variant_text, variant_at) = meta.raw("model.variant")?;
    let variant = Variant::parse(variant_text)
        .ok_or_else(|| NifError::format(variant_at, format!("unknown variant {variant_text:?}")))?;
    let n: usize = meta.get("model.data_dim")?;
    let m: usize = meta.get("model.latent_dim")?;
    if n == 0 || m == 0 {
        return Err(NifError::format(meta.raw("model.data_dim")?.1, "model dimensions must be positive"));
    }
    let high_spec = parse_stack(&meta, "model.high", n)?;
    let low_spec = parse_stack(&meta, "model.low", m)?;
    let nif_spec = parse_nif(&meta)?;
    let nif_params = match nif_spec {
        NifSpec::None => Some(0),
        NifSpec::Dense => n.checked_mul(m).and_then(|a| a.checked_add(2 * n)),
        NifSpec::Upsample(c, h, w) => {
            let latent = c.checked_mul(h).and_then(|v| v.checked_mul(w));
            if latent != Some(m) || latent.and_then(|v| v.checked_mul(4)) != Some(n) {
                return Err(NifError::format(
                    meta.raw("model.nif")?.1,
                    "upsampling shape does not match the model dimensions",
                ));
            }
            n.checked_mul(2)
        }
    };
    let expected = stack_params(&high_spec, n)
        .zip(nif_params)
        .zip(stack_params(&low_spec, m))
        .and_then(|((h, p), l)| h.checked_add(p)?.checked_add(l));
    let (count_text, count_at) = meta.raw("tensor.params")?;
    let count: usize = meta.get("tensor.params")?;
    if expected != Some(count) {
        return Err(NifError::format(
            count_at,
            format!("manifest lists {count_text} parameters but the architecture needs {expected:?}"),
        ));
    }
    for key in ["tensor.adam_m", "tensor.adam_v"] {
        if meta.get::<usize>(key)? != count {
            return Err(NifError::format(meta.raw(key)?.1, format!("`{key}` must equal `tensor.params`")));
        }
    }
    let body_len = count
        .checked_mul(24)
        .ok_or_else(|| NifError::format(count_at, "tensor manifest overflows"))?;
    let body = &bytes[meta_end..];
    if body.len() < body_len {
        return Err(NifError::format(bytes.len(), format!("truncated tensor data: expected {body_len} bytes")));
    }
    if body.len() > body_len {
        return Err(NifError::format(meta_end + body_len, "trailing bytes after tensor data"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (params, moments) = values.split_at(count);
    let (adam_m, adam_v) = moments.split_at(count);

    let build = || -> Result<Model> {
        let high = build_stack(high_spec, n)?;
        let low = build_stack(low_spec, m)?;
        let nif = match nif_spec {
            NifSpec::None => None,
            NifSpec::Dense => {
                let at = high.num_params();
                let a = Matrix::from_vec(n, m, params[at..at + n * m].to_vec())?;
                let b = Vector::from(params[at + n * m..at + n * m + n].to_vec());
                let ls = Vector::from(params[at + n * m + n..at + n * m + 2 * n].to_vec());
                Some(NifLayer::Dense(GaussianNifParams::new(a, b, ls)?))
            }
            NifSpec::Upsample(c, h, w) => Some(NifLayer::Upsample(UpsampleNifParams::new(
                c,
                h,
                w,
                Vector::zeros(n),
                Vector::zeros(n),
            )?)),
        };
        let mut model = Model::from_parts(variant, high, nif, low, meta.get("model.elbo_samples")?)?;
        model.set_params(params)?;
        Ok(model)
    };
    let model = build().map_err(|e| match e {
        e @ NifError::Format { .. } => e,
        other => NifError::format(meta_end, format!("checkpoint does not describe a valid model: {other}")),
    })?;

    let (spare_text, spare_at) = meta.raw("rng.spare")?;
    let spare = match spare_text {
        "none" => None,
        v => Some(
            v.parse()
                .map_err(|_| NifError::format(spare_at, format!("bad value {v:?} for `rng.spare`")))?,
        ),
    };
    let extra = meta
        .entries
        .iter()
        .filter_map(|(k, (v, _))| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    debug_assert_eq!(meta.end, meta_end);
    Ok(Checkpoint {
        model,
        adam: AdamState {
            m: adam_m.to_vec(),
            v: adam_v.to_vec(),
            step: meta.get("adam.step")?,
        },
        config: parse_config(&meta)?,
        rng: RngState {
            seed: meta.get("rng.seed")?,
            word_pos: meta.get("rng.word_pos")?,
            spare,
        },
        extra,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(c)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
