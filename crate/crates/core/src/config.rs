//! Flat `key = value` run configuration shared by every subcommand.
//!
//! A file holds one assignment per line; blank lines and lines starting
//! with `#` are ignored. Every key belongs to a fixed schema and its value
//! is type-checked when set, so a typo fails before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{DatasetKind, DatasetSpec};
use crate::error::{NifError, Result};
use crate::model::Variant;
use crate::train::TrainConfig;
use crate::verify::Level;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Unsigned,
    Float,
    Bool,
    Variant,
    Dataset,
    Metric,
    Level,
    Widths,
    Shape,
    Path,
    Grid,
}

/// One recognised configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
    /// Value used when the key is not set; `None` for required or optional keys.
    pub default: Option<&'static str>,
    kind: Kind,
}

const fn key(name: &'static str, kind: Kind, default: Option<&'static str>, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        help,
        default,
        kind,
    }
}

/// The complete schema, in the order `--help` lists it.
pub const KEYS: &[KeySpec] = &[
    key("seed", Kind::Unsigned, None, "Root random seed (required)"),
    key("batch_size", Kind::Unsigned, Some("64"), "Minibatch size"),
    key("steps", Kind::Unsigned, Some("2000"), "Optimizer steps"),
    key("learning_rate", Kind::Float, Some("0.001"), "Adam step size"),
    key("adam_beta1", Kind::Float, Some("0.9"), "Adam first-moment decay"),
    key("adam_beta2", Kind::Float, Some("0.999"), "Adam second-moment decay"),
    key("adam_eps", Kind::Float, Some("1e-8"), "Adam denominator offset"),
    key("grad_clip_norm", Kind::Float, Some("10"), "Global gradient norm limit"),
    key("variant", Kind::Variant, Some("NIF_CLOSED"), "Model family: NF, NIF_CLOSED or NIF_DEEP"),
    key("latent_dim", Kind::Unsigned, Some("2"), "Latent dimension of the injective layer"),
    key("couplings", Kind::Unsigned, Some("6"), "Coupling layers in the data-side flow"),
    key("latent_couplings", Kind::Unsigned, Some("2"), "Coupling layers in the latent-side flow"),
    key("hidden", Kind::Widths, Some("64x64"), "Coupling network hidden widths, e.g. 64x64"),
    key("upsample", Kind::Shape, Some("none"), "Latent image CxHxW for the upsampling layer, or none"),
    key("elbo_samples", Kind::Unsigned, Some("1"), "Posterior samples per ELBO estimate"),
    key("dequantize", Kind::Bool, Some("false"), "Treat data as bytes and dequantize to [0, 1)"),
    key("eval_every", Kind::Unsigned, Some("100"), "Steps between metric records"),
    key("dataset", Kind::Dataset, Some("circle"), "circle, swiss_roll, gaussian or idx_images"),
    key("ambient_dim", Kind::Unsigned, Some("10"), "Ambient dimension of synthetic data"),
    key("noise_sigma", Kind::Float, Some("0.05"), "Off-manifold noise of synthetic data"),
    key("count", Kind::Unsigned, Some("5000"), "Number of synthetic points"),
    key("data_seed", Kind::Unsigned, None, "Seed of the data generator and split (default: seed)"),
    key("data_path", Kind::Path, None, "IDX image file for idx_images"),
    key("labels_path", Kind::Path, None, "IDX label file matching data_path"),
    key("n", Kind::Unsigned, Some("16"), "Number of samples to draw"),
    key("t", Kind::Float, Some("1"), "Sampling temperature"),
    key("s", Kind::Float, Some("1"), "Noise deviation scale"),
    key("metric", Kind::Metric, Some("bpd"), "Evaluation metric: bpd, fd or residual"),
    key("n_samples", Kind::Unsigned, Some("1000"), "Model samples per Fréchet distance"),
    key("feature_seed", Kind::Unsigned, Some("0"), "Seed of the random feature map"),
    key("s_grid", Kind::Grid, Some("0:1:0.25"), "Deviation scales a:b:step for sweep"),
    key("level", Kind::Level, Some("quick"), "Verification depth: quick or full"),
];

/// Keys copied into training checkpoints so data can be regenerated.
pub const DATA_KEYS: &[&str] = &[
    "dataset",
    "ambient_dim",
    "noise_sigma",
    "count",
    "data_seed",
    "data_path",
    "labels_path",
];

pub fn key_spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

fn check(kind: Kind, v: &str) -> std::result::Result<(), String> {
    let ok = match kind {
        Kind::Unsigned => v.parse::<u64>().is_ok(),
        Kind::Float => v.parse::<f64>().map(f64::is_finite).unwrap_or(false),
        Kind::Bool => parse_bool(v).is_some(),
        Kind::Variant => Variant::parse(v).is_some(),
        Kind::Dataset => DatasetKind::parse(v).is_some(),
        Kind::Metric => Metric::parse(v).is_some(),
        Kind::Level => Level::parse(v).is_some(),
        Kind::Widths => parse_widths(v).is_some(),
        Kind::Shape => parse_shape(v).is_some(),
        Kind::Path => !v.is_empty(),
        Kind::Grid => return parse_s_grid(v).map(|_| ()).map_err(|e| e.to_string()),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("invalid value `{v}`"))
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// `64x64` style width lists; the empty string means no hidden layers.
pub fn parse_widths(v: &str) -> Option<Vec<usize>> {
    if v.is_empty() {
        return Some(Vec::new());
    }
    v.split('x').map(|w| w.parse().ok()).collect()
}

/// `none` or `CxHxW`.
pub fn parse_shape(v: &str) -> Option<Option<(usize, usize, usize)>> {
    if v == "none" {
        return Some(None);
    }
    let dims = parse_widths(v)?;
    match dims[..] {
        [c, h, w] => Some(Some((c, h, w))),
        _ => None,
    }
}

/// Inclusive grid `a, a + step, …` up to `b`, tolerating rounding in the
/// last step.
pub fn parse_s_grid(v: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| NifError::config("s_grid", format!("`{v}`: {m}"));
    let parts: Vec<&str> = v.split(':').collect();
    let [a, b, step] = parts[..] else {
        return Err(bad("expected a:b:step"));
    };
    let num = |s: &str| s.trim().parse::<f64>().ok().filter(|x| x.is_finite());
    let (Some(a), Some(b), Some(step)) = (num(a), num(b), num(step)) else {
        return Err(bad("bounds and step must be finite numbers"));
    };
    if !(step > 0.0) || b < a {
        return Err(bad("need step > 0 and a ≤ b"));
    }
    let n = ((b - a) / step + 1e-9).floor();
    if n >= 10_000.0 {
        return Err(bad("more than 10000 grid points"));
    }
    Ok((0..=n as usize).map(|k| a + k as f64 * step).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bpd,
    Fd,
    /// Mean distance between test points and their reconstructions.
    Residual,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "bpd" => Some(Metric::Bpd),
            "fd" => Some(Metric::Fd),
            "residual" => Some(Metric::Residual),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Bpd => "bpd",
            Metric::Fd => "fd",
            Metric::Residual => "residual",
        }
    }
}

/// Settings read by sample, eval and sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub n: usize,
    pub t: f64,
    pub s: f64,
    pub metric: Metric,
    pub n_samples: usize,
    pub feature_seed: u64,
    pub s_grid: Vec<f64>,
    pub level: Level,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses config text. Malformed lines are format errors at the line's
    /// byte offset; unknown, repeated or ill-typed keys are config errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(NifError::format(start, "expected `key = value`"));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(NifError::format(start, "missing key before `=`"));
            }
            if cfg.values.contains_key(k) {
                return Err(NifError::config(k, "set more than once"));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn parse_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| NifError::format(e.valid_up_to(), "invalid UTF-8"))?;
        Self::parse(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_bytes(&std::fs::read(path)?)
    }

    /// Sets or replaces one key after checking its name and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| NifError::config(key, "unknown key"))?;
        check(spec.kind, value).map_err(|m| NifError::config(key, m))?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// The explicitly set value.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// The explicit value, falling back to the schema default.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.get(key).or_else(|| key_spec(key).and_then(|k| k.default))
    }

    /// Explicitly set keys with their values, sorted by key.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Sorted `key = value` text that parses back to the same config.
    pub fn to_text(&self) -> String {
        self.entries().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.value(key).ok_or_else(|| NifError::config(key, "required"))?;
        v.parse().map_err(|_| NifError::config(key, format!("invalid value `{v}`")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        let v = self.value(key).unwrap_or("false");
        parse_bool(v).ok_or_else(|| NifError::config(key, format!("invalid value `{v}`")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let variant = self.value("variant").unwrap_or_default();
        let hidden = self.value("hidden").unwrap_or_default();
        let upsample = self.value("upsample").unwrap_or_default();
        let cfg = TrainConfig {
            seed: self.seed()?,
            batch_size: self.typed("batch_size")?,
            steps: self.typed("steps")?,
            learning_rate: self.typed("learning_rate")?,
            adam_beta1: self.typed("adam_beta1")?,
            adam_beta2: self.typed("adam_beta2")?,
            adam_eps: self.typed("adam_eps")?,
            grad_clip_norm: self.typed("grad_clip_norm")?,
            variant: Variant::parse(variant).ok_or_else(|| NifError::config("variant", "unknown variant"))?,
            latent_dim: self.typed("latent_dim")?,
            couplings: self.typed("couplings")?,
            latent_couplings: self.typed("latent_couplings")?,
            hidden: parse_widths(hidden).ok_or_else(|| NifError::config("hidden", "invalid widths"))?,
            upsample: parse_shape(upsample).ok_or_else(|| NifError::config("upsample", "invalid shape"))?,
            elbo_samples: self.typed("elbo_samples")?,
            dequantize: self.flag("dequantize")?,
            eval_every: self.typed("eval_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let kind = self.value("dataset").unwrap_or_default();
        let spec = DatasetSpec {
            kind: DatasetKind::parse(kind).ok_or_else(|| NifError::config("dataset", "unknown dataset"))?,
            ambient_dim: self.typed("ambient_dim")?,
            noise_sigma: self.typed("noise_sigma")?,
            count: self.typed("count")?,
            seed: match self.get("data_seed") {
                Some(_) => self.typed("data_seed")?,
                None => self.seed()?,
            },
            path: self.get("data_path").map(PathBuf::from),
            labels_path: self.get("labels_path").map(PathBuf::from),
        };
        if spec.kind != DatasetKind::IdxImages {
            spec.validate()?;
        } else if spec.path.is_none() {
            return Err(NifError::config("data_path", "idx_images needs a file path"));
        }
        Ok(spec)
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        let nonneg = |key: &str| -> Result<f64> {
            let v: f64 = self.typed(key)?;
            if v >= 0.0 {
                Ok(v)
            } else {
                Err(NifError::config(key, "must be ≥ 0"))
            }
        };
        let metric = self.value("metric").unwrap_or_default();
        let level = self.value("level").unwrap_or_default();
        let settings = EvalSettings {
            n: self.typed("n")?,
            t: nonneg("t")?,
            s: nonneg("s")?,
            metric: Metric::parse(metric).ok_or_else(|| NifError::config("metric", "unknown metric"))?,
            n_samples: self.typed("n_samples")?,
            feature_seed: self.typed("feature_seed")?,
            s_grid: parse_s_grid(self.value("s_grid").unwrap_or_default())?,
            level: Level::parse(level).ok_or_else(|| NifError::config("level", "unknown level"))?,
        };
        if settings.n == 0 {
            return Err(NifError::config("n", "must be positive"));
        }
        if settings.s_grid.iter().any(|s| *s < 0.0) {
            return Err(NifError::config("s_grid", "deviation scales must be ≥ 0"));
        }
        Ok(settings)
    }

    /// Data keys with their resolved values, for storing next to a model.
    pub fn data_entries(&self) -> Result<BTreeMap<String, String>> {
        let seed = self.dataset_spec()?.seed.to_string();
        Ok(DATA_KEYS
            .iter()
            .filter_map(|&k| {
                let v = if k == "data_seed" { Some(seed.as_str()) } else { self.value(k) };
                v.map(|v| (k.to_string(), v.to_string()))
            })
            .collect())
    }
}
