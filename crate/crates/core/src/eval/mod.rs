//! Metrics: Monte-Carlo marginal oracle, bits per dimension, Fréchet
//! distance with deviation-scale sweeps, and file exports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{NifError, Result};
use crate::model::{EmbedMode, Model, Temperature};
use crate::nif::{DeviationScale, NoisyLinear};
use crate::tensor::{random_orthonormal, sqrtm_psd, Matrix, SeededRng, Vector, LN_2PI};
use crate::train::{bits_per_dim, dequantize};

/// Monte-Carlo estimate of `log p(x) = log E_{z~N(0,I)} N(x | Az + b, Σ)`
/// computed with log-sum-exp. Returns the estimate and the delta-method
/// standard error of the log.
pub fn mc_oracle_logpx<P: NoisyLinear + ?Sized>(
    p: &P,
    x: &[f64],
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(NifError::Precondition(format!(
            "Monte-Carlo oracle needs at least 1000 samples, got {n_samples}"
        )));
    }
    if x.len() != p.data_dim() {
        return Err(NifError::Shape(format!("x has length {}, expected {}", x.len(), p.data_dim())));
    }
    let ls = p.log_sigma();
    let log_norm = -0.5 * (ls.iter().sum::<f64>() + x.len() as f64 * LN_2PI);
    let log_w: Vec<f64> = (0..n_samples)
        .map(|_| {
            let z = rng.standard_normal(p.latent_dim());
            let mean = p.apply(&z);
            let quad: f64 = (0..x.len())
                .map(|i| {
                    let r = x[i] - mean[i] - p.offset()[i];
                    r * r * (-ls[i]).exp()
                })
                .sum();
            log_norm - 0.5 * quad
        })
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(NifError::numeric("every Monte-Carlo weight underflowed"));
    }
    let n = n_samples as f64;
    let scaled: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((max + mean.ln(), (var / n).sqrt() / mean))
}

/// Sample mean and unbiased covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vector,
    pub cov: Matrix,
    pub count: usize,
}

impl GaussianStats {
    pub fn from_samples(samples: &[Vector]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(NifError::Precondition("Gaussian statistics need at least 2 samples".into()));
        }
        let d = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = Vector::zeros(d);
        for s in samples {
            mean.axpy(1.0 / n, s);
        }
        let mut cov = Matrix::zeros(d, d);
        for s in samples {
            let r = s.sub(&mean);
            cov.add_outer(1.0 / (n - 1.0), &r, &r);
        }
        cov.symmetrize();
        Ok(GaussianStats {
            mean,
            cov,
            count: samples.len(),
        })
    }
}

/// Fixed random projection with orthonormal rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    projection: Matrix,
}

pub const MAX_FEATURES: usize = 64;

impl FeatureMap {
    /// `min(64, in_dim)` output features.
    pub fn new(in_dim: usize, seed: u64) -> Self {
        let out = in_dim.min(MAX_FEATURES);
        let q = random_orthonormal(in_dim, out, &mut SeededRng::new(seed));
        FeatureMap { projection: q.transpose() }
    }

    pub fn out_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vector> {
        self.projection.matvec(x)
    }
}

/// `‖m_a − m_b‖² + tr(C_a + C_b − 2 (C_a^{1/2} C_b C_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(NifError::Shape("Fréchet distance needs matching dimensions".into()));
    }
    let root_a = sqrtm_psd(&a.cov)?;
    let mut inner = root_a.matmul(&b.cov)?.matmul(&root_a)?;
    inner.symmetrize();
    let cross = sqrtm_psd(&inner)?;
    let d = a.mean.sub(&b.mean).norm_sq() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    if !d.is_finite() {
        return Err(NifError::numeric("non-finite Fréchet distance"));
    }
    Ok(d.max(0.0))
}

fn feature_stats(feat: &FeatureMap, xs: &[Vector]) -> Result<GaussianStats> {
    let f = xs.iter().map(|x| feat.apply(x)).collect::<Result<Vec<_>>>()?;
    GaussianStats::from_samples(&f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// `(s, Fréchet distance)` in input order.
    pub rows: Vec<(f64, f64)>,
    pub argmin_s: f64,
}

/// Fréchet distance between feature statistics of model samples and of
/// `data`, for each deviation scale. Every `s` reuses the same random
/// stream, so differences between rows come from `s` alone.
pub fn fd_sweep(
    model: &Model,
    data: &[Vector],
    s_values: &[f64],
    t: Temperature,
    n_samples: usize,
    feat: &FeatureMap,
    rng: &mut SeededRng,
) -> Result<SweepResult> {
    if s_values.is_empty() {
        return Err(NifError::Precondition("empty s grid".into()));
    }
    if n_samples <= feat.out_dim() {
        return Err(NifError::config(
            "n_samples",
            format!("need more than {} samples for a nondegenerate covariance", feat.out_dim()),
        ));
    }
    let reference = feature_stats(feat, data)?;
    let seed = rng.next_u64();
    let rows = s_values
        .par_iter()
        .map(|&s| {
            let scale = DeviationScale::new(s)?;
            let mut stream = SeededRng::new(seed);
            let samples = (0..n_samples)
                .map(|_| model.sample(t, scale, &mut stream))
                .collect::<Result<Vec<_>>>()?;
            Ok((s, frechet_distance(&feature_stats(feat, &samples)?, &reference)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let argmin_s = rows
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|r| r.0)
        .unwrap();
    Ok(SweepResult { rows, argmin_s })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BpdReport {
    pub bpd: f64,
    /// False when the underlying log density is a lower bound.
    pub exact: bool,
}

/// Mean bits per dimension. With `dequantize`, byte data is mapped to
/// `(k + u)/256` first and the result accounts for the `1/256` bin width.
pub fn bpd_over_dataset(model: &Model, data: &[Vector], dequant: bool, rng: &mut SeededRng) -> Result<BpdReport> {
    if data.is_empty() {
        return Err(NifError::Precondition("empty dataset".into()));
    }
    let base = SeededRng::new(rng.next_u64());
    let values = data
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut child = base.child(i as u64);
            let input = if dequant { dequantize(x, &mut child) } else { x.clone() };
            model.log_prob(&input, &mut child)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = values.iter().map(|v| v.value).sum::<f64>() / data.len() as f64;
    Ok(BpdReport {
        bpd: bits_per_dim(mean, model.data_dim(), dequant),
        exact: values.iter().all(|v| v.exact),
    })
}

/// CSV with header `z_0,…,z_{M−1}[,label]`, one deterministic embedding per row.
pub fn export_embeddings(model: &Model, data: &[Vector], labels: Option<&[u8]>, path: &Path) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != data.len() {
            return Err(NifError::Shape(format!("{} labels for {} examples", l.len(), data.len())));
        }
    }
    let mut out = String::new();
    let header: Vec<String> = (0..model.latent_dim()).map(|k| format!("z_{k}")).collect();
    out.push_str(&header.join(","));
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    let mut unused = SeededRng::new(0);
    for (i, x) in data.iter().enumerate() {
        let z = model.embed(x, EmbedMode::Deterministic, &mut unused)?;
        let row: Vec<String> = z.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        if let Some(l) = labels {
            let _ = write!(out, ",{}", l[i]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// How model outputs map to 8-bit pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelRange {
    /// Data in `[0, 1)`: pixel `floor(256 x)`.
    Unit,
    /// Raw byte values: pixel `round(x)`.
    Byte,
}

impl PixelRange {
    fn to_pixel(self, x: f64) -> u8 {
        let v = match self {
            PixelRange::Unit => (x * 256.0).floor(),
            PixelRange::Byte => x.round(),
        };
        v.clamp(0.0, 255.0) as u8
    }
}

/// Binary PGM (`P5`, maxval 255) of a `rows × cols` grid of `height × width` tiles.
pub fn encode_pgm_grid(tiles: &[Vec<u8>], rows: usize, cols: usize, height: usize, width: usize) -> Result<Vec<u8>> {
    if tiles.len() != rows * cols || tiles.iter().any(|t| t.len() != height * width) {
        return Err(NifError::Shape(format!(
            "grid of {rows}×{cols} tiles of {height}×{width} pixels does not match the samples"
        )));
    }
    let (w, h) = (cols * width, rows * height);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let tile = &tiles[(y / height) * cols + x / width];
            out.push(tile[(y % height) * width + x % width]);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn export_sample_grid(
    model: &Model,
    rows: usize,
    cols: usize,
    t: Temperature,
    s: DeviationScale,
    shape: (usize, usize),
    range: PixelRange,
    path: &Path,
    rng: &mut SeededRng,
) -> Result<()> {
    let (h, w) = shape;
    if h * w != model.data_dim() {
        return Err(NifError::Shape(format!(
            "model produces {} values, not a {h}×{w} image",
            model.data_dim()
        )));
    }
    let tiles = (0..rows * cols)
        .map(|_| {
            let x = model.sample(t, s, rng)?;
            Ok(x.iter().map(|v| range.to_pixel(*v)).collect())
        })
        .collect::<Result<Vec<Vec<u8>>>>()?;
    std::fs::write(path, encode_pgm_grid(&tiles, rows, cols, h, w)?)?;
    Ok(())
}

/// `cols = ⌈√n⌉`, `rows = ⌈n / cols⌉`.
pub fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

/// Writes `header` then one `name,value` line per entry.
pub fn write_report(out: &mut dyn Write, header: &str, rows: &[(String, f64)]) -> Result<()> {
    writeln!(out, "{header}")?;
    for (name, value) in rows {
        writeln!(out, "{name},{value}")?;
    }
    Ok(())
}
