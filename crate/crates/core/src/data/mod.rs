//! Synthetic manifold datasets, IDX image files, CSV vectors and batching.

pub mod idx;

use std::path::{Path, PathBuf};

use crate::error::{NifError, Result};
use crate::tensor::{random_orthonormal, Matrix, SeededRng, Vector};

/// Circle radius used by the `circle` generator.
pub const CIRCLE_RADIUS: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Circle,
    SwissRoll,
    Gaussian,
    IdxImages,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Circle => "circle",
            DatasetKind::SwissRoll => "swiss_roll",
            DatasetKind::Gaussian => "gaussian",
            DatasetKind::IdxImages => "idx_images",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(DatasetKind::Circle),
            "swiss_roll" => Some(DatasetKind::SwissRoll),
            "gaussian" => Some(DatasetKind::Gaussian),
            "idx_images" => Some(DatasetKind::IdxImages),
            _ => None,
        }
    }

    fn intrinsic_dim(self) -> usize {
        match self {
            DatasetKind::Circle => 2,
            DatasetKind::SwissRoll => 3,
            DatasetKind::Gaussian | DatasetKind::IdxImages => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub ambient_dim: usize,
    pub noise_sigma: f64,
    pub count: usize,
    pub seed: u64,
    /// IDX image file; only used by `idx_images`.
    pub path: Option<PathBuf>,
    /// Optional IDX label file matching `path`.
    pub labels_path: Option<PathBuf>,
}

impl DatasetSpec {
    /// Checks the ambient dimension, noise level and count.
    pub fn validate(&self) -> Result<()> {
        validate(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    examples: Vec<Vector>,
    splits: Vec<Split>,
    labels: Option<Vec<u8>>,
    /// `(height, width)` for image data.
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    /// Every example is tagged `Train`.
    pub fn new(examples: Vec<Vector>) -> Result<Self> {
        let splits = vec![Split::Train; examples.len()];
        Dataset::with_splits(examples, splits)
    }

    pub fn with_splits(examples: Vec<Vector>, splits: Vec<Split>) -> Result<Self> {
        let dim = examples.first().map_or(0, |x| x.len());
        if let Some(i) = examples.iter().position(|x| x.len() != dim) {
            return Err(NifError::Shape(format!(
                "example {i} has length {}, expected {dim}",
                examples[i].len()
            )));
        }
        if splits.len() != examples.len() {
            return Err(NifError::Shape("one split tag per example is required".into()));
        }
        Ok(Dataset {
            dim,
            examples,
            splits,
            labels: None,
            image_shape: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Vector] {
        &self.examples
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    /// The examples (and labels) carrying `split`, as a new all-`Train` dataset.
    pub fn subset(&self, split: Split) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == split).collect();
        Dataset {
            dim: self.dim,
            examples: keep.iter().map(|&i| self.examples[i].clone()).collect(),
            splits: vec![Split::Train; keep.len()],
            labels: self.labels.as_ref().map(|l| keep.iter().map(|&i| l[i]).collect()),
            image_shape: self.image_shape,
        }
    }

    pub fn train(&self) -> Dataset {
        self.subset(Split::Train)
    }

    pub fn test(&self) -> Dataset {
        self.subset(Split::Test)
    }
}

/// Tags `floor(count / 10)` seeded-random examples as test data.
fn seeded_split(count: usize, rng: &mut SeededRng) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    let mut splits = vec![Split::Train; count];
    for &i in &order[..count / 10] {
        splits[i] = Split::Test;
    }
    splits
}

fn validate(spec: &DatasetSpec) -> Result<()> {
    if spec.ambient_dim < spec.kind.intrinsic_dim() {
        return Err(NifError::config(
            "ambient_dim",
            format!(
                "{} data needs at least {} dimensions, got {}",
                spec.kind.as_str(),
                spec.kind.intrinsic_dim(),
                spec.ambient_dim
            ),
        ));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(NifError::config("noise_sigma", "must be finite and ≥ 0"));
    }
    if spec.count == 0 {
        return Err(NifError::config("count", "must be positive"));
    }
    Ok(())
}

/// Orthonormal frame used to embed the synthetic manifold: its first
/// `intrinsic` columns span the generating subspace.
pub fn embedding_frame(spec: &DatasetSpec) -> Matrix {
    let n = spec.ambient_dim;
    random_orthonormal(n, n, &mut SeededRng::new(spec.seed).child(0))
}

/// Euclidean distance from `x` to the generating circle: the in-plane
/// radial gap `‖Px‖ − R` combined with the off-plane part of `x`, where `P`
/// projects onto the circle's plane.
pub fn circle_distance(frame: &Matrix, x: &[f64]) -> f64 {
    let a = frame.col(0).dot(x);
    let b = frame.col(1).dot(x);
    let in_plane = a * a + b * b;
    let off_plane = (x.iter().map(|v| v * v).sum::<f64>() - in_plane).max(0.0);
    let radial = in_plane.sqrt() - CIRCLE_RADIUS;
    (radial * radial + off_plane).sqrt()
}

pub fn generate_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    validate(spec)?;
    if spec.kind == DatasetKind::IdxImages {
        return Err(NifError::config("dataset", "idx_images is loaded from a file, not generated"));
    }
    let root = SeededRng::new(spec.seed);
    let mut draws = root.child(1);
    let n = spec.ambient_dim;
    let frame = embedding_frame(spec);
    let embed = |coords: &[f64]| -> Vector {
        let mut x = Vector::zeros(n);
        for (k, c) in coords.iter().enumerate() {
            x.axpy(*c, &frame.col(k));
        }
        x
    };
    let examples = (0..spec.count)
        .map(|_| {
            let mut x = match spec.kind {
                DatasetKind::Circle => {
                    let theta = std::f64::consts::TAU * draws.uniform();
                    embed(&[CIRCLE_RADIUS * theta.cos(), CIRCLE_RADIUS * theta.sin()])
                }
                DatasetKind::SwissRoll => {
                    let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * draws.uniform());
                    let h = 21.0 * draws.uniform();
                    embed(&[t * t.cos() / 10.0, h / 10.0, t * t.sin() / 10.0])
                }
                DatasetKind::Gaussian => return draws.standard_normal(n),
                DatasetKind::IdxImages => unreachable!("rejected above"),
            };
            if spec.noise_sigma > 0.0 {
                let noise = draws.standard_normal(n);
                x.axpy(spec.noise_sigma, &noise);
            }
            x
        });
    let examples: Vec<Vector> = examples.collect();
    let splits = seeded_split(spec.count, &mut root.child(2));
    Dataset::with_splits(examples, splits)
}

/// Images become vectors of raw byte values in `[0, 255]`, split 90/10
/// with `seed`.
pub fn load_idx(path: &Path, labels: Option<&Path>, seed: u64) -> Result<Dataset> {
    let images = idx::parse_idx_images(&idx::read_idx_file(path)?)?;
    let (count, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let examples: Vec<Vector> = images
        .data
        .chunks(h * w)
        .take(count)
        .map(|px| px.iter().map(|&b| b as f64).collect())
        .collect();
    let splits = seeded_split(count, &mut SeededRng::new(seed).child(2));
    let mut d = Dataset::with_splits(examples, splits)?;
    d.dim = h * w;
    d.image_shape = Some((h, w));
    if let Some(lp) = labels {
        let l = idx::parse_idx_labels(&idx::read_idx_file(lp)?)?;
        if l.dims[0] != count {
            return Err(NifError::Shape(format!("{} labels for {count} images", l.dims[0])));
        }
        d.labels = Some(l.data);
    }
    Ok(d)
}

pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::IdxImages => {
            let path = spec
                .path
                .as_deref()
                .ok_or_else(|| NifError::config("data_path", "idx_images needs a file path"))?;
            load_idx(path, spec.labels_path.as_deref(), spec.seed)
        }
        _ => generate_synthetic(spec),
    }
}

/// Comma-separated numeric rows; a first line that does not parse as
/// numbers is treated as a header. All rows are tagged `Train`.
pub fn parse_csv_vectors(text: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.lines().enumerate() {
        let start = offset;
        offset += line.len() + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => examples.push(Vector::from(v)),
            Err(_) if lineno == 0 => continue,
            Err(e) => return Err(NifError::format(start, format!("line {}: {e}", lineno + 1))),
        }
    }
    if examples.is_empty() {
        return Err(NifError::format(0, "no numeric rows"));
    }
    Dataset::new(examples)
}

/// Shuffled index batches for one epoch; a ragged final batch is dropped.
pub fn minibatch_indices(count: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > count {
        return Err(NifError::Precondition(format!(
            "batch size {batch_size} must be in 1..={count}"
        )));
    }
    let mut order: Vec<usize> = (0..count).collect();
    SeededRng::new(epoch_seed).shuffle(&mut order);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

pub fn minibatches<'a>(
    examples: &'a [Vector],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<impl Iterator<Item = Vec<&'a Vector>> + 'a> {
    let batches = minibatch_indices(examples.len(), batch_size, epoch_seed)?;
    Ok(batches.into_iter().map(move |b| b.into_iter().map(|i| &examples[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(n: usize, sigma: f64, count: usize) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::Circle,
            ambient_dim: n,
            noise_sigma: sigma,
            count,
            seed: 7,
            path: None,
            labels_path: None,
        }
    }

    #[test]
    fn noiseless_circle_has_unit_radius() {
        let d = generate_synthetic(&circle(2, 0.0, 500)).unwrap();
        for x in d.examples() {
            assert!((x.norm() - CIRCLE_RADIUS).abs() <= 1e-12);
        }
    }

    #[test]
    fn noisy_circle_distance_matches_noise_level() {
        // Nine noise directions act on the distance, so its mean is close
        // to σ·E[χ₉] ≈ 2.92σ.
        let spec = circle(10, 0.05, 5000);
        let d = generate_synthetic(&spec).unwrap();
        let frame = embedding_frame(&spec);
        let mean = d.examples().iter().map(|x| circle_distance(&frame, x)).sum::<f64>() / 5000.0;
        assert!((mean / 0.05 - 2.92).abs() < 0.1, "{mean}");
        assert!(circle_distance(&frame, &Vector::zeros(10)) == CIRCLE_RADIUS);
        let on = frame.col(0).scale(0.6).add(&frame.col(1).scale(0.8));
        assert!(circle_distance(&frame, &on) < 1e-12);
        let lifted = on.add(&frame.col(5).scale(0.3));
        assert!((circle_distance(&frame, &lifted) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [DatasetKind::Circle, DatasetKind::SwissRoll, DatasetKind::Gaussian] {
            let spec = DatasetSpec {
                kind,
                ..circle(5, 0.1, 100)
            };
            assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        }
        let a = generate_synthetic(&circle(3, 0.1, 50)).unwrap();
        let b = generate_synthetic(&DatasetSpec { seed: 8, ..circle(3, 0.1, 50) }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn split_is_ninety_ten_and_disjoint() {
        let d = generate_synthetic(&circle(3, 0.1, 1000)).unwrap();
        assert_eq!(d.train().len(), 900);
        assert_eq!(d.test().len(), 100);
        assert_eq!(d.train().len() + d.test().len(), d.len());
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for bad in [
            circle(1, 0.1, 10),
            DatasetSpec {
                kind: DatasetKind::SwissRoll,
                ..circle(2, 0.1, 10)
            },
            circle(3, -1.0, 10),
            circle(3, 0.1, 0),
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(NifError::Config { .. })));
        }
    }

    #[test]
    fn minibatches_are_seeded_and_drop_remainder() {
        let a = minibatch_indices(10, 3, 1).unwrap();
        assert_eq!(a, minibatch_indices(10, 3, 1).unwrap());
        assert_eq!(a.len(), 3);
        let mut seen: Vec<usize> = a.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);

        let x = minibatch_indices(1000, 1000, 1).unwrap();
        let y = minibatch_indices(1000, 1000, 2).unwrap();
        assert_ne!(x, y);
        assert!(minibatch_indices(3, 4, 0).is_err());

        let data: Vec<Vector> = (0..6).map(|i| Vector::from(vec![i as f64])).collect();
        let total: usize = minibatches(&data, 2, 0).unwrap().map(|b| b.len()).sum();
        assert_eq!(total, 6);
    }

    #[test]
    fn idx_dataset_loads_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        idx::write_idx_file(
            &img,
            &idx::IdxArray {
                dims: vec![2, 2, 2],
                data: vec![0, 64, 128, 255, 1, 2, 3, 4],
            },
        )
        .unwrap();
        idx::write_idx_file(&lab, &idx::IdxArray { dims: vec![2], data: vec![5, 6] }).unwrap();
        let d = load_idx(&img, Some(&lab), 0).unwrap();
        assert_eq!(d.image_shape(), Some((2, 2)));
        assert_eq!(d.examples()[0].as_slice(), &[0.0, 64.0, 128.0, 255.0]);
        assert_eq!(d.labels(), Some(&[5u8, 6][..]));
        assert!(matches!(load_idx(&lab, None, 0), Err(NifError::Format { .. })));
    }

    #[test]
    fn csv_vectors_parse_with_optional_header() {
        let d = parse_csv_vectors("a,b\n1,2\n3.5,-4\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.examples()[1].as_slice(), &[3.5, -4.0]);
        assert!(parse_csv_vectors("1,2\nx,y\n").is_err());
        assert!(parse_csv_vectors("1,2\n3\n").is_err());
    }
}
