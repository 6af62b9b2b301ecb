use proptest::prelude::*;

use super::*;
use crate::data::{generate_synthetic, DatasetKind, DatasetSpec};
use crate::model::NifLayer;

fn adam_cfg(lr: f64) -> AdamConfig {
    AdamConfig {
        learning_rate: lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        clip_norm: 10.0,
    }
}

fn gaussian_data(dim: usize, count: usize, seed: u64) -> Dataset {
    generate_synthetic(&DatasetSpec {
        kind: DatasetKind::Gaussian,
        ambient_dim: dim,
        noise_sigma: 0.0,
        count,
        seed,
        path: None,
        labels_path: None,
    })
    .unwrap()
}

fn circle_data(count: usize, seed: u64) -> Dataset {
    generate_synthetic(&DatasetSpec {
        kind: DatasetKind::Circle,
        ambient_dim: 4,
        noise_sigma: 0.05,
        count,
        seed,
        path: None,
        labels_path: None,
    })
    .unwrap()
}

fn small_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        steps: 12,
        couplings: 1,
        latent_couplings: 1,
        hidden: vec![8],
        latent_dim: 1,
        eval_every: 5,
        variant,
        ..TrainConfig::new(seed)
    }
}

#[test]
fn bits_per_dim_examples() {
    assert!((bits_per_dim(-std::f64::consts::LN_2, 1, false) - 1.0).abs() < 1e-15);
    let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let bpd = bits_per_dim(-3.0 * entropy, 3, false);
    assert!((bpd - 2.0471).abs() < 1e-4);
    assert!((bits_per_dim(-std::f64::consts::LN_2, 1, true) - 9.0).abs() < 1e-15);
}

#[test]
fn dequantized_values_stay_in_their_bins() {
    let mut rng = SeededRng::new(3);
    let x = [0.0, 17.0, 255.0];
    for _ in 0..100 {
        let y = dequantize(&x, &mut rng);
        for (k, v) in x.iter().zip(y.iter()) {
            assert!(*v >= k / 256.0 && *v < (k + 1.0) / 256.0);
        }
    }
}

#[test]
fn zero_gradients_keep_params_and_decay_moments() {
    let mut state = AdamState {
        m: vec![1.0, -2.0],
        v: vec![4.0, 9.0],
        step: 3,
    };
    let mut params = vec![0.5, 0.25];
    let before = params.clone();
    let cfg = adam_cfg(0.0 + 1e-3);
    adam_step(&mut state, &mut params, &[0.0, 0.0], &cfg).unwrap();
    assert_eq!(state.m, vec![0.9, -1.8]);
    assert!((state.v[0] - 0.999 * 4.0).abs() < 1e-15);
    assert_eq!(state.step, 4);
    // Old momentum still moves the parameters; fresh state does not.
    assert!(params[0] < before[0]);
    let mut fresh = AdamState::new(2);
    let mut p = before.clone();
    adam_step(&mut fresh, &mut p, &[0.0, 0.0], &cfg).unwrap();
    assert_eq!(p, before);
    assert_eq!(fresh.m, vec![0.0, 0.0]);
}

#[test]
fn first_step_moves_by_learning_rate_against_the_sign() {
    let mut state = AdamState::new(3);
    let mut params = vec![1.0, 1.0, 1.0];
    adam_step(&mut state, &mut params, &[0.3, -5.0, 1e-3], &adam_cfg(0.01)).unwrap();
    let moved: Vec<f64> = params.iter().map(|p| p - 1.0).collect();
    assert!((moved[0] + 0.01).abs() < 1e-8);
    assert!((moved[1] - 0.01).abs() < 1e-8);
    assert!((moved[2] + 0.01).abs() < 1e-7);
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut state = AdamState::new(1);
    let mut w = vec![0.0];
    for _ in 0..200 {
        let g = 2.0 * (w[0] - 3.0);
        adam_step(&mut state, &mut w, &[g], &adam_cfg(0.1)).unwrap();
    }
    assert!((w[0] - 3.0).abs() <= 0.05, "w = {}", w[0]);
}

#[test]
fn non_finite_gradients_abort_the_step() {
    let mut state = AdamState::new(2);
    let mut params = vec![1.0, 2.0];
    let err = adam_step(&mut state, &mut params, &[0.1, f64::NAN], &adam_cfg(0.1)).unwrap_err();
    assert!(matches!(err, NifError::Numeric { index: Some(1), .. }));
    assert_eq!(params, vec![1.0, 2.0]);
    assert_eq!(state, AdamState::new(2));
    assert!(adam_step(&mut state, &mut params, &[0.1], &adam_cfg(0.1)).is_err());
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(g in prop::collection::vec(-1e6f64..1e6, 1..20), max in 1e-3f64..100.0) {
        let mut g = g;
        let before = clip_global_norm(&mut g, max);
        let after = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= max + 1e-9);
        if before <= max {
            prop_assert!((after - before).abs() <= 1e-9 * before.max(1.0));
        }
    }
}

#[test]
fn invalid_config_names_the_key() {
    let key_of = |cfg: TrainConfig| match cfg.validate() {
        Err(NifError::Config { key, .. }) => key,
        other => panic!("expected a config error, got {other:?}"),
    };
    let base = TrainConfig::new(0);
    assert!(base.validate().is_ok());
    assert_eq!(key_of(TrainConfig { batch_size: 0, ..base.clone() }), "batch_size");
    assert_eq!(key_of(TrainConfig { adam_beta1: 1.0, ..base.clone() }), "adam_beta1");
    assert_eq!(key_of(TrainConfig { adam_beta2: 0.0, ..base.clone() }), "adam_beta2");
    assert_eq!(key_of(TrainConfig { learning_rate: -1.0, ..base.clone() }), "learning_rate");
    assert_eq!(key_of(TrainConfig { grad_clip_norm: f64::INFINITY, ..base.clone() }), "grad_clip_norm");
    assert_eq!(key_of(TrainConfig { hidden: vec![4, 0], ..base.clone() }), "hidden");
}

#[test]
fn training_is_deterministic_to_the_byte() {
    let data = circle_data(120, 5);
    for variant in [Variant::Nf, Variant::NifClosed, Variant::NifDeep] {
        let cfg = small_config(variant, 9);
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let a = train(&cfg, &data, BTreeMap::new(), &mut log_a).unwrap();
        let b = train(&cfg, &data, BTreeMap::new(), &mut log_b).unwrap();
        assert_eq!(encode_checkpoint(&a.checkpoint).unwrap(), encode_checkpoint(&b.checkpoint).unwrap());
        assert_eq!(log_a, log_b);
        let text = String::from_utf8(log_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss,bpd");
        let steps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(steps, vec!["5", "10", "12"]);
        assert!(a.aborted.is_empty());
        assert!(a.checkpoint.model.is_initialized());
        assert_eq!(a.checkpoint.adam.step, 12);
    }
}

#[test]
fn different_seeds_give_different_checkpoints() {
    let data = circle_data(80, 5);
    let a = train(&small_config(Variant::NifClosed, 1), &data, BTreeMap::new(), &mut Vec::new()).unwrap();
    let b = train(&small_config(Variant::NifClosed, 2), &data, BTreeMap::new(), &mut Vec::new()).unwrap();
    assert_ne!(a.checkpoint.model.params(), b.checkpoint.model.params());
}

fn trained(variant: Variant) -> Checkpoint {
    let data = circle_data(80, 5);
    let mut extra = BTreeMap::new();
    extra.insert("dataset.kind".to_string(), "circle".to_string());
    train(&small_config(variant, 4), &data, extra, &mut Vec::new())
        .unwrap()
        .checkpoint
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Nf, Variant::NifClosed, Variant::NifDeep] {
        let c = trained(variant);
        let path = dir.path().join(format!("{}.nifc", variant.as_str()));
        save_checkpoint(&c, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(encode_checkpoint(&loaded).unwrap(), std::fs::read(&path).unwrap());
        assert_eq!(loaded.model.params(), c.model.params());
        assert_eq!(loaded.config, c.config);
        assert_eq!(loaded.adam, c.adam);
        assert_eq!(loaded.rng, c.rng);
        assert_eq!(loaded.extra, c.extra);
        assert!(loaded.model.is_initialized());
    }
}

#[test]
fn reloaded_checkpoint_reproduces_eval_bpd() {
    let c = trained(Variant::NifDeep);
    let loaded = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
    let data = circle_data(60, 8);
    let a = bpd_over_dataset(&c.model, data.examples(), false, &mut SeededRng::new(1)).unwrap();
    let b = bpd_over_dataset(&loaded.model, data.examples(), false, &mut SeededRng::new(1)).unwrap();
    assert!((a.bpd - b.bpd).abs() <= 1e-12);
    assert!(!a.exact);
}

#[test]
fn upsampling_checkpoint_round_trips() {
    let mut rng = SeededRng::new(2);
    let examples: Vec<Vector> = (0..40).map(|_| rng.standard_normal(16)).collect();
    let data = Dataset::new(examples).unwrap();
    let cfg = TrainConfig {
        upsample: Some((1, 2, 2)),
        ..small_config(Variant::NifDeep, 3)
    };
    let c = train(&cfg, &data, BTreeMap::new(), &mut Vec::new()).unwrap().checkpoint;
    let bytes = encode_checkpoint(&c).unwrap();
    let loaded = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&loaded).unwrap(), bytes);
    assert!(matches!(loaded.model.nif(), Some(NifLayer::Upsample(_))));
}

fn format_offset(bytes: &[u8]) -> usize {
    match decode_checkpoint(bytes) {
        Err(NifError::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected_with_offsets() {
    let good = encode_checkpoint(&trained(Variant::NifClosed)).unwrap();
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(format_offset(&bad), 0);
    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(format_offset(&bad), 4);
    assert_eq!(format_offset(&good[..10]), 10);
    assert_eq!(format_offset(&good[..good.len() - 3]), good.len() - 3);
    let mut bad = good.clone();
    bad.push(0);
    assert_eq!(format_offset(&bad), good.len());
    let mut bad = good.clone();
    bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert_eq!(format_offset(&bad), good.len());

    let meta_len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&good[16..16 + meta_len]).unwrap();
    let at = 16 + text.find("model.variant=").unwrap();
    let patched = text.replace("model.variant=NIF_CLOSED", "model.variant=NIF_OPEN!!");
    let mut bad = good.clone();
    bad[16..16 + meta_len].copy_from_slice(patched.as_bytes());
    assert_eq!(format_offset(&bad), at);
}

#[test]
fn truncated_checkpoint_file_yields_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.nifc");
    let good = encode_checkpoint(&trained(Variant::Nf)).unwrap();
    for cut in [0, 3, 15, 16, 100, good.len() / 2, good.len() - 1] {
        std::fs::write(&path, &good[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NifError::Format { .. })));
    }
}

#[test]
fn extras_must_fit_on_one_line() {
    let mut c = trained(Variant::Nf);
    c.extra.insert("note".into(), "two\nlines".into());
    assert!(matches!(encode_checkpoint(&c), Err(NifError::Precondition(_))));
}

#[test]
fn nf_on_gaussian_data_reaches_its_entropy() {
    let data = gaussian_data(2, 4000, 11);
    let cfg = TrainConfig {
        variant: Variant::Nf,
        couplings: 2,
        hidden: vec![16],
        steps: 1500,
        learning_rate: 3e-3,
        eval_every: 500,
        ..TrainConfig::new(17)
    };
    let out = train(&cfg, &data, BTreeMap::new(), &mut Vec::new()).unwrap();
    let test = data.test();
    let bpd = bpd_over_dataset(&out.checkpoint.model, test.examples(), false, &mut SeededRng::new(0)).unwrap();
    let target = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).log2();
    assert!((bpd.bpd - target).abs() <= 0.05, "BPD {} vs {target}", bpd.bpd);
    assert!(bpd.exact);
}
