//! Cross-module oracle battery. Each check reports its worst error against
//! a tolerance; the report text depends only on the seed and level.

pub mod oracles;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::idx::{encode_idx, parse_idx, IdxArray};
use crate::error::{NifError, Result};
use crate::eval::mc_oracle_logpx;
use crate::flow::{ActNorm, AffineCoupling, Bijection, FlowStack, Permutation, StochasticCoupling};
use crate::model::{Model, ModelConfig, Variant};
use crate::nif::{
    closed_form_logpx, closed_form_logpx_without_latent_normalizer, elbo_closed_form, intermediates,
    kl_to_posterior, manifold_term, manifold_term_projection_form, pseudo_inverse, stochastic_inverse,
    vjp_closed_form_logpx, vjp_manifold_term, vjp_stochastic_inverse, DeviationScale, GaussianNifParams,
    NoisyLinear, UpsampleNifParams,
};
use crate::tensor::{Matrix, SeededRng, Vector, LN_2PI};
use crate::train::{decode_checkpoint, encode_checkpoint, AdamState, Checkpoint, TrainConfig};
use oracles::{
    analytic_marginal_logpdf, bijection_vjp_error, central_gradient, dense_map, flatten_grads, flatten_nif,
    log_likelihood, perturb_params, posterior_kl_dense, random_nif, random_point, relative_error, unflatten_nif,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "quick" => Some(Level::Quick),
            "full" => Some(Level::Full),
            _ => None,
        }
    }

    fn pick(self, quick: usize, full: usize) -> usize {
        match self {
            Level::Quick => quick,
            Level::Full => full,
        }
    }
}

/// Deliberate defects the battery must detect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Closed-form marginal missing its `(2π)^{−M/2}` factor.
    DropLatentNormalizer,
}

impl Mutation {
    pub fn parse(s: &str) -> Option<Mutation> {
        match s {
            "none" => Some(Mutation::None),
            "drop-latent-normalizer" => Some(Mutation::DropLatentNormalizer),
            _ => None,
        }
    }

    fn closed_form<P: NoisyLinear + ?Sized>(self, p: &P, x: &[f64]) -> Result<f64> {
        match self {
            Mutation::None => closed_form_logpx(p, x),
            Mutation::DropLatentNormalizer => closed_form_logpx_without_latent_normalizer(p, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// One `PASS|FAIL name max_err` line per check.
    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                format!("{status} {} {:.3e}\n", c.name, c.max_err)
            })
            .collect()
    }
}

type Check = fn(&mut SeededRng, Level, Mutation) -> Result<f64>;

const CHECKS: [(&str, f64, Check); 15] = [
    ("closed_form_vs_marginal", 1e-9, closed_form_vs_marginal),
    ("closed_form_anchors", 1e-6, closed_form_anchors),
    ("mc_oracle_within_3se", 3.0, mc_oracle_within_3se),
    ("manifold_term_identities", 1e-9, manifold_term_identities),
    ("pseudo_inverse_is_mode", 0.0, pseudo_inverse_is_mode),
    ("elbo_gap_is_kl", 1e-9, elbo_gap_is_kl),
    ("vjp_closed_form", 1e-5, vjp_closed_form),
    ("vjp_manifold_term", 1e-5, vjp_manifold),
    ("vjp_stochastic_inverse", 1e-5, vjp_stochastic),
    ("vjp_flow_layers", 1e-5, vjp_flow_layers),
    ("vjp_stochastic_coupling", 1e-5, vjp_stochastic_coupling),
    ("vjp_full_models", 1e-4, vjp_full_models),
    ("upsample_vs_dense", 1e-10, upsample_vs_dense),
    ("round_trips", 1e-8, round_trips),
    ("serialization_round_trips", 0.0, serialization_round_trips),
];

/// Runs every check with its own child stream of `seed`.
pub fn run_suite(seed: u64, level: Level, mutation: Mutation) -> Report {
    let root = SeededRng::new(seed);
    let checks = CHECKS
        .par_iter()
        .enumerate()
        .map(|(i, (name, tolerance, check))| {
            let mut rng = root.child(i as u64);
            let max_err = match check(&mut rng, level, mutation) {
                Ok(e) if !e.is_nan() => e,
                _ => f64::INFINITY,
            };
            CheckResult {
                name,
                max_err,
                tolerance: *tolerance,
            }
        })
        .collect();
    Report { checks }
}

fn e1() -> GaussianNifParams {
    GaussianNifParams::new(Matrix::column(&[1.0, 0.0]), Vector::zeros(2), Vector::zeros(2)).unwrap()
}

fn random_shape(rng: &mut SeededRng, max_n: usize, max_m: usize) -> (usize, usize) {
    let n = 1 + rng.below(max_n);
    (n, 1 + rng.below(n.min(max_m)))
}

fn closed_form_vs_marginal(rng: &mut SeededRng, level: Level, mutation: Mutation) -> Result<f64> {
    let mut cases = vec![(e1(), Vector::from(vec![3.0, 4.0]))];
    let unit = GaussianNifParams::new(Matrix::identity(1), Vector::zeros(1), Vector::zeros(1))?;
    cases.push((unit, Vector::zeros(1)));
    for _ in 0..level.pick(50, 200) {
        let (n, m) = random_shape(rng, 6, 4);
        let p = random_nif(rng, n, m);
        let x = random_point(rng, &p);
        cases.push((p, x));
    }
    cases.iter().try_fold(0.0f64, |worst, (p, x)| {
        Ok(worst.max((mutation.closed_form(p, x)? - analytic_marginal_logpdf(p, x)?).abs()))
    })
}

fn closed_form_anchors(_: &mut SeededRng, _: Level, mutation: Mutation) -> Result<f64> {
    let p = e1();
    let x = [3.0, 4.0];
    let unit = GaussianNifParams::new(Matrix::identity(1), Vector::zeros(1), Vector::zeros(1))?;
    let errors = [
        mutation.closed_form(&p, &x)? + 12.434451,
        mutation.closed_form(&unit, &[0.0])? + 1.265512,
        manifold_term(&p, &x, DeviationScale::MODEL)? + 8.918939,
        elbo_closed_form(&p, &x)? + 14.837877,
        kl_to_posterior(&p, &x)? - 2.403426,
    ];
    Ok(errors.iter().fold(0.0f64, |m, e| m.max(e.abs())))
}

fn mc_oracle_within_3se(rng: &mut SeededRng, level: Level, mutation: Mutation) -> Result<f64> {
    let cases: Vec<(GaussianNifParams, Vector, SeededRng)> = (0..level.pick(20, 40))
        .map(|k| {
            let (n, m) = random_shape(rng, 4, 2);
            let p = random_nif(rng, n, m);
            let x = random_point(rng, &p);
            (p, x, rng.child(k as u64))
        })
        .collect();
    let scores = cases
        .into_par_iter()
        .map(|(p, x, mut stream)| {
            let (est, se) = mc_oracle_logpx(&p, &x, 100_000, &mut stream)?;
            Ok((mutation.closed_form(&p, &x)? - est).abs() / se)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.into_iter().fold(0.0, f64::max))
}

/// `log ∫ p(x|z) dz` by Laplace's identity for a Gaussian integrand: the
/// integrand's peak value times `(2π)^{M/2} |Λ|^{−1/2}`, all computed densely.
fn manifold_term_dense(p: &GaussianNifParams, x: &[f64], s: f64) -> Result<f64> {
    let a = dense_map(p);
    let mut weighted = a.clone();
    for (i, ls) in p.log_sigma().iter().enumerate() {
        weighted.row_mut(i).iter_mut().for_each(|v| *v *= (-ls).exp() / s);
    }
    let lambda = a.transpose().matmul(&weighted)?;
    let l = crate::tensor::cholesky(&lambda, crate::tensor::DEFAULT_JITTER)?;
    let r: Vector = x.iter().zip(p.b().iter()).map(|(a, b)| a - b).collect();
    let z = crate::tensor::cholesky_solve(&l, &weighted.tmatvec(&r)?)?;
    let m = p.latent_dim() as f64;
    Ok(log_likelihood(p, x, &z, s) + 0.5 * m * LN_2PI - 0.5 * crate::tensor::logdet_from_cholesky(&l)?)
}

fn manifold_term_identities(rng: &mut SeededRng, level: Level, _: Mutation) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..level.pick(30, 100) {
        let (n, m) = random_shape(rng, 6, 4);
        let p = random_nif(rng, n, m);
        let x = random_point(rng, &p);
        let s = 0.25 + rng.uniform();
        let scale = DeviationScale::new(s)?;
        let aux = intermediates(&p, &x, scale)?;
        let term = manifold_term(&p, &x, scale)?;
        worst = worst
            .max((term - (aux.log_zz - aux.log_zx)).abs())
            .max((term - manifold_term_dense(&p, &x, s)?).abs());

        let iso = GaussianNifParams::isotropic(p.a().clone(), p.b().clone(), 2.0 * rng.uniform() - 1.0)?;
        let x_iso = random_point(rng, &iso);
        let a = manifold_term_projection_form(&iso, &x_iso)?;
        worst = worst.max((a - manifold_term(&iso, &x_iso, DeviationScale::MODEL)?).abs());
    }
    Ok(worst)
}

fn pseudo_inverse_is_mode(rng: &mut SeededRng, _: Level, _: Mutation) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = 2 + rng.below(5);
        let m = 1 + rng.below(n.min(4));
        let p = random_nif(rng, n, m);
        let x = random_point(rng, &p);
        let mean = pseudo_inverse(&p, &x)?;
        let best = log_likelihood(&p, &x, &mean, 1.0);
        for _ in 0..100 {
            let dir = rng.standard_normal(m);
            let z = mean.add(&dir.scale(1e-2 / dir.norm()));
            worst = worst.max(log_likelihood(&p, &x, &z, 1.0) - best);
        }
    }
    Ok(worst)
}

fn elbo_gap_is_kl(rng: &mut SeededRng, level: Level, mutation: Mutation) -> Result<f64> {
    let mut cases = vec![(e1(), Vector::from(vec![3.0, 4.0]))];
    for _ in 0..level.pick(30, 100) {
        let (n, m) = random_shape(rng, 6, 4);
        let p = random_nif(rng, n, m);
        let x = random_point(rng, &p);
        cases.push((p, x));
    }
    cases.iter().try_fold(0.0f64, |worst, (p, x)| {
        let exact = mutation.closed_form(p, x)?;
        let elbo = elbo_closed_form(p, x)?;
        let kl = kl_to_posterior(p, x)?;
        Ok(worst
            .max((exact - elbo - kl).abs())
            .max((kl - posterior_kl_dense(p, x)?).abs())
            .max(elbo - exact))
    })
}

fn nif_cases(rng: &mut SeededRng, count: usize) -> Vec<(GaussianNifParams, Vector)> {
    (0..count)
        .map(|_| {
            let (n, m) = random_shape(rng, 6, 4);
            let p = random_nif(rng, n, m);
            let x = random_point(rng, &p);
            (p, x)
        })
        .collect()
}

fn vjp_closed_form(rng: &mut SeededRng, level: Level, _: Mutation) -> Result<f64> {
    nif_cases(rng, level.pick(10, 30)).iter().try_fold(0.0f64, |worst, (p, x)| {
        let analytic = flatten_grads(&vjp_closed_form_logpx(p, x, 1.0)?);
        let fd = central_gradient(&flatten_nif(p, x), |theta| {
            let (q, xq) = unflatten_nif(p, theta);
            closed_form_logpx(&q, &xq).unwrap_or(f64::NAN)
        });
        Ok(worst.max(relative_error(&analytic, &fd)))
    })
}

fn vjp_manifold(rng: &mut SeededRng, level: Level, _: Mutation) -> Result<f64> {
    let cases = nif_cases(rng, level.pick(10, 30));
    cases.iter().try_fold(0.0f64, |worst, (p, x)| {
        let s = DeviationScale::new(0.3 + rng.uniform())?;
        let analytic = flatten_grads(&vjp_manifold_term(p, x, s, 1.0)?);
        let fd = central_gradient(&flatten_nif(p, x), |theta| {
            let (q, xq) = unflatten_nif(p, theta);
            manifold_term(&q, &xq, s).unwrap_or(f64::NAN)
        });
        Ok(worst.max(relative_error(&analytic, &fd)))
    })
}

fn vjp_stochastic(rng: &mut SeededRng, level: Level, _: Mutation) -> Result<f64> {
    let cases = nif_cases(rng, level.pick(10, 30));
    cases.iter().try_fold(0.0f64, |worst, (p, x)| {
        let inv = stochastic_inverse(p, x, DeviationScale::MODEL, rng)?;
        let z_bar = rng.standard_normal(p.latent_dim());
        let t_bar = rng.normal();
        let analytic = flatten_grads(&vjp_stochastic_inverse(p, &inv, &z_bar, t_bar)?);
        let fd = central_gradient(&flatten_nif(p, x), |theta| {
            let (q, xq) = unflatten_nif(p, theta);
            let Ok(aux) = intermediates(&q, &xq, DeviationScale::MODEL) else {
                return f64::NAN;
            };
            match aux.lambda.whiten_transpose(&inv.eps) {
                Ok(w) => aux.mean.add(&w).dot(&z_bar) + t_bar * aux.manifold_term(),
                Err(_) => f64::NAN,
            }
        });
        Ok(worst.max(relative_error(&analytic, &fd)))
    })
}

fn random_stack(dim: usize, couplings: usize, rng: &mut SeededRng) -> Result<FlowStack> {
    let mut stack = FlowStack::standard(dim, couplings, &[16, 16], rng)?;
    stack.mark_initialized();
    perturb_params(&mut stack, 0.2, rng)?;
    Ok(stack)
}

fn vjp_flow_layers(rng: &mut SeededRng, level: Level, _: Mutation) -> Result<f64> {
    let mut worst = 0.0f64;
    for dim in 2..=level.pick(6, 8) {
        let x = rng.standard_normal(dim);
        let mut a = ActNorm::identity(dim);
        perturb_params(&mut a, 0.5, rng)?;
        worst = worst.max(bijection_vjp_error(&a, &x, rng)?);
        let mut c = AffineCoupling::new(dim, &[6, 5], rng)?;
        perturb_params(&mut c, 0.5, rng)?;
        worst = worst.max(bijection_vjp_error(&c, &x, rng)?);
        worst = worst.max(bijection_vjp_error(&Permutation::alternating(dim), &x, rng)?);
        let mut stack = FlowStack::standard(dim, 2, &[6], rng)?;
        stack.mark_initialized();
        perturb_params(&mut stack, 0.3, rng)?;
        worst = worst.max(bijection_vjp_error(&stack, &x, rng)?);
    }
    Ok(worst)
}

fn random_stochastic(rng: &mut SeededRng, dim: usize, m2: usize) -> Result<StochasticCoupling> {
    let a = Matrix::from_vec(dim / 2, m2, rng.standard_normal(dim / 2 * m2).into_inner())?;
    let mut sc = StochasticCoupling::with_map(dim, a, &[6], rng)?;
    let mut theta = Vec::new();
    sc.write_params(&mut theta);
    let na = (dim / 2) * m2;
    theta[na..].iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    sc.read_params(&theta)?;
    Ok(sc)
}

fn vjp_stochastic_coupling(rng: &mut SeededRng, _: Level, _: Mutation) -> Result<f64> {
    let mut worst = 0.0f64;
    for (dim, m2, s) in [(4, 1, 1.0), (6, 2, 0.5), (8, 3, 0.0), (7, 2, 1.0)] {
        let sc = random_stochastic(rng, dim, m2)?;
        let x = rng.standard_normal(dim);
        let w = rng.standard_normal(sc.latent_dim());
        let c = rng.normal();
        let s = DeviationScale::new(s)?;
        let seed = rng.next_u64();
        let objective = |l: &StochasticCoupling, xx: &[f64]| match l.invert(xx, s, &mut SeededRng::new(seed)) {
            Ok((z, term, _)) => z.dot(&w) + c * term,
            Err(_) => f64::NAN,
        };
        let (_, _, cache) = sc.invert(&x, s, &mut SeededRng::new(seed))?;
        let mut grad = vec![0.0; sc.num_params()];
        let x_bar = sc.vjp(&cache, &w, c, &mut grad)?;
        let mut theta = Vec::new();
        sc.write_params(&mut theta);
        let fd_theta = central_gradient(&theta, |t| {
            let mut l = sc.clone();
            match l.read_params(t) {
                Ok(()) => objective(&l, &x),
                Err(_) => f64::NAN,
            }
        });
        let fd_x = central_gradient(&x, |xx| objective(&sc, xx));
        worst = worst
            .max(relative_error(&grad, &fd_theta))
            .max(relative_error(&x_bar, &fd_x));
    }
    Ok(worst)
}

fn model_config(variant: Variant, n: usize, m: usize) -> ModelConfig {
    ModelConfig {
        variant,
        data_dim: n,
        latent_dim: m,
        couplings: 2,
        latent_couplings: 2,
        hidden: vec![8],
        upsample: None,
        elbo_samples: 1,
    }
}

fn vjp_full_models(rng: &mut SeededRng, level: Level, _: Mutation) -> Result<f64> {
    let shapes = [
        (Variant::Nf, 4, 4),
        (Variant::NifClosed, 5, 2),
        (Variant::NifDeep, 6, 3),
        (Variant::NifClosed, 6, 1),
        (Variant::NifDeep, 4, 2),
    ];
    let mut worst = 0.0f64;
    for &(variant, n, m) in &shapes[..level.pick(3, 5)] {
        let mut model = Model::new(&model_config(variant, n, m), rng)?;
        model.mark_initialized();
        let theta: Vec<f64> = model.params().iter().map(|v| v + 0.2 * rng.normal()).collect();
        model.set_params(&theta)?;
        let batch: Vec<Vector> = (0..3).map(|_| rng.standard_normal(n)).collect();
        let seed = rng.next_u64();
        let (_, grads) = model.loss_and_grads(&batch, &mut SeededRng::new(seed))?;
        let theta = model.params();
        let fd = central_gradient(&theta, |t| {
            let mut probe = model.clone();
            if probe.set_params(t).is_err() {
                return f64::NAN;
            }
            probe
                .loss_and_grads(&batch, &mut SeededRng::new(seed))
                .map_or(f64::NAN, |r| r.0)
        });
        worst = worst.max(relative_error(&grads, &fd));
    }
    Ok(worst)
}

fn upsample_vs_dense(rng: &mut SeededRng, _: Level, _: Mutation) -> Result<f64> {
    let mut worst = 0.0f64;
    for (c, h, w) in [(1, 1, 1), (1, 2, 3), (2, 2, 2), (2, 4, 4)] {
        let n = 4 * c * h * w;
        let log_sigma: Vector = (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let fast = UpsampleNifParams::new(c, h, w, rng.standard_normal(n), log_sigma)?;
        let dense = fast.to_dense()?;
        let x = random_point(rng, &fast);
        let s = DeviationScale::new(0.8)?;
        let diffs = [
            closed_form_logpx(&fast, &x)? - closed_form_logpx(&dense, &x)?,
            manifold_term(&fast, &x, s)? - manifold_term(&dense, &x, s)?,
        ];
        worst = diffs.iter().fold(worst, |m, d| m.max(d.abs()));
        let inv_f = stochastic_inverse(&fast, &x, s, &mut SeededRng::new(1))?;
        let inv_d = stochastic_inverse(&dense, &x, s, &mut SeededRng::new(1))?;
        worst = worst.max(inv_f.sample.sub(&inv_d.sample).max_abs());
        let gf = vjp_closed_form_logpx(&fast, &x, 1.0)?;
        let gd = vjp_closed_form_logpx(&dense, &x, 1.0)?;
        worst = worst
            .max(gf.b.sub(&gd.b).max_abs())
            .max(gf.log_sigma.sub(&gd.log_sigma).max_abs())
            .max(gf.x.sub(&gd.x).max_abs());
    }
    Ok(worst)
}

fn round_trips(rng: &mut SeededRng, level: Level, _: Mutation) -> Result<f64> {
    let mut worst = 0.0f64;
    let dims: &[usize] = match level {
        Level::Quick => &[2, 3, 8],
        Level::Full => &[2, 3, 8, 31, 64],
    };
    for &dim in dims {
        let stack = random_stack(dim, 4, rng)?;
        for _ in 0..10 {
            let x = rng.standard_normal(dim);
            let (v, ld, _) = stack.forward(&x)?;
            let (back, ld_inv) = stack.inverse(&v)?;
            worst = worst.max(back.sub(&x).max_abs()).max((ld + ld_inv).abs());
        }
    }
    // The stochastic coupling is held to 1e-10, a hundredth of the budget.
    for (dim, m2) in [(4, 1), (6, 2), (9, 3)] {
        let sc = random_stochastic(rng, dim, m2)?;
        for _ in 0..20 {
            let z = rng.standard_normal(sc.latent_dim());
            let (x, t1) = sc.generate(&z, DeviationScale::MANIFOLD, rng)?;
            let (back, t2, _) = sc.invert(&x, DeviationScale::MANIFOLD, rng)?;
            worst = worst.max(100.0 * back.sub(&z).max_abs()).max(100.0 * (t1 - t2).abs());
        }
    }
    Ok(worst)
}

fn serialization_round_trips(rng: &mut SeededRng, _: Level, _: Mutation) -> Result<f64> {
    let mut mismatches = 0usize;
    for variant in [Variant::Nf, Variant::NifClosed, Variant::NifDeep] {
        let mut model = Model::new(&model_config(variant, 5, 2), rng)?;
        model.mark_initialized();
        let theta: Vec<f64> = model.params().iter().map(|v| v + 0.1 * rng.normal()).collect();
        model.set_params(&theta)?;
        let n = model.num_params();
        let c = Checkpoint {
            model,
            adam: AdamState {
                m: rng.standard_normal(n).into_inner(),
                v: (0..n).map(|_| rng.uniform()).collect(),
                step: 7,
            },
            config: TrainConfig::new(rng.next_u64()),
            rng: rng.state(),
            extra: BTreeMap::from([("check".to_string(), "serialization".to_string())]),
        };
        let bytes = encode_checkpoint(&c)?;
        if encode_checkpoint(&decode_checkpoint(&bytes)?)? != bytes {
            mismatches += 1;
        }
    }
    let dims = vec![3, 2, 5];
    let array = IdxArray {
        dims,
        data: (0..30).map(|_| rng.below(256) as u8).collect(),
    };
    let bytes = encode_idx(&array)?;
    if parse_idx(&bytes)? != array {
        mismatches += 1;
    }
    if mismatches > 0 {
        return Err(NifError::State(format!("{mismatches} round trips changed bytes")));
    }
    Ok(0.0)
}
