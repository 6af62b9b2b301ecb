use super::*;
use crate::nif::{intermediates, DeviationScale};
use crate::tensor::{std_normal_logpdf, symmetric_eigen, Matrix, LN_2PI};
use crate::verify::oracles::{central_gradient, relative_error, simpson};
use crate::NifError;

fn perturb<B: Bijection>(layer: &mut B, scale: f64, rng: &mut SeededRng) {
    let mut theta = Vec::new();
    layer.write_params(&mut theta);
    theta.iter_mut().for_each(|v| *v += scale * rng.normal());
    layer.read_params(&theta).unwrap();
}

fn random_stack(dim: usize, couplings: usize, scale: f64, rng: &mut SeededRng) -> FlowStack {
    let mut stack = FlowStack::standard(dim, couplings, &[16, 16], rng).unwrap();
    stack.mark_initialized();
    perturb(&mut stack, scale, rng);
    stack
}

fn log_abs_det_fd(f: impl Fn(&[f64]) -> Vector, x: &[f64]) -> f64 {
    let n = x.len();
    let h = 1e-5;
    let mut jac = Matrix::zeros(n, n);
    for j in 0..n {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let d = f(&plus).sub(&f(&minus)).scale(0.5 / h);
        for i in 0..n {
            jac[(i, j)] = d[i];
        }
    }
    let jtj = jac.transpose().matmul(&jac).unwrap();
    let (vals, _) = symmetric_eigen(&jtj).unwrap();
    0.5 * vals.iter().map(|v| v.ln()).sum::<f64>()
}

/// Relative error of `vjp` against central differences of `w·y + c·logdet`.
fn vjp_error<B: Bijection + Clone>(layer: &B, x: &[f64], rng: &mut SeededRng) -> f64 {
    let w = rng.standard_normal(layer.dim());
    let c = rng.normal();
    let objective = |l: &B, xx: &[f64]| {
        let (y, ld, _) = l.forward(xx).unwrap();
        y.dot(&w) + c * ld
    };
    let (_, _, cache) = layer.forward(x).unwrap();
    let mut grad = vec![0.0; layer.num_params()];
    let x_bar = layer.vjp(&cache, &w, c, &mut grad).unwrap();

    let mut theta = Vec::new();
    layer.write_params(&mut theta);
    let fd_theta = central_gradient(&theta, |t| {
        let mut l = layer.clone();
        l.read_params(t).unwrap();
        objective(&l, x)
    });
    let fd_x = central_gradient(x, |xx| objective(layer, xx));
    let param_err = if theta.is_empty() { 0.0 } else { relative_error(&grad, &fd_theta) };
    param_err.max(relative_error(&x_bar, &fd_x))
}

// ActNorm -------------------------------------------------------------------------

#[test]
fn actnorm_identity() {
    let a = ActNorm::identity(3);
    let (y, ld, _) = a.forward(&[1.0, -2.0, 3.0]).unwrap();
    assert_eq!(y.as_slice(), &[1.0, -2.0, 3.0]);
    assert_eq!(ld, 0.0);
}

#[test]
fn actnorm_requires_initialization() {
    let a = ActNorm::new(2);
    assert!(!a.is_initialized());
    assert!(matches!(a.forward(&[0.0, 0.0]), Err(NifError::State(_))));
    assert!(matches!(a.inverse(&[0.0, 0.0]), Err(NifError::State(_))));
}

#[test]
fn actnorm_initialization_standardizes_batch() {
    let mut rng = SeededRng::new(1);
    let batch: Vec<Vector> = (0..500)
        .map(|_| rng.standard_normal(3).scale(3.0).add(&[2.0, 2.0, 2.0]))
        .collect();
    let mut a = ActNorm::new(3);
    a.initialize(&batch).unwrap();
    let out: Vec<Vector> = batch.iter().map(|x| a.forward(x).unwrap().0).collect();
    for k in 0..3 {
        let mean = out.iter().map(|y| y[k]).sum::<f64>() / 500.0;
        let var = out.iter().map(|y| (y[k] - mean).powi(2)).sum::<f64>() / 500.0;
        assert!(mean.abs() <= 1e-6 && (var.sqrt() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn actnorm_round_trip_and_logdet_gradient() {
    let mut rng = SeededRng::new(2);
    let mut a = ActNorm::identity(5);
    perturb(&mut a, 0.5, &mut rng);
    for _ in 0..50 {
        let x = rng.standard_normal(5);
        let (y, ld, _) = a.forward(&x).unwrap();
        let (back, ld_inv) = a.inverse(&y).unwrap();
        assert!(back.sub(&x).max_abs() <= 1e-10);
        assert!((ld + ld_inv).abs() <= 1e-12);
    }
    let (_, _, cache) = a.forward(&[0.0; 5]).unwrap();
    let mut grad = vec![0.0; 10];
    a.vjp(&cache, &[0.0; 5], 1.0, &mut grad).unwrap();
    assert_eq!(&grad[..5], &[1.0; 5]);
    assert_eq!(&grad[5..], &[0.0; 5]);
}

// Affine coupling -----------------------------------------------------------------

#[test]
fn fresh_coupling_is_identity() {
    let c = AffineCoupling::new(5, &[8], &mut SeededRng::new(3)).unwrap();
    let x = [0.3, -1.0, 2.0, 0.5, 4.0];
    let (y, ld, _) = c.forward(&x).unwrap();
    assert_eq!(y.as_slice(), &x);
    assert_eq!(ld, 0.0);
    assert!(AffineCoupling::new(1, &[8], &mut SeededRng::new(3)).is_err());
}

#[test]
fn coupling_round_trip_after_perturbation() {
    let mut rng = SeededRng::new(4);
    let mut c = AffineCoupling::new(6, &[10, 10], &mut rng).unwrap();
    perturb(&mut c, 0.7, &mut rng);
    for _ in 0..100 {
        let x = rng.standard_normal(6).scale(2.0);
        let (y, ld, _) = c.forward(&x).unwrap();
        let (back, ld_inv) = c.inverse(&y).unwrap();
        assert!(back.sub(&x).max_abs() <= 1e-8);
        assert!((ld + ld_inv).abs() <= 1e-9);
    }
}

#[test]
fn coupling_logdet_matches_numerical_jacobian() {
    let mut rng = SeededRng::new(5);
    let mut c = AffineCoupling::new(4, &[8], &mut rng).unwrap();
    perturb(&mut c, 0.5, &mut rng);
    for _ in 0..10 {
        let x = rng.standard_normal(4);
        let (_, ld, _) = c.forward(&x).unwrap();
        let fd = log_abs_det_fd(|xx| c.forward(xx).unwrap().0, &x);
        assert!((ld - fd).abs() <= 1e-5, "{ld} vs {fd}");
    }
}

#[test]
fn coupling_scale_is_bounded() {
    let mut rng = SeededRng::new(6);
    let mut c = AffineCoupling::new(2, &[4], &mut rng).unwrap();
    perturb(&mut c, 50.0, &mut rng);
    let (_, ld, _) = c.forward(&[3.0, 1.0]).unwrap();
    assert!(ld.abs() <= 2.0 + 1e-12);
}

// Permutation ---------------------------------------------------------------------

#[test]
fn permutation_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let id = Permutation::identity(4);
    assert_eq!(id.forward(&x).unwrap().0.as_slice(), &x);
    let rev = Permutation::reverse(4);
    let once = rev.forward(&x).unwrap().0;
    assert_eq!(once.as_slice(), &[4.0, 3.0, 2.0, 1.0]);
    assert_eq!(rev.forward(&once).unwrap().0.as_slice(), &x);

    let mut rng = SeededRng::new(7);
    for dim in [1, 5, 17] {
        let mut idx: Vec<usize> = (0..dim).collect();
        rng.shuffle(&mut idx);
        let p = Permutation::new(idx).unwrap();
        let v = rng.standard_normal(dim);
        let (y, ld, _) = p.forward(&v).unwrap();
        assert_eq!(ld, 0.0);
        assert_eq!(p.inverse(&y).unwrap().0, v);
    }
    assert!(Permutation::new(vec![0, 0, 1]).is_err());
    assert!(Permutation::new(vec![0, 3]).is_err());
}

#[test]
fn alternating_permutation_crosses_parity() {
    for dim in [4, 5, 7] {
        let p = Permutation::alternating(dim);
        let crossing = p.indices().iter().enumerate().filter(|(i, &j)| i % 2 != j % 2).count();
        assert!(crossing >= dim - 1, "dim {dim}");
    }
}

// Gradients -----------------------------------------------------------------------

#[test]
fn every_layer_vjp_matches_finite_differences() {
    let mut rng = SeededRng::new(8);
    for dim in 2..=8 {
        let x = rng.standard_normal(dim);

        let mut a = ActNorm::identity(dim);
        perturb(&mut a, 0.5, &mut rng);
        assert!(vjp_error(&a, &x, &mut rng) <= 1e-5, "actnorm dim {dim}");

        let mut c = AffineCoupling::new(dim, &[6, 5], &mut rng).unwrap();
        perturb(&mut c, 0.5, &mut rng);
        assert!(vjp_error(&c, &x, &mut rng) <= 1e-5, "coupling dim {dim}");

        let p = Permutation::alternating(dim);
        assert!(vjp_error(&p, &x, &mut rng) <= 1e-5, "permutation dim {dim}");

        let stack = random_stack(dim, 2, 0.3, &mut rng);
        assert!(vjp_error(&stack, &x, &mut rng) <= 1e-5, "stack dim {dim}");
    }
}

#[test]
fn zero_cotangent_gives_zero_gradients() {
    let mut rng = SeededRng::new(9);
    let stack = random_stack(4, 2, 0.5, &mut rng);
    let x = rng.standard_normal(4);
    let (_, _, cache) = stack.forward(&x).unwrap();
    let mut grad = vec![0.0; stack.num_params()];
    let x_bar = stack.vjp(&cache, &[0.0; 4], 0.0, &mut grad).unwrap();
    assert!(grad.iter().all(|g| *g == 0.0));
    assert!(x_bar.iter().all(|g| *g == 0.0));
}

#[test]
fn stale_cache_is_rejected() {
    let mut rng = SeededRng::new(10);
    let mut c = AffineCoupling::new(4, &[4], &mut rng).unwrap();
    let (_, _, cache) = c.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    perturb(&mut c, 0.1, &mut rng);
    let mut grad = vec![0.0; c.num_params()];
    assert!(matches!(
        c.vjp(&cache, &[1.0; 4], 0.0, &mut grad),
        Err(NifError::State(_))
    ));

    let mut a = ActNorm::identity(2);
    let (_, _, cache) = a.forward(&[1.0, 2.0]).unwrap();
    a.read_params(&[0.1, 0.0, 0.0, 0.0]).unwrap();
    assert!(a.vjp(&cache, &[1.0; 2], 0.0, &mut [0.0; 4]).is_err());
}

// Stacks --------------------------------------------------------------------------

#[test]
fn deep_stacks_round_trip() {
    let mut rng = SeededRng::new(11);
    for dim in [2, 3, 8, 31, 64] {
        let stack = random_stack(dim, 4, 0.2, &mut rng);
        assert_eq!(stack.layers().len(), 12);
        for _ in 0..10 {
            let x = rng.standard_normal(dim);
            let (v, ld, _) = stack.forward(&x).unwrap();
            let (back, ld_inv) = stack.inverse(&v).unwrap();
            assert!(back.sub(&x).max_abs() <= 1e-8, "dim {dim}");
            assert!((ld + ld_inv).abs() <= 1e-9);
        }
        for layer in stack.layers() {
            let x = rng.standard_normal(dim);
            let (y, ld, _) = layer.forward(&x).unwrap();
            assert!((layer.inverse(&y).unwrap().1 + ld).abs() <= 1e-9, "{}", layer.kind());
        }
    }
}

#[test]
fn stack_initialization_only_touches_uninitialized_actnorms() {
    let mut rng = SeededRng::new(12);
    let mut stack = FlowStack::standard(3, 2, &[4], &mut rng).unwrap();
    assert!(!stack.is_initialized());
    let batch: Vec<Vector> = (0..64).map(|_| rng.standard_normal(3).scale(5.0)).collect();
    let out = stack.initialize(&batch).unwrap();
    assert!(stack.is_initialized());
    assert_eq!(out.len(), 64);
    let mut before = Vec::new();
    stack.write_params(&mut before);
    stack.initialize(&batch).unwrap();
    let mut after = Vec::new();
    stack.write_params(&mut after);
    assert_eq!(before, after);
}

#[test]
fn two_dimensional_flow_density_integrates_to_one() {
    let mut rng = SeededRng::new(13);
    let stack = random_stack(2, 3, 0.25, &mut rng);
    let density = |x: f64, y: f64| {
        let (v, ld, _) = stack.forward(&[x, y]).unwrap();
        (std_normal_logpdf(&v) + ld).exp()
    };
    let total = simpson(-30.0, 30.0, 1200, |x| simpson(-30.0, 30.0, 1200, |y| density(x, y)));
    assert!((total - 1.0).abs() <= 1e-3, "{total}");
}

#[test]
fn nonfinite_activation_reports_layer_index() {
    let mut stack = FlowStack::empty(2);
    stack.push(FlowLayer::ActNorm(ActNorm::identity(2))).unwrap();
    let mut big = ActNorm::identity(2);
    big.read_params(&[800.0, 0.0, 0.0, 0.0]).unwrap();
    stack.push(FlowLayer::ActNorm(big)).unwrap();
    match stack.forward(&[1.0, 1.0]) {
        Err(NifError::Numeric { index, .. }) => assert_eq!(index, Some(1)),
        other => panic!("unexpected {other:?}"),
    }
    assert!(stack.push(FlowLayer::ActNorm(ActNorm::identity(3))).is_err());
}

// Stochastic coupling ----------------------------------------------------------------

fn pad_coupling(dim: usize, m2: usize) -> StochasticCoupling {
    StochasticCoupling::new(dim, m2, &[8], &mut SeededRng::new(0)).unwrap()
}

#[test]
fn stochastic_identity_pad_generates_on_plane() {
    let sc = pad_coupling(8, 2);
    assert_eq!(sc.latent_dim(), 6);
    let z = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let (x, term) = sc.generate(&z, DeviationScale::MANIFOLD, &mut SeededRng::new(1)).unwrap();
    let (x1, x2) = parity_split(&x);
    assert_eq!(x1.as_slice(), &z[..4]);
    assert_eq!(x2.as_slice(), &[5.0, 6.0, 0.0, 0.0]);
    assert!((term + LN_2PI).abs() <= 1e-12); // −½ ln|I| − ((4−2)/2) ln 2π

    let again = sc.generate(&z, DeviationScale::MANIFOLD, &mut SeededRng::new(77)).unwrap();
    assert_eq!(x, again.0);
}

#[test]
fn stochastic_identity_pad_inverts_to_leading_block() {
    let sc = pad_coupling(8, 2);
    let x = parity_merge(&[0.5, -0.5, 1.5, 2.0], &[3.0, -1.0, 0.7, 0.2]);
    let (z, _, _) = sc.invert(&x, DeviationScale::MANIFOLD, &mut SeededRng::new(0)).unwrap();
    assert_eq!(&z[..4], &[0.5, -0.5, 1.5, 2.0]);
    assert!((z[4] - 3.0).abs() <= 1e-15 && (z[5] + 1.0).abs() <= 1e-15);
}

fn random_stochastic(rng: &mut SeededRng, dim: usize, m2: usize) -> StochasticCoupling {
    let a = Matrix::from_vec(dim / 2, m2, rng.standard_normal(dim / 2 * m2).into_inner()).unwrap();
    let mut sc = StochasticCoupling::with_map(dim, a, &[6], rng).unwrap();
    let mut theta = Vec::new();
    sc.write_params(&mut theta);
    let na = (dim / 2) * m2;
    theta[na..].iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    sc.read_params(&theta).unwrap();
    sc
}

#[test]
fn stochastic_round_trip_at_manifold_scale() {
    let mut rng = SeededRng::new(14);
    for (dim, m2) in [(4, 1), (6, 2), (9, 3)] {
        let sc = random_stochastic(&mut rng, dim, m2);
        for _ in 0..20 {
            let z = rng.standard_normal(sc.latent_dim());
            let (x, t1) = sc.generate(&z, DeviationScale::MANIFOLD, &mut rng).unwrap();
            let (back, t2, _) = sc.invert(&x, DeviationScale::MANIFOLD, &mut rng).unwrap();
            assert!(back.sub(&z).max_abs() <= 1e-10);
            assert!((t1 - t2).abs() <= 1e-10);
        }
    }
}

#[test]
fn stochastic_invert_monte_carlo_moments() {
    let mut rng = SeededRng::new(15);
    let sc = random_stochastic(&mut rng, 6, 2);
    let x = rng.standard_normal(6);
    let (x1, x2) = parity_split(&x);
    let cond = sc_conditioned(&sc, &x1);
    let aux = intermediates(&cond, &x2, DeviationScale::MODEL).unwrap();
    let cov = aux.lambda.inverse().unwrap().to_matrix();
    let n = 100_000;
    let draws: Vec<Vector> = (0..n)
        .map(|_| sc.invert(&x, DeviationScale::MODEL, &mut rng).unwrap().0)
        .collect();
    for k in 0..2 {
        let vals: Vec<f64> = draws.iter().map(|z| z[3 + k]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - aux.mean[k]).abs() <= 3.0 * (cov[(k, k)] / n as f64).sqrt());
        assert!((var - cov[(k, k)]).abs() <= 3.0 * cov[(k, k)] * (2.0 / (n - 1) as f64).sqrt());
    }
}

/// The inner NIF the coupling uses for `x₁`, rebuilt from public parts.
fn sc_conditioned(sc: &StochasticCoupling, x1: &[f64]) -> crate::nif::GaussianNifParams {
    let mut theta = Vec::new();
    sc.write_params(&mut theta);
    let na = sc.a().data().len();
    let n2 = sc.data_dim() / 2;
    let hidden = [6];
    let mut mlp = Mlp::new(x1.len(), &hidden, 2 * n2, &mut SeededRng::new(0));
    mlp.read_params(&theta[na..]).unwrap();
    let out = mlp.eval(x1);
    crate::nif::GaussianNifParams::new(sc.a().clone(), Vector::from(&out[..n2]), Vector::from(&out[n2..])).unwrap()
}

#[test]
fn stochastic_vjp_matches_finite_differences() {
    let mut rng = SeededRng::new(16);
    for (dim, m2, s) in [(4, 1, 1.0), (6, 2, 0.5), (8, 3, 0.0), (7, 2, 1.0)] {
        let sc = random_stochastic(&mut rng, dim, m2);
        let x = rng.standard_normal(dim);
        let w = rng.standard_normal(sc.latent_dim());
        let c = rng.normal();
        let s = DeviationScale::new(s).unwrap();
        let seed = rng.next_u64();
        let objective = |l: &StochasticCoupling, xx: &[f64]| {
            let (z, term, _) = l.invert(xx, s, &mut SeededRng::new(seed)).unwrap();
            z.dot(&w) + c * term
        };
        let (_, _, cache) = sc.invert(&x, s, &mut SeededRng::new(seed)).unwrap();
        let mut grad = vec![0.0; sc.num_params()];
        let x_bar = sc.vjp(&cache, &w, c, &mut grad).unwrap();
        let mut theta = Vec::new();
        sc.write_params(&mut theta);
        let fd_theta = central_gradient(&theta, |t| {
            let mut l = sc.clone();
            l.read_params(t).unwrap();
            objective(&l, &x)
        });
        let fd_x = central_gradient(&x, |xx| objective(&sc, xx));
        assert!(relative_error(&grad, &fd_theta) <= 1e-5, "params dim {dim}");
        assert!(relative_error(&x_bar, &fd_x) <= 1e-5, "input dim {dim}");
    }
}

#[test]
fn stochastic_coupling_shape_errors() {
    let mut rng = SeededRng::new(17);
    assert!(StochasticCoupling::new(4, 2, &[4], &mut rng).is_err());
    assert!(StochasticCoupling::new(4, 0, &[4], &mut rng).is_err());
    let sc = pad_coupling(6, 1);
    assert!(matches!(
        sc.generate(&[0.0; 3], DeviationScale::MANIFOLD, &mut rng),
        Err(NifError::Shape(_))
    ));
}
