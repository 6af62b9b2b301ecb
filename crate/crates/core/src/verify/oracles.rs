//! Reference computations that deliberately avoid the fast paths they check:
//! dense `N×N` Gaussians instead of the `M×M` precision algebra, finite
//! differences instead of adjoints, quadrature instead of closed forms.

use crate::error::Result;
use crate::flow::Bijection;
use crate::nif::{GaussianNifParams, NifGrads, NoisyLinear};
use crate::tensor::{
    cholesky, cholesky_inverse, cholesky_solve, logdet_from_cholesky, Matrix, SeededRng, Vector, DEFAULT_JITTER,
    LN_2PI,
};

/// `log N(x | mean, cov)` by a dense Cholesky of `cov`.
pub fn gaussian_logpdf_dense(x: &[f64], mean: &[f64], cov: &Matrix) -> Result<f64> {
    let l = cholesky(cov, DEFAULT_JITTER)?;
    let r: Vector = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let sol = cholesky_solve(&l, &r)?;
    Ok(-0.5 * (r.dot(&sol) + logdet_from_cholesky(&l)? + x.len() as f64 * LN_2PI))
}

/// `A` as an explicit matrix, one basis vector at a time.
pub fn dense_map<P: NoisyLinear + ?Sized>(p: &P) -> Matrix {
    let (n, m) = (p.data_dim(), p.latent_dim());
    let mut a = Matrix::zeros(n, m);
    let mut e = vec![0.0; m];
    for j in 0..m {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = p.apply(&e);
        for i in 0..n {
            a[(i, j)] = col[i];
        }
    }
    a
}

/// `AAᵀ + Σ`, the marginal covariance of a linear-Gaussian NIF under a unit prior.
pub fn marginal_covariance<P: NoisyLinear + ?Sized>(p: &P) -> Matrix {
    let a = dense_map(p);
    let mut cov = a.matmul(&a.transpose()).expect("square");
    for (i, ls) in p.log_sigma().iter().enumerate() {
        cov[(i, i)] += ls.exp();
    }
    cov
}

/// `log N(x | b, AAᵀ + Σ)` by the dense route.
pub fn analytic_marginal_logpdf<P: NoisyLinear + ?Sized>(p: &P, x: &[f64]) -> Result<f64> {
    gaussian_logpdf_dense(x, p.offset(), &marginal_covariance(p))
}

/// `KL[N(m0, c0) ‖ N(m1, c1)]` from dense Cholesky factors.
pub fn gaussian_kl_dense(m0: &[f64], c0: &Matrix, m1: &[f64], c1: &Matrix) -> Result<f64> {
    let l0 = cholesky(c0, DEFAULT_JITTER)?;
    let l1 = cholesky(c1, DEFAULT_JITTER)?;
    let c1_inv = cholesky_inverse(&l1)?;
    let trace = c1_inv.matmul(c0)?.trace();
    let d: Vector = m1.iter().zip(m0).map(|(a, b)| a - b).collect();
    let quad = d.dot(&cholesky_solve(&l1, &d)?);
    let k = m0.len() as f64;
    Ok(0.5 * (trace + quad - k + logdet_from_cholesky(&l1)? - logdet_from_cholesky(&l0)?))
}

/// KL from the stochastic inverse at `s = 1` to the exact posterior under a
/// unit prior, with every matrix formed densely from `A` and `Σ`.
pub fn posterior_kl_dense<P: NoisyLinear + ?Sized>(p: &P, x: &[f64]) -> Result<f64> {
    let a = dense_map(p);
    let m = p.latent_dim();
    let mut weighted = a.clone();
    for (i, ls) in p.log_sigma().iter().enumerate() {
        weighted.row_mut(i).iter_mut().for_each(|v| *v *= (-ls).exp());
    }
    let lambda = a.transpose().matmul(&weighted)?;
    let r: Vector = x.iter().zip(p.offset()).map(|(a, b)| a - b).collect();
    let u = weighted.tmatvec(&r)?;
    let l_q = cholesky(&lambda, DEFAULT_JITTER)?;
    let q_cov = cholesky_inverse(&l_q)?;
    let q_mean = q_cov.matvec(&u)?;
    let post_prec = lambda.add(&Matrix::identity(m))?;
    let post_cov = cholesky_inverse(&cholesky(&post_prec, DEFAULT_JITTER)?)?;
    let post_mean = post_cov.matvec(&u)?;
    gaussian_kl_dense(&q_mean, &q_cov, &post_mean, &post_cov)
}

/// `log p(x | z) = log N(x | A z + b, s·Σ)`, elementwise.
pub fn log_likelihood<P: NoisyLinear + ?Sized>(p: &P, x: &[f64], z: &[f64], s: f64) -> f64 {
    let mean = p.apply(z);
    x.iter()
        .zip(mean.iter())
        .zip(p.offset())
        .zip(p.log_sigma())
        .map(|(((xi, ai), bi), ls)| {
            let var = s * ls.exp();
            let r = xi - ai - bi;
            -0.5 * (r * r / var + var.ln() + LN_2PI)
        })
        .sum()
}

/// Central finite-difference step used by every gradient check.
pub fn fd_step(theta: f64) -> f64 {
    1e-6 * (1.0 + theta.abs())
}

/// Central-difference gradient of `f` at `theta`.
pub fn central_gradient(theta: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vector {
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let h = fd_step(theta[i]);
            work[i] = theta[i] + h;
            let up = f(&work);
            work[i] = theta[i] - h;
            let down = f(&work);
            work[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖analytic − reference‖∞ / max(‖reference‖∞, 1e-8)`
/// Non-finite entries or a length mismatch give infinity.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    if analytic.len() != reference.len() || analytic.iter().chain(reference).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    diff / scale.max(1e-8)
}

/// Composite Simpson rule on `[lo, hi]` with `intervals` (rounded up to even) panels.
pub fn simpson(lo: f64, hi: f64, intervals: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let n = intervals + intervals % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + k as f64 * h);
    }
    acc * h / 3.0
}

/// Nelder–Mead simplex minimization with standard coefficients.
pub fn nelder_mead(start: &[f64], step: f64, iters: usize, mut f: impl FnMut(&[f64]) -> f64) -> Vector {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= 1e-15 * (1.0 + values[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|p| p[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(c, w)| c + t * (w - c)).collect()
        };
        let reflected = along(-1.0, &simplex[n]);
        let fr = f(&reflected);
        if fr < values[0] {
            let expanded = along(-2.0, &simplex[n]);
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let contracted = along(0.5, &simplex[n]);
            let fc = f(&contracted);
            if fc < values[n] {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    simplex[i] = best.iter().zip(&simplex[i]).map(|(b, p)| b + 0.5 * (p - b)).collect();
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    Vector::from(simplex[best].clone())
}

/// A random well-conditioned dense NIF with `log_sigma ∈ [−1, 1]`.
pub fn random_nif(rng: &mut SeededRng, n: usize, m: usize) -> GaussianNifParams {
    loop {
        let a = Matrix::from_vec(n, m, rng.standard_normal(n * m).into_inner()).expect("shape");
        let b = rng.standard_normal(n);
        let log_sigma: Vector = (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        if let Ok(p) = GaussianNifParams::new(a, b, log_sigma) {
            return p;
        }
    }
}

/// A point near the model: `x = A z + b + noise`.
pub fn random_point<P: NoisyLinear + ?Sized>(rng: &mut SeededRng, p: &P) -> Vector {
    let z = rng.standard_normal(p.latent_dim());
    let mut x = p.apply(&z);
    x.axpy(1.0, p.offset());
    for (xi, ls) in x.iter_mut().zip(p.log_sigma()) {
        *xi += (0.5 * ls).exp() * rng.normal();
    }
    x
}

/// `[A (row-major), b, log_sigma, x]`.
pub fn flatten_nif(p: &GaussianNifParams, x: &[f64]) -> Vec<f64> {
    let mut v = p.a().data().to_vec();
    v.extend_from_slice(p.b());
    v.extend_from_slice(p.log_sigma());
    v.extend_from_slice(x);
    v
}

/// Inverse of [`flatten_nif`] with the shape of `template`. `log_sigma` is
/// written unclamped so finite differences see the raw parameter.
pub fn unflatten_nif(template: &GaussianNifParams, theta: &[f64]) -> (GaussianNifParams, Vector) {
    let (n, m) = template.a().shape();
    let mut p = template.clone();
    {
        let (a, b, ls) = p.parts_mut();
        a.data_mut().copy_from_slice(&theta[..n * m]);
        b.copy_from_slice(&theta[n * m..n * m + n]);
        ls.copy_from_slice(&theta[n * m + n..n * m + 2 * n]);
    }
    (p, Vector::from(&theta[n * m + 2 * n..]))
}

/// Gradients in [`flatten_nif`] order.
pub fn flatten_grads(g: &NifGrads) -> Vec<f64> {
    let mut v = g.a.as_ref().map(|a| a.data().to_vec()).unwrap_or_default();
    v.extend_from_slice(&g.b);
    v.extend_from_slice(&g.log_sigma);
    v.extend_from_slice(&g.x);
    v
}

/// Adds `N(0, scale²)` noise to every parameter.
pub fn perturb_params<B: Bijection>(layer: &mut B, scale: f64, rng: &mut SeededRng) -> Result<()> {
    let mut theta = Vec::new();
    layer.write_params(&mut theta);
    theta.iter_mut().for_each(|v| *v += scale * rng.normal());
    layer.read_params(&theta)
}

/// Relative error of `vjp` against central differences of `w·y + c·logdet`,
/// over parameters and input.
pub fn bijection_vjp_error<B: Bijection + Clone>(layer: &B, x: &[f64], rng: &mut SeededRng) -> Result<f64> {
    let w = rng.standard_normal(layer.dim());
    let c = rng.normal();
    let objective = |l: &B, xx: &[f64]| {
        l.forward(xx)
            .map(|(y, ld, _)| y.dot(&w) + c * ld)
            .unwrap_or(f64::NAN)
    };
    let (_, _, cache) = layer.forward(x)?;
    let mut grad = vec![0.0; layer.num_params()];
    let x_bar = layer.vjp(&cache, &w, c, &mut grad)?;
    let mut theta = Vec::new();
    layer.write_params(&mut theta);
    let fd_theta = central_gradient(&theta, |t| {
        let mut l = layer.clone();
        match l.read_params(t) {
            Ok(()) => objective(&l, x),
            Err(_) => f64::NAN,
        }
    });
    let fd_x = central_gradient(x, |xx| objective(layer, xx));
    let param_err = if theta.is_empty() { 0.0 } else { relative_error(&grad, &fd_theta) };
    Ok(param_err.max(relative_error(&x_bar, &fd_x)))
}
