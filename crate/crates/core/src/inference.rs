//! Bootstrap standard errors and the gradient matrix that maps envelope
//! parameters to `(vec β, vech Σ, ρ)`.

use alloc::format;
use alloc::vec::Vec;

use crate::data::ObservedDataset;
use crate::em::{complete_case_fit, em_envelope_fit, em_standard_fit, EmOptions, EnvelopeFit};
use crate::estep::PredictorParams;
use crate::linalg::{
    contraction_matrix, expansion_matrix, kron, pinv, spd_inverse, symmetrize, vec, vech_unchecked, Mat, Vector,
};
use crate::runner::{Runner, Serial};
use crate::select::resample_indices;
use crate::stats::{normal_cdf, quantile_type7, sample_sd};
use crate::{Error, Result};

/// Which fitting path a bootstrap replicate reruns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    EmEnvelope,
    EmStandard,
    CompleteCaseEnvelope,
    CompleteCaseStandard,
}

impl Estimator {
    pub fn fit(self, ds: &ObservedDataset, opts: &EmOptions) -> Result<EnvelopeFit> {
        match self {
            Estimator::EmEnvelope => em_envelope_fit(ds, opts),
            Estimator::EmStandard => em_standard_fit(ds, opts),
            Estimator::CompleteCaseEnvelope => complete_case_fit(ds, opts, true),
            Estimator::CompleteCaseStandard => complete_case_fit(ds, opts, false),
        }
    }
}

/// Per-coefficient bootstrap summaries of `β`, each an r × p matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub estimate: Mat,
    pub se: Mat,
    pub ci_lower: Mat,
    pub ci_upper: Mat,
    pub p_value: Mat,
    pub reps: usize,
    pub successes: usize,
    pub failures: usize,
    /// More than a tenth of the replicates failed.
    pub unreliable: bool,
}

fn replicate_fits<R: Runner>(
    ds: &ObservedDataset,
    opts: &EmOptions,
    estimator: Estimator,
    reps: usize,
    seed: u64,
    runner: &R,
) -> Vec<Option<EnvelopeFit>> {
    let idx = resample_indices(ds.n(), reps, seed);
    let mut o = opts.clone();
    o.track_loglik = false;
    runner.run(reps, |j| {
        let boot = ds.select_rows(&idx[j]).ok()?;
        let fit = estimator.fit(&boot, &o).ok()?;
        fit.converged.then_some(fit)
    })
}

/// Case-resampling bootstrap of `β̂` with `u` held at `opts.u`.
pub fn bootstrap_se_with<R: Runner>(
    ds: &ObservedDataset,
    opts: &EmOptions,
    estimator: Estimator,
    reps: usize,
    seed: u64,
    runner: &R,
) -> Result<BootstrapResult> {
    if reps < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 2 replicates, got {reps}")));
    }
    let mut o = opts.clone();
    o.track_loglik = false;
    let original = estimator.fit(ds, &o)?;
    let fits = replicate_fits(ds, opts, estimator, reps, seed, runner);
    let betas: Vec<&Mat> = fits.iter().flatten().map(|f| &f.beta).collect();
    let successes = betas.len();
    if successes < 2 {
        return Err(Error::AllReplicatesFailed);
    }
    let (r, p) = original.beta.shape();
    let mut se = Mat::zeros(r, p);
    let mut lo = Mat::zeros(r, p);
    let mut hi = Mat::zeros(r, p);
    let mut pv = Mat::zeros(r, p);
    for j in 0..p {
        for i in 0..r {
            let mut v: Vec<f64> = betas.iter().map(|b| b[(i, j)]).collect();
            let s = sample_sd(&v);
            v.sort_by(f64::total_cmp);
            se[(i, j)] = s;
            lo[(i, j)] = quantile_type7(&v, 0.025);
            hi[(i, j)] = quantile_type7(&v, 0.975);
            let est = original.beta[(i, j)];
            pv[(i, j)] = if s > 0.0 {
                (2.0 * normal_cdf(-(est / s).abs())).clamp(0.0, 1.0)
            } else if est == 0.0 {
                1.0
            } else {
                0.0
            };
        }
    }
    let failures = reps - successes;
    Ok(BootstrapResult {
        estimate: original.beta,
        se,
        ci_lower: lo,
        ci_upper: hi,
        p_value: pv,
        reps,
        successes,
        failures,
        unreliable: failures * 10 > reps,
    })
}

pub fn bootstrap_se(
    ds: &ObservedDataset,
    opts: &EmOptions,
    estimator: Estimator,
    reps: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    bootstrap_se_with(ds, opts, estimator, reps, seed, &Serial)
}

/// `ρ` as a vector: `(μx, vech Σx)` or `(π)`.
pub fn rho_vector(pred: &PredictorParams) -> Vector {
    match pred {
        PredictorParams::Normal { mu, sigma } => {
            let vs = vech_unchecked(&symmetrize(sigma));
            Vector::from_iterator(mu.len() + vs.len(), mu.iter().chain(vs.iter()).copied())
        }
        PredictorParams::Bernoulli { pi, .. } => Vector::from_element(1, *pi),
    }
}

/// `h(φ) = (vec β, vech Σ, ρ)` of a fit.
pub fn h_vector(fit: &EnvelopeFit) -> Vector {
    let vb = vec(&fit.beta);
    let vs = vech_unchecked(&symmetrize(&fit.sigma));
    let rho = rho_vector(&fit.predictor);
    Vector::from_iterator(vb.len() + vs.len() + rho.len(), vb.iter().chain(vs.iter()).chain(rho.iter()).copied())
}

/// Bootstrap covariance of `h(φ̂)` under the standard EM estimator.
pub fn bootstrap_h_covariance<R: Runner>(
    ds: &ObservedDataset,
    opts: &EmOptions,
    reps: usize,
    seed: u64,
    runner: &R,
) -> Result<Mat> {
    let fits = replicate_fits(ds, opts, Estimator::EmStandard, reps, seed, runner);
    let hs: Vec<Vector> = fits.iter().flatten().map(h_vector).collect();
    if hs.len() < 2 {
        return Err(Error::AllReplicatesFailed);
    }
    let d = hs[0].len();
    let mean = hs.iter().fold(Vector::zeros(d), |acc, h| acc + h) / hs.len() as f64;
    let mut cov = Mat::zeros(d, d);
    for h in &hs {
        let z = h - &mean;
        cov.ger(1.0, &z, &z, 1.0);
    }
    Ok(symmetrize(&(cov / (hs.len() - 1) as f64)))
}

/// Jacobian of `h` with respect to `(vec η, vec Γ, vech Ω, vech Ω0, ρ)`.
pub fn construct_g(eta: &Mat, gamma: &Mat, gamma0: &Mat, omega: &Mat, omega0: &Mat, dim_rho: usize) -> Result<Mat> {
    let (r, u) = gamma.shape();
    let p = eta.ncols();
    let ru = r - u;
    if eta.nrows() != u || gamma0.shape() != (r, ru) || omega.shape() != (u, u) || omega0.shape() != (ru, ru) {
        return Err(Error::ShapeMismatch(format!(
            "G needs η u×p, Γ0 r×(r−u), Ω u×u, Ω0 (r−u)×(r−u) with r={r}, u={u}"
        )));
    }
    let hr = r * (r + 1) / 2;
    let hu = u * (u + 1) / 2;
    let h0 = ru * (ru + 1) / 2;
    let rows = r * p + hr + dim_rho;
    let cols = u * p + r * u + hu + h0 + dim_rho;
    let mut g = Mat::zeros(rows, cols);
    let ir = Mat::identity(r, r);
    let cr = contraction_matrix(r);

    g.view_mut((0, 0), (r * p, u * p)).copy_from(&kron(&Mat::identity(p, p), gamma));
    g.view_mut((0, u * p), (r * p, r * u)).copy_from(&kron(&eta.transpose(), &ir));

    let s0 = gamma0 * omega0 * gamma0.transpose();
    let d_gamma = (kron(&(gamma * omega), &ir) - kron(gamma, &s0)) * 2.0;
    g.view_mut((r * p, u * p), (hr, r * u)).copy_from(&(&cr * d_gamma));
    if u > 0 {
        let d_omega = &cr * kron(gamma, gamma) * expansion_matrix(u);
        g.view_mut((r * p, u * p + r * u), (hr, hu)).copy_from(&d_omega);
    }
    if ru > 0 {
        let d_omega0 = &cr * kron(gamma0, gamma0) * expansion_matrix(ru);
        g.view_mut((r * p, u * p + r * u + hu), (hr, h0)).copy_from(&d_omega0);
    }
    g.view_mut((r * p + hr, u * p + r * u + hu + h0), (dim_rho, dim_rho))
        .copy_from(&Mat::identity(dim_rho, dim_rho));
    Ok(g)
}

/// `V_env = G(GᵀV⁻¹G)⁺Gᵀ`.
pub fn project_covariance(g: &Mat, v_std: &Mat) -> Result<Mat> {
    if v_std.nrows() != g.nrows() || !v_std.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "V is {}x{} but G has {} rows",
            v_std.nrows(),
            v_std.ncols(),
            g.nrows()
        )));
    }
    let v_inv = spd_inverse(v_std).ok_or(Error::NotPd)?;
    let w = symmetrize(&(g.transpose() * &v_inv * g));
    Ok(symmetrize(&(g * pinv(&w) * g.transpose())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::mse;
    use crate::estep::PredictorModel;
    use crate::linalg::{orth_complete, qr_orthonormalize, unvech};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn rand_pd(rng: &mut ChaCha8Rng, d: usize) -> Mat {
        let a = normal_mat(rng, d, d);
        &a * a.transpose() + Mat::identity(d, d) * 0.1
    }

    struct EnvParams {
        eta: Mat,
        gamma: Mat,
        gamma0: Mat,
        omega: Mat,
        omega0: Mat,
        rho: Vector,
    }

    fn rand_env(rng: &mut ChaCha8Rng, r: usize, u: usize, p: usize, dim_rho: usize) -> EnvParams {
        let gamma = qr_orthonormalize(&normal_mat(rng, r, u)).unwrap();
        let gamma0 = orth_complete(&gamma).unwrap();
        EnvParams {
            eta: normal_mat(rng, u, p),
            gamma,
            gamma0,
            omega: rand_pd(rng, u),
            omega0: rand_pd(rng, r - u),
            rho: Vector::from_fn(dim_rho, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    fn h_of(eta: &Mat, g: &Mat, g0: &Mat, om: &Mat, om0: &Mat, rho: &Vector) -> Vector {
        let beta = g * eta;
        let sigma = g * om * g.transpose() + g0 * om0 * g0.transpose();
        let vb = vec(&beta);
        let vs = vech_unchecked(&symmetrize(&sigma));
        Vector::from_iterator(vb.len() + vs.len() + rho.len(), vb.iter().chain(vs.iter()).chain(rho.iter()).copied())
    }

    /// Central differences of `h`, moving `Γ0` with `Γ` to stay orthogonal to first order.
    fn fd_jacobian(e: &EnvParams) -> Mat {
        let (r, u) = e.gamma.shape();
        let p = e.eta.ncols();
        let ru = r - u;
        let (hu, h0) = (u * (u + 1) / 2, ru * (ru + 1) / 2);
        let cols = u * p + r * u + hu + h0 + e.rho.len();
        let base = h_of(&e.eta, &e.gamma, &e.gamma0, &e.omega, &e.omega0, &e.rho);
        let mut jac = Mat::zeros(base.len(), cols);
        let step = 1e-6;
        for c in 0..cols {
            let eval = |t: f64| {
                let mut eta = e.eta.clone();
                let mut g = e.gamma.clone();
                let mut g0 = e.gamma0.clone();
                let mut om = e.omega.clone();
                let mut om0 = e.omega0.clone();
                let mut rho = e.rho.clone();
                let mut k = c;
                if k < u * p {
                    eta[(k % u, k / u)] += t;
                } else if {
                    k -= u * p;
                    k < r * u
                } {
                    let mut dir = Mat::zeros(r, u);
                    dir[(k % r, k / r)] = 1.0;
                    g += &dir * t;
                    g0 -= &e.gamma * dir.transpose() * &e.gamma0 * t;
                } else if {
                    k -= r * u;
                    k < hu
                } {
                    let mut v = Vector::zeros(hu);
                    v[k] = 1.0;
                    om += unvech(&v, u).unwrap() * t;
                } else if {
                    k -= hu;
                    k < h0
                } {
                    let mut v = Vector::zeros(h0);
                    v[k] = 1.0;
                    om0 += unvech(&v, ru).unwrap() * t;
                } else {
                    rho[k - h0] += t;
                }
                h_of(&eta, &g, &g0, &om, &om0, &rho)
            };
            let d = (eval(step) - eval(-step)) / (2.0 * step);
            jac.set_column(c, &d);
        }
        jac
    }

    #[test]
    fn g_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(r, u, p, dr) in &[(2usize, 1usize, 1usize, 1usize), (3, 1, 2, 2), (4, 2, 1, 1), (3, 3, 1, 0), (3, 0, 2, 1)] {
            let e = rand_env(&mut rng, r, u, p, dr);
            let g = construct_g(&e.eta, &e.gamma, &e.gamma0, &e.omega, &e.omega0, dr).unwrap();
            let fd = fd_jacobian(&e);
            assert_eq!(g.shape(), fd.shape());
            assert!((&g - &fd).amax() < 1e-4, "r={r} u={u}: {}", (&g - &fd).amax());
        }
    }

    #[test]
    fn g_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = rand_env(&mut rng, 3, 3, 2, 1);
        let g = construct_g(&e.eta, &e.gamma, &e.gamma0, &e.omega, &e.omega0, 1).unwrap();
        assert_eq!(g.view((0, 0), (6, 6)).into_owned(), kron(&Mat::identity(2, 2), &e.gamma));
        let e = rand_env(&mut rng, 3, 1, 2, 1);
        let g = construct_g(&Mat::zeros(1, 2), &e.gamma, &e.gamma0, &e.omega, &e.omega0, 1).unwrap();
        assert_eq!(g.view((0, 2), (6, 3)).into_owned(), Mat::zeros(6, 3));
        assert!(matches!(
            construct_g(&Mat::zeros(2, 2), &e.gamma, &e.gamma0, &e.omega, &e.omega0, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_pd(&mut rng, 4);
        let g = normal_mat(&mut rng, 4, 4);
        assert!((project_covariance(&g, &v).unwrap() - &v).amax() < 1e-9 * v.amax());
        let g1 = normal_mat(&mut rng, 4, 1);
        let ve = project_covariance(&g1, &v).unwrap();
        let eig = ve.symmetric_eigen();
        let big = eig.eigenvalues.iter().filter(|&&l| l > 1e-10 * eig.eigenvalues.amax()).count();
        assert_eq!(big, 1);
        assert_eq!(project_covariance(&g1, &Mat::zeros(4, 4)), Err(Error::NotPd));
    }

    #[test]
    fn bootstrap_se_zero_for_noiseless_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = normal_mat(&mut rng, 30, 1);
        let beta = Mat::from_column_slice(2, 1, &[1.5, -2.0]);
        let y = &x * beta.transpose();
        let ds = ObservedDataset::complete(x, y).unwrap();
        let res = bootstrap_se(&ds, &EmOptions::new(2, PredictorModel::Normal), Estimator::EmStandard, 20, 1).unwrap();
        assert!(res.se.amax() < 1e-8);
        assert!(res.ci_lower.iter().zip(res.ci_upper.iter()).all(|(a, b)| a <= b));
        assert!(res.p_value.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    fn small_dataset(seed: u64, beta: &Mat) -> ObservedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 80;
        let mut x = normal_mat(&mut rng, n, 1);
        let mut y = &x * beta.transpose() + normal_mat(&mut rng, n, 2);
        for i in 0..n {
            if rng.random_bool(0.1) {
                x[(i, 0)] = f64::NAN;
            } else if rng.random_bool(0.1) {
                y[(i, 1)] = f64::NAN;
            }
        }
        ObservedDataset::from_nan_masked(x, y).unwrap()
    }

    #[test]
    fn bootstrap_se_close_to_monte_carlo_sd() {
        let beta = Mat::from_column_slice(2, 1, &[1.0, 0.5]);
        let mut opts = EmOptions::new(2, PredictorModel::Normal);
        opts.track_loglik = false;
        let mc: Vec<Mat> = (0..200)
            .map(|s| em_standard_fit(&small_dataset(1000 + s, &beta), &opts).unwrap().beta)
            .collect();
        let ds = small_dataset(7, &beta);
        let res = bootstrap_se(&ds, &opts, Estimator::EmStandard, 200, 3).unwrap();
        for i in 0..2 {
            let v: Vec<f64> = mc.iter().map(|b| b[(i, 0)]).collect();
            let sd = sample_sd(&v);
            assert!((res.se[(i, 0)] - sd).abs() < 0.3 * sd, "row {i}: boot {} mc {sd}", res.se[(i, 0)]);
        }
        assert!(!res.unreliable);
        assert_eq!(res, bootstrap_se(&ds, &opts, Estimator::EmStandard, 200, 3).unwrap());
        assert!(mse(&res.estimate, &beta) < 0.1);
    }

    #[test]
    fn envelope_se_smaller_when_immaterial_variation_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100;
        let g = qr_orthonormalize(&Mat::from_column_slice(2, 1, &[1.0, 1.0])).unwrap();
        let g0 = orth_complete(&g).unwrap();
        let x = Mat::from_fn(n, 1, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
        let e = normal_mat(&mut rng, n, 1) * 0.2 * g.transpose() + normal_mat(&mut rng, n, 1) * 3.0 * g0.transpose();
        let mut y = &x * (&g * 0.5).transpose() + e;
        for i in (0..n).step_by(9) {
            y[(i, 1)] = f64::NAN;
        }
        let ds = ObservedDataset::from_nan_masked(x, y).unwrap();
        let env = bootstrap_se(&ds, &EmOptions::new(1, PredictorModel::Normal), Estimator::EmEnvelope, 100, 2).unwrap();
        let std = bootstrap_se(&ds, &EmOptions::new(1, PredictorModel::Normal), Estimator::EmStandard, 100, 2).unwrap();
        assert!(env.se.amax() * 2.0 < std.se.amax());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn projected_covariance_never_exceeds_v(seed in any::<u64>(), u in 0usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = rand_env(&mut rng, 3, u, 2, 1);
            let g = construct_g(&e.eta, &e.gamma, &e.gamma0, &e.omega, &e.omega0, 1).unwrap();
            let v = rand_pd(&mut rng, g.nrows());
            let diff = symmetrize(&(&v - project_covariance(&g, &v).unwrap()));
            let eig = diff.symmetric_eigen();
            let top = v.clone().symmetric_eigen().eigenvalues.amax();
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-8 * top));
        }

        #[test]
        fn projection_depends_only_on_span(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = normal_mat(&mut rng, 5, 3);
            let t = normal_mat(&mut rng, 3, 3) + Mat::identity(3, 3) * 3.0;
            let v = rand_pd(&mut rng, 5);
            let a = project_covariance(&g, &v).unwrap();
            let b = project_covariance(&(&g * t), &v).unwrap();
            prop_assert!((a - b).amax() < 1e-8 * v.amax());
        }
    }
}
