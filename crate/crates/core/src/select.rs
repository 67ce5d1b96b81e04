//! Choice of the envelope dimension `u`.

use alloc::vec::Vec;

use rand::Rng;

use crate::data::ObservedDataset;
use crate::em::{em_envelope_fit, EmOptions, EnvelopeFit};
use crate::linalg::q2_corr;
use crate::runner::{derive_seed, rng_from_seed, Runner, Serial};
use crate::Result;

/// `−2Q + p·u·log n`.
pub fn bic_from_q(q_value: f64, n: usize, p: usize, u: usize) -> f64 {
    -2.0 * q_value + (p * u) as f64 * libm::log(n as f64)
}

/// BIC_Q of a fitted model.
pub fn bic_q(fit: &EnvelopeFit) -> f64 {
    bic_from_q(fit.q_value, fit.n, fit.p(), fit.u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    BicQ,
    Bootstrap,
}

/// Mean q² between the original-data basis and the resample bases for one `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCandidate {
    pub u: usize,
    pub mean_q2: f64,
    pub reps_used: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub chosen_u: usize,
    pub method: SelectionMethod,
    /// BIC_Q for `u = 0..=r`; empty when the bootstrap path chose without it.
    pub criterion: Vec<f64>,
    /// Candidates examined by the bootstrap path, in the order examined.
    pub candidates: Vec<BootstrapCandidate>,
    /// True when no bootstrap candidate passed and BIC_Q decided.
    pub fell_back_to_bic: bool,
    pub threshold: f64,
    pub reps: usize,
}

/// Fits `u = 0..=r` and returns the BIC_Q argmin, ties to the smaller `u`.
pub fn select_u_bic_with<R: Runner>(ds: &ObservedDataset, opts: &EmOptions, runner: &R) -> Result<SelectionReport> {
    let r = ds.r();
    let fits = runner.run(r + 1, |u| {
        let mut o = opts.clone();
        o.u = u;
        o.track_loglik = false;
        em_envelope_fit(ds, &o)
    });
    let mut criterion = Vec::with_capacity(r + 1);
    for f in fits {
        criterion.push(bic_q(&f?));
    }
    Ok(SelectionReport {
        chosen_u: argmin_first(&criterion),
        method: SelectionMethod::BicQ,
        criterion,
        candidates: Vec::new(),
        fell_back_to_bic: false,
        threshold: f64::NAN,
        reps: 0,
    })
}

pub fn select_u_bic(ds: &ObservedDataset, opts: &EmOptions) -> Result<SelectionReport> {
    select_u_bic_with(ds, opts, &Serial)
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        // NaN never wins
        if x < v[best] || v[best].is_nan() && !x.is_nan() {
            best = i;
        }
    }
    best
}

/// Row indices of `b` case resamples; resample `j` draws from stream `j` of `seed`.
pub fn resample_indices(n: usize, b: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..b)
        .map(|j| {
            let mut rng = rng_from_seed(derive_seed(seed, j as u64));
            (0..n).map(|_| rng.random_range(0..n)).collect()
        })
        .collect()
}

/// Largest `u` in `r−1, …, 1` whose mean bootstrap q² exceeds `threshold`;
/// BIC_Q decides when none does.
pub fn select_u_bootstrap_with<R: Runner>(
    ds: &ObservedDataset,
    opts: &EmOptions,
    b: usize,
    threshold: f64,
    seed: u64,
    runner: &R,
) -> Result<SelectionReport> {
    if b == 0 {
        return Err(crate::Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    let r = ds.r();
    let resamples = resample_indices(ds.n(), b, seed);
    let mut candidates = Vec::new();
    for u in (1..r).rev() {
        let mut o = opts.clone();
        o.u = u;
        o.track_loglik = false;
        let base = em_envelope_fit(ds, &o)?;
        let q2s = runner.run(b, |j| -> Option<f64> {
            let boot = ds.select_rows(&resamples[j]).ok()?;
            let fit = em_envelope_fit(&boot, &o).ok()?;
            if !fit.converged {
                return None;
            }
            q2_corr(&base.gamma, &fit.gamma).ok()
        });
        let ok: Vec<f64> = q2s.iter().flatten().copied().collect();
        let cand = BootstrapCandidate {
            u,
            mean_q2: crate::stats::mean(&ok),
            reps_used: ok.len(),
            failures: b - ok.len(),
        };
        let pass = cand.mean_q2 > threshold;
        candidates.push(cand);
        if pass {
            return Ok(SelectionReport {
                chosen_u: u,
                method: SelectionMethod::Bootstrap,
                criterion: Vec::new(),
                candidates,
                fell_back_to_bic: false,
                threshold,
                reps: b,
            });
        }
    }
    let bic = select_u_bic_with(ds, opts, runner)?;
    Ok(SelectionReport {
        chosen_u: bic.chosen_u,
        method: SelectionMethod::Bootstrap,
        criterion: bic.criterion,
        candidates,
        fell_back_to_bic: true,
        threshold,
        reps: b,
    })
}

pub fn select_u_bootstrap(
    ds: &ObservedDataset,
    opts: &EmOptions,
    b: usize,
    threshold: f64,
    seed: u64,
) -> Result<SelectionReport> {
    select_u_bootstrap_with(ds, opts, b, threshold, seed, &Serial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::full_data_fit;
    use crate::estep::PredictorModel;
    use crate::linalg::{orth_complete, qr_orthonormalize, Mat};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn envelope_sample(seed: u64, n: usize, p: usize, r: usize, u: usize, material: f64, immaterial: f64) -> ObservedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = qr_orthonormalize(&normal_mat(&mut rng, r, u)).unwrap();
        let g0 = orth_complete(&g).unwrap();
        let beta = &g * normal_mat(&mut rng, u, p) * 3.0;
        let x = normal_mat(&mut rng, n, p);
        let e = normal_mat(&mut rng, n, u) * material * g.transpose()
            + normal_mat(&mut rng, n, r - u) * immaterial * g0.transpose();
        let mut y = &x * beta.transpose() + e;
        for i in 0..n {
            if i % 7 == 0 {
                y[(i, (i / 7) % r)] = f64::NAN;
            }
        }
        ObservedDataset::from_nan_masked(x, y).unwrap()
    }

    #[test]
    fn bic_arithmetic() {
        let v = bic_from_q(-100.0, 100, 2, 1);
        assert!((v - 209.21034037197618).abs() < 1e-9);
        assert_eq!(bic_from_q(-100.0, 100, 2, 0), 200.0);
    }

    #[test]
    fn complete_data_bic_uses_full_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = normal_mat(&mut rng, 30, 2);
        let y = normal_mat(&mut rng, 30, 3) + &x * normal_mat(&mut rng, 3, 2).transpose();
        let fit = full_data_fit(&x, &y, 1, PredictorModel::Normal).unwrap();
        // independent full log-likelihood: X ~ N(μ̂, Σ̂x), Y|X ~ N(β̂X, Σ̂)
        let (mu, sx) = match &fit.predictor {
            crate::estep::PredictorParams::Normal { mu, sigma } => (mu.clone(), sigma.clone()),
            _ => unreachable!(),
        };
        let two_pi = 2.0 * core::f64::consts::PI;
        let mut ll = 0.0;
        let si = fit.sigma.clone().try_inverse().unwrap();
        let sxi = sx.clone().try_inverse().unwrap();
        for i in 0..30 {
            let xi = x.row(i).transpose();
            let yi = y.row(i).transpose();
            let ry = &yi - &fit.beta * &xi;
            let rx = &xi - &mu;
            ll += -0.5 * (3.0 * two_pi.ln() + fit.sigma.determinant().ln() + ry.dot(&(&si * &ry)));
            ll += -0.5 * (2.0 * two_pi.ln() + sx.determinant().ln() + rx.dot(&(&sxi * &rx)));
        }
        assert!((fit.q_value - ll).abs() < 1e-8 * ll.abs());
        assert!((bic_q(&fit) - (-2.0 * ll + 2.0 * 30f64.ln())).abs() < 1e-7 * ll.abs());
    }

    #[test]
    fn bic_selects_true_u_on_nearly_noiseless_material_part() {
        for seed in 0..3 {
            let ds = envelope_sample(seed, 200, 2, 5, 2, 1e-3, 1.0);
            let rep = select_u_bic(&ds, &EmOptions::new(0, PredictorModel::Normal)).unwrap();
            assert_eq!(rep.chosen_u, 2, "{:?}", rep.criterion);
            assert_eq!(rep.criterion.len(), 6);
        }
    }

    #[test]
    fn bootstrap_agrees_with_bic_for_separated_spectra() {
        let ds = envelope_sample(11, 300, 2, 5, 2, 0.3, 30.0);
        let opts = EmOptions::new(0, PredictorModel::Normal);
        let bic = select_u_bic(&ds, &opts).unwrap();
        let boot = select_u_bootstrap(&ds, &opts, 10, 0.95, 5).unwrap();
        assert_eq!(bic.chosen_u, 2);
        assert_eq!(boot.chosen_u, bic.chosen_u);
        let again = select_u_bootstrap(&ds, &opts, 10, 0.95, 5).unwrap();
        assert_eq!(boot, again);
    }

    #[test]
    fn resamples_depend_only_on_seed_and_index() {
        let a = resample_indices(50, 4, 9);
        let b = resample_indices(50, 6, 9);
        assert_eq!(a[..], b[..4]);
        assert!(a.iter().all(|v| v.len() == 50 && v.iter().all(|&i| i < 50)));
    }

    #[test]
    fn ties_go_to_smaller_u() {
        assert_eq!(argmin_first(&[3.0, 1.0, 1.0, 2.0]), 1);
        assert_eq!(argmin_first(&[f64::NAN, 2.0, 1.0]), 2);
    }

    proptest! {
        #[test]
        fn penalty_increases_with_u(q in -1e6f64..1e6, n in 2usize..10_000, p in 1usize..10, u in 0usize..20) {
            prop_assert!(bic_from_q(q, n, p, u + 1) > bic_from_q(q, n, p, u));
        }
    }
}
