//! Envelope M-step: estimate `span(Γ)` with the 1-D algorithm, then update
//! `β`, `Σ1`, `Σ2` given `Γ`.

use alloc::vec::Vec;

use crate::estep::MomentAccumulators;
use crate::linalg::{
    log_det0_sym, orth_complete, qr_orthonormalize, spd_inverse, symmetrize, Mat, SymEig, Vector, DET0_REL_TOL,
};
use crate::{Error, Result};

/// `Γ` (r × u) and its orthogonal completion `Γ0` (r × (r − u)).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeBasis {
    pub gamma: Mat,
    pub gamma0: Mat,
}

impl EnvelopeBasis {
    pub fn from_gamma(gamma: Mat) -> Result<Self> {
        let gamma0 = orth_complete(&gamma)?;
        Ok(EnvelopeBasis { gamma, gamma0 })
    }

    /// `u = r`: `Γ = I`.
    pub fn full(r: usize) -> Self {
        EnvelopeBasis { gamma: Mat::identity(r, r), gamma0: Mat::zeros(r, 0) }
    }

    /// `u = 0`: `Γ` empty.
    pub fn empty(r: usize) -> Self {
        EnvelopeBasis { gamma: Mat::zeros(r, 0), gamma0: Mat::identity(r, r) }
    }

    pub fn u(&self) -> usize {
        self.gamma.ncols()
    }
    pub fn r(&self) -> usize {
        self.gamma.nrows()
    }
}

/// Parameters produced by one envelope M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepResult {
    pub beta: Mat,
    pub sigma1: Mat,
    pub sigma2: Mat,
    pub sigma: Mat,
    pub eta: Mat,
    pub omega: Mat,
    pub omega0: Mat,
}

/// `log det0{P_Γ M P_Γ + Q_Γ A1 Q_Γ}` with `M = A1 − A2A3⁻¹A2ᵀ`.
pub fn envelope_objective(gamma: &Mat, acc: &MomentAccumulators) -> Result<f64> {
    crate::linalg::check_semi_orthonormal(gamma)?;
    let m = acc.residual()?;
    Ok(objective_with(gamma, &m, &acc.a1))
}

fn objective_with(gamma: &Mat, m: &Mat, a1: &Mat) -> f64 {
    let r = gamma.nrows();
    let p = gamma * gamma.transpose();
    let q = Mat::identity(r, r) - &p;
    let s = symmetrize(&(&p * m * &p + &q * a1 * &q));
    log_det0_sym(s, DET0_REL_TOL)
}

const MAX_ITER: usize = 200;
const MIN_DECREASE: f64 = 1e-10;

/// `D(w) = log(wᵀMw) + log(wᵀNw)` on the unit sphere.
struct StepObjective<'a> {
    m: &'a Mat,
    n: &'a Mat,
}

impl StepObjective<'_> {
    fn value(&self, w: &Vector) -> f64 {
        let a = w.dot(&(self.m * w)).max(f64::MIN_POSITIVE);
        let b = w.dot(&(self.n * w)).max(f64::MIN_POSITIVE);
        libm::log(a) + libm::log(b)
    }

    /// Gradient projected onto the tangent space at `w`.
    fn tangent_grad(&self, w: &Vector) -> Vector {
        let mw = self.m * w;
        let nw = self.n * w;
        let a = w.dot(&mw).max(f64::MIN_POSITIVE);
        let b = w.dot(&nw).max(f64::MIN_POSITIVE);
        let g = mw * (2.0 / a) + nw * (2.0 / b);
        let radial = w.dot(&g);
        g - w * radial
    }

    fn minimize(&self) -> Vector {
        let dim = self.m.nrows();
        let mut best: Option<(f64, Vector)> = None;
        for src in [self.m, self.n] {
            let eig = SymEig::of_symmetric(src.clone());
            for v in eig.vectors.column_iter() {
                let v = v.into_owned();
                let f = self.value(&v);
                if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                    best = Some((f, v));
                }
            }
        }
        let (mut f, mut w) = best.unwrap_or((0.0, Vector::zeros(dim)));
        if dim <= 1 {
            return w;
        }
        let mut g = self.tangent_grad(&w);
        let mut step = 1.0 / g.norm().max(1e-300);
        for _ in 0..MAX_ITER {
            let gg = g.norm_squared();
            if gg <= 1e-28 {
                break;
            }
            let mut t = step;
            let mut accepted = None;
            for _ in 0..60 {
                let cand = (&w - &g * t).normalize();
                let fc = self.value(&cand);
                if fc <= f - 1e-4 * t * gg {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            let Some((w_new, f_new)) = accepted else { break };
            let g_new = self.tangent_grad(&w_new);
            let s = &w_new - &w;
            let yv = &g_new - &g;
            let sy = s.dot(&yv);
            step = if sy > 0.0 { s.norm_squared() / sy } else { 2.0 * t };
            let decrease = f - f_new;
            w = w_new;
            f = f_new;
            g = g_new;
            if decrease < MIN_DECREASE {
                break;
            }
        }
        w
    }
}

/// Greedy one-direction-at-a-time estimate of `span(Γ)`.
pub fn one_d_algorithm(acc: &MomentAccumulators, u: usize) -> Result<EnvelopeBasis> {
    let r = acc.r();
    if u > r {
        return Err(Error::InvalidArgument(alloc::format!("u = {u} exceeds r = {r}")));
    }
    let m = acc.residual()?;
    if u == 0 {
        return Ok(EnvelopeBasis::empty(r));
    }
    if u == r {
        return Ok(EnvelopeBasis::full(r));
    }
    let a1 = &acc.a1;
    let mut dirs: Vec<Vector> = Vec::with_capacity(u);
    for k in 0..u {
        let g0 = if k == 0 { Mat::identity(r, r) } else { orth_complete(&Mat::from_columns(&dirs))? };
        let mk = symmetrize(&(g0.transpose() * &m * &g0));
        let total = symmetrize(&(g0.transpose() * a1 * &g0));
        let nk = spd_inverse(&total).ok_or(Error::SingularMkPlusUk(k))?;
        if nk.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMkPlusUk(k));
        }
        let w = StepObjective { m: &mk, n: &nk }.minimize();
        let mut gk = &g0 * w;
        // keep the running basis exactly orthonormal
        for d in &dirs {
            let c = d.dot(&gk);
            gk.axpy(-c, d, 1.0);
        }
        let nrm = gk.norm();
        if nrm == 0.0 {
            return Err(Error::RankDeficient);
        }
        dirs.push(gk / nrm);
    }
    let gamma = qr_orthonormalize(&Mat::from_columns(&dirs))?;
    EnvelopeBasis::from_gamma(gamma)
}

/// Closed-form `β`, `Σ1`, `Σ2` given the envelope basis.
pub fn mstep_given_gamma(basis: &EnvelopeBasis, acc: &MomentAccumulators, n: usize) -> Result<MStepResult> {
    if basis.r() != acc.r() {
        return Err(Error::ShapeMismatch("basis and accumulators disagree on r".into()));
    }
    let nf = n as f64;
    let (_, beta_std) = acc.regression()?;
    let m = symmetrize(&(&acc.a1 - &beta_std * acc.a2.transpose()));
    let g = &basis.gamma;
    let g0 = &basis.gamma0;
    let omega = symmetrize(&(g.transpose() * &m * g / nf));
    let omega0 = symmetrize(&(g0.transpose() * &acc.a1 * g0 / nf));
    let eta = g.transpose() * &beta_std;
    let beta = g * &eta;
    let sigma1 = symmetrize(&(g * &omega * g.transpose()));
    let sigma2 = symmetrize(&(g0 * &omega0 * g0.transpose()));
    let sigma = &sigma1 + &sigma2;
    Ok(MStepResult { beta, sigma1, sigma2, sigma, eta, omega, omega0 })
}
