//! The EM envelope iteration and the baseline estimators it is compared with.

use alloc::format;
use alloc::vec::Vec;

use crate::data::ObservedDataset;
use crate::envelope::{envelope_objective, mstep_given_gamma, one_d_algorithm, EnvelopeBasis, MStepResult};
use crate::estep::{expected_complete_loglik, EStep, MomentAccumulators, ModelParams, PredictorModel, PredictorParams};
use crate::linalg::{symmetrize, Mat, Vector};
use crate::{Error, Result};

/// Starting point of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// `β = 0`, `Σ = I`, `μx = 0`, `Σx = I`, `π = 1/2`.
    #[default]
    Cold,
    /// Moments of the complete rows when at least ten exist, otherwise cold.
    WarmStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    /// Stop once `‖β_{t+1} − β_t‖₁ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub u: usize,
    pub model: PredictorModel,
    pub init: Init,
    /// Explicit starting parameters; overrides `init`.
    pub start: Option<ModelParams>,
    /// Record the observed-data log-likelihood at every iterate.
    pub track_loglik: bool,
}

impl EmOptions {
    pub fn new(u: usize, model: PredictorModel) -> Self {
        EmOptions { tol: 1e-6, max_iter: 500, u, model, init: Init::Cold, start: None, track_loglik: true }
    }
}

/// A fitted envelope (or, with `u = r`, unconstrained) regression.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeFit {
    pub beta: Mat,
    pub sigma: Mat,
    pub sigma1: Mat,
    pub sigma2: Mat,
    pub gamma: Mat,
    pub gamma0: Mat,
    pub eta: Mat,
    pub omega: Mat,
    pub omega0: Mat,
    pub predictor: PredictorParams,
    pub u: usize,
    pub n: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood at each iterate, starting from the initial values.
    pub loglik_trace: Vec<f64>,
    /// `‖β_{t+1} − β_t‖₁` per iteration.
    pub beta_trace_norm: Vec<f64>,
    /// `Q(φ̂ | φ̂)` at the returned parameters.
    pub q_value: f64,
}

impl EnvelopeFit {
    pub fn p(&self) -> usize {
        self.beta.ncols()
    }
    pub fn r(&self) -> usize {
        self.beta.nrows()
    }
    pub fn is_standard(&self) -> bool {
        self.u == self.r()
    }

    pub fn params(&self) -> ModelParams {
        ModelParams { beta: self.beta.clone(), sigma: self.sigma.clone(), predictor: self.predictor.clone() }
    }

    pub fn basis(&self) -> EnvelopeBasis {
        EnvelopeBasis { gamma: self.gamma.clone(), gamma0: self.gamma0.clone() }
    }
}

fn check_model(ds: &ObservedDataset, opts: &EmOptions) -> Result<()> {
    if opts.u > ds.r() {
        return Err(Error::InvalidArgument(format!("u = {} exceeds r = {}", opts.u, ds.r())));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    if let PredictorModel::Bernoulli { scale } = opts.model {
        if ds.p() != 1 {
            return Err(Error::InvalidArgument("the two-point model needs exactly one predictor".into()));
        }
        if !(scale.is_finite() && scale != 0.0) {
            return Err(Error::InvalidArgument("the two-point scale must be finite and nonzero".into()));
        }
    }
    Ok(())
}

fn update_predictor(model: PredictorModel, acc: &MomentAccumulators, n: usize) -> PredictorParams {
    let nf = n as f64;
    match model {
        PredictorModel::Normal => {
            let mu = &acc.a4 / nf;
            let sigma = symmetrize(&(&acc.a3 / nf - &mu * mu.transpose()));
            PredictorParams::Normal { mu, sigma }
        }
        PredictorModel::Bernoulli { scale } => {
            PredictorParams::Bernoulli { pi: (acc.a4[0] / (scale * nf)).clamp(0.0, 1.0), scale }
        }
    }
}

fn warm_start(ds: &ObservedDataset, model: PredictorModel) -> Option<ModelParams> {
    let rows = ds.complete_rows();
    if rows.len() < 10 || rows.len() <= ds.p() + 1 {
        return None;
    }
    let cc = ds.select_rows(&rows).ok()?;
    let acc = MomentAccumulators::from_complete(cc.x(), cc.y());
    let n = rows.len();
    let (_, beta) = acc.regression().ok()?;
    let sigma = symmetrize(&(&acc.a1 - &beta * acc.a2.transpose())) / n as f64;
    sigma.clone().cholesky()?;
    let predictor = match update_predictor(model, &acc, n) {
        PredictorParams::Normal { mu, sigma } => {
            sigma.clone().cholesky()?;
            PredictorParams::Normal { mu, sigma }
        }
        PredictorParams::Bernoulli { pi, scale } => PredictorParams::Bernoulli { pi: pi.clamp(0.01, 0.99), scale },
    };
    Some(ModelParams { beta, sigma, predictor })
}

fn initial_params(ds: &ObservedDataset, opts: &EmOptions) -> Result<ModelParams> {
    if let Some(start) = &opts.start {
        if start.beta.shape() != (ds.r(), ds.p()) || start.sigma.shape() != (ds.r(), ds.r()) {
            return Err(Error::ShapeMismatch("starting values do not match the dataset".into()));
        }
        return Ok(start.clone());
    }
    let cold = ModelParams::initial(opts.model, ds.p(), ds.r());
    Ok(match opts.init {
        Init::Cold => cold,
        Init::WarmStart => warm_start(ds, opts.model).unwrap_or(cold),
    })
}

fn assemble(m: MStepResult, basis: EnvelopeBasis, predictor: PredictorParams, u: usize, n: usize) -> EnvelopeFit {
    EnvelopeFit {
        beta: m.beta,
        sigma: m.sigma,
        sigma1: m.sigma1,
        sigma2: m.sigma2,
        gamma: basis.gamma,
        gamma0: basis.gamma0,
        eta: m.eta,
        omega: m.omega,
        omega0: m.omega0,
        predictor,
        u,
        n,
        iterations: 0,
        converged: false,
        loglik_trace: Vec::new(),
        beta_trace_norm: Vec::new(),
        q_value: f64::NAN,
    }
}

fn estimate_basis(acc: &MomentAccumulators, u: usize) -> Result<EnvelopeBasis> {
    if u == acc.r() {
        Ok(EnvelopeBasis::full(u))
    } else {
        one_d_algorithm(acc, u)
    }
}

/// Alternates E-step, 1-D estimate of `Γ`, envelope M-step and predictor
/// update until `β` stops moving.
///
/// If the previous iterate's `Γ` scores better than the new 1-D estimate on
/// the current accumulators, the previous one is kept.
pub fn em_envelope_fit(ds: &ObservedDataset, opts: &EmOptions) -> Result<EnvelopeFit> {
    check_model(ds, opts)?;
    let n = ds.n();
    let u = opts.u;
    let estep = EStep::new(ds);
    let mut params = initial_params(ds, opts)?;
    let mut basis_prev: Option<EnvelopeBasis> = None;
    let mut loglik_trace = Vec::new();
    let mut beta_trace_norm = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last: Option<(MStepResult, EnvelopeBasis)> = None;

    while iterations < opts.max_iter {
        if opts.track_loglik {
            loglik_trace.push(estep.observed_loglik(&params)?);
        }
        let acc = estep.accumulate(&params)?;
        let mut basis = estimate_basis(&acc, u)?;
        if let Some(prev) = basis_prev.take() {
            if 0 < u && u < ds.r() && envelope_objective(&prev.gamma, &acc)? < envelope_objective(&basis.gamma, &acc)? {
                basis = prev;
            }
        }
        let m = mstep_given_gamma(&basis, &acc, n)?;
        let predictor = update_predictor(opts.model, &acc, n);
        let delta: f64 = (&m.beta - &params.beta).iter().map(|v| v.abs()).sum();
        if !delta.is_finite() {
            return Err(Error::NonFinite("EM iterate"));
        }
        beta_trace_norm.push(delta);
        params = ModelParams { beta: m.beta.clone(), sigma: m.sigma.clone(), predictor };
        basis_prev = Some(basis.clone());
        last = Some((m, basis));
        iterations += 1;
        if delta <= opts.tol {
            converged = true;
            break;
        }
    }

    let (m, basis) = match last {
        Some(v) => v,
        None => {
            // max_iter = 0: report the starting values
            let acc = estep.accumulate(&params)?;
            let basis = estimate_basis(&acc, u)?;
            let m = mstep_given_gamma(&basis, &acc, n)?;
            (m, basis)
        }
    };
    let mut fit = assemble(m, basis, params.predictor.clone(), u, n);
    if opts.track_loglik {
        loglik_trace.push(estep.observed_loglik(&params)?);
    }
    let acc = estep.accumulate(&params)?;
    fit.q_value = expected_complete_loglik(&acc, &params).unwrap_or(f64::NAN);
    fit.iterations = iterations;
    fit.converged = converged;
    fit.loglik_trace = loglik_trace;
    fit.beta_trace_norm = beta_trace_norm;
    Ok(fit)
}

/// EM with `Γ` fixed to span all of `Rʳ`: the unconstrained MLE.
pub fn em_standard_fit(ds: &ObservedDataset, opts: &EmOptions) -> Result<EnvelopeFit> {
    let mut o = opts.clone();
    o.u = ds.r();
    em_envelope_fit(ds, &o)
}

/// One M-step on fully observed data.
pub fn full_data_fit(x: &Mat, y: &Mat, u: usize, model: PredictorModel) -> Result<EnvelopeFit> {
    let ds = ObservedDataset::complete(x.clone(), y.clone())?;
    let opts = EmOptions::new(u, model);
    check_model(&ds, &opts)?;
    let n = ds.n();
    let acc = MomentAccumulators::from_complete(x, y);
    if let PredictorModel::Bernoulli { scale } = model {
        for i in 0..n {
            let v = x[(i, 0)];
            if v != 0.0 && (v - scale).abs() > 1e-9 * scale.abs().max(1.0) {
                return Err(Error::InvalidPredictorValue { row: i, value: v, scale });
            }
        }
    }
    let basis = estimate_basis(&acc, u)?;
    let m = mstep_given_gamma(&basis, &acc, n)?;
    let predictor = update_predictor(model, &acc, n);
    let params = ModelParams { beta: m.beta.clone(), sigma: m.sigma.clone(), predictor: predictor.clone() };
    let estep = EStep::new(&ds);
    let ll = estep.observed_loglik(&params).unwrap_or(f64::NAN);
    let mut fit = assemble(m, basis, predictor, u, n);
    fit.q_value = expected_complete_loglik(&acc, &params).unwrap_or(f64::NAN);
    fit.iterations = 1;
    fit.converged = true;
    fit.loglik_trace = alloc::vec![ll];
    Ok(fit)
}

/// Drops every row with a missing cell, then fits the full-data estimator.
pub fn complete_case_fit(ds: &ObservedDataset, opts: &EmOptions, envelope: bool) -> Result<EnvelopeFit> {
    check_model(ds, opts)?;
    let u = if envelope { opts.u } else { ds.r() };
    let rows = ds.complete_rows();
    let needed = ds.p().max(u) + 1;
    if rows.len() < needed {
        return Err(Error::TooFewCompleteRows { needed, found: rows.len() });
    }
    let x = ds.x().select_rows(&rows);
    let y = ds.y().select_rows(&rows);
    full_data_fit(&x, &y, u, opts.model)
}

/// `‖β̂ − β‖²_F / (rp)`.
pub fn mse(beta_hat: &Mat, beta: &Mat) -> f64 {
    let d = beta_hat - beta;
    d.norm_squared() / (beta.len().max(1) as f64)
}

/// Column means of the observed cells, used by callers that need a crude centre.
pub fn observed_means(ds: &ObservedDataset) -> Vector {
    let d = ds.p() + ds.r();
    Vector::from_fn(d, |c, _| {
        let vals: Vec<f64> = (0..ds.n()).map(|i| ds.value(i, c)).filter(|v| !v.is_nan()).collect();
        crate::stats::mean(&vals)
    })
}
