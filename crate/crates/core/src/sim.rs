//! Simulation studies: parameter and data generation, MAR masking, and MSE
//! summaries of the six estimators.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::data::ObservedDataset;
use crate::em::{complete_case_fit, em_envelope_fit, em_standard_fit, full_data_fit, mse, EmOptions, Init};
use crate::estep::PredictorModel;
use crate::linalg::{orth_complete, qr_orthonormalize, Mat, Vector};
use crate::runner::{derive_seed, rng_from_seed, Runner, Serial};
use crate::select::{select_u_bic_with, select_u_bootstrap_with};
use crate::stats::MseSummary;
use crate::{Error, Result};

/// Distribution of `(ε₁, ε₂)`, the material and immaterial error coordinates.
///
/// `omega_scale` and `omega0_scale` mean: the variance for `Normal`, the scale
/// multiplier of the identity for `T5`, the half-width for `Uniform`, and the
/// scale `b` for `Laplace`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Normal,
    T5,
    Uniform,
    Laplace,
    /// No error at all: `Y = βX`.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictorFamily {
    /// `N(μx, NNᵀ)`.
    Normal,
    /// Each entry independently `scale · Ber(pi)`.
    TwoPoint { scale: f64, pi: f64 },
    /// Multivariate t with 5 degrees of freedom, location 0 and scale `NNᵀ`.
    T5,
}

/// How the logistic intercepts of the masking mechanisms are set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Calibration {
    /// Shift each mechanism's intercept so that every targeted variable is
    /// missing at about this marginal rate.
    Target { x_rate: f64, y_rate: f64 },
    /// The stated intercepts.
    Verbatim,
    /// Every intercept replaced by this value; `−∞` deletes nothing.
    Intercept(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingnessSpec {
    pub calibration: Calibration,
    /// Reduce column indices modulo `p` and `r` when the data are narrower
    /// than the mechanisms require.
    pub remap: bool,
}

impl Default for MissingnessSpec {
    fn default() -> Self {
        MissingnessSpec { calibration: Calibration::Target { x_rate: 0.12, y_rate: 0.07 }, remap: false }
    }
}

/// How the three envelope estimators pick `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum USelection {
    TrueU,
    Bic,
    Bootstrap { b: usize, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub u: usize,
    pub errors: ErrorFamily,
    pub predictors: PredictorFamily,
    pub omega_scale: f64,
    pub omega0_scale: f64,
    pub missingness: MissingnessSpec,
    pub selection: USelection,
    /// Working predictor model of the EM fits.
    pub model: PredictorModel,
    pub reps: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub init: Init,
}

pub const SCENARIO_NAMES: [&str; 6] = ["normal-omega0-1000", "normal-omega0-10", "t-bernoulli", "t-t", "uniform-t", "laplace-t"];

impl ScenarioSpec {
    /// The named scenarios at their published sizes.
    pub fn named(name: &str) -> Option<Self> {
        let base = ScenarioSpec {
            name: name.to_string(),
            n: 500,
            r: 20,
            p: 5,
            u: 3,
            errors: ErrorFamily::Normal,
            predictors: PredictorFamily::Normal,
            omega_scale: 0.1,
            omega0_scale: 1000.0,
            missingness: MissingnessSpec::default(),
            selection: USelection::Bic,
            model: PredictorModel::Normal,
            reps: 1000,
            seed: 1,
            tol: 1e-6,
            max_iter: 500,
            init: Init::Cold,
        };
        let robust = ScenarioSpec {
            r: 10,
            u: 2,
            errors: ErrorFamily::T5,
            predictors: PredictorFamily::T5,
            omega_scale: 1.0,
            omega0_scale: 1000.0,
            selection: USelection::Bootstrap { b: 20, threshold: 0.95 },
            ..base.clone()
        };
        let spec = match name {
            "normal-omega0-1000" => base,
            "normal-omega0-10" => ScenarioSpec { omega0_scale: 10.0, ..base },
            "t-bernoulli" => ScenarioSpec {
                p: 1,
                predictors: PredictorFamily::TwoPoint { scale: 25.0, pi: 0.5 },
                model: PredictorModel::Bernoulli { scale: 25.0 },
                ..robust
            },
            "t-t" => robust,
            "uniform-t" => ScenarioSpec { errors: ErrorFamily::Uniform, omega0_scale: 10.0, ..robust },
            "laplace-t" => ScenarioSpec { errors: ErrorFamily::Laplace, omega0_scale: 20.0, ..robust },
            _ => return None,
        };
        Some(spec.with_remap())
    }

    /// Same scenario at other sizes.
    pub fn with_dims(mut self, n: usize, r: usize, p: usize, u: usize) -> Self {
        self.n = n;
        self.r = r;
        self.p = p;
        self.u = u;
        self.with_remap()
    }

    fn with_remap(mut self) -> Self {
        self.missingness.remap = self.p < MIN_P || self.r < MIN_R;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n == 0 || self.r == 0 || self.p == 0 {
            return bad(format!("n, r and p must be positive (n={}, r={}, p={})", self.n, self.r, self.p));
        }
        if self.u > self.r {
            return bad(format!("u={} exceeds r={}", self.u, self.r));
        }
        let scale_ok = |s: f64| s.is_finite() && s > 0.0;
        if !scale_ok(self.omega_scale) || !scale_ok(self.omega0_scale) {
            return bad("omega scales must be finite and positive".into());
        }
        if let PredictorFamily::TwoPoint { scale, pi } = self.predictors {
            if !scale_ok(scale) || !(0.0..=1.0).contains(&pi) {
                return bad(format!("two-point predictors need scale > 0 and pi in [0, 1], got {scale}, {pi}"));
            }
        }
        if let PredictorModel::Bernoulli { scale } = self.model {
            if self.p != 1 {
                return bad(format!("the Bernoulli working model needs p = 1, got p = {}", self.p));
            }
            match self.predictors {
                PredictorFamily::TwoPoint { scale: s, .. } if s == scale => {}
                _ => return bad("the Bernoulli working model needs two-point predictors with the same scale".into()),
            }
        }
        if let USelection::Bootstrap { b: 0, .. } = self.selection {
            return bad("bootstrap selection needs at least one resample".into());
        }
        Ok(())
    }

    fn em_options(&self, u: usize) -> EmOptions {
        let mut o = EmOptions::new(u, self.model);
        o.tol = self.tol;
        o.max_iter = self.max_iter;
        o.init = self.init;
        o.track_loglik = false;
        o
    }
}

/// True parameters of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub gamma: Mat,
    pub gamma0: Mat,
    pub beta: Mat,
    pub mu_x: Vector,
    /// `N` with `Σx = NNᵀ`.
    pub n_factor: Mat,
    pub sigma_x: Mat,
    pub omega: Mat,
    pub omega0: Mat,
    /// `ΓΩΓᵀ + Γ0Ω0Γ0ᵀ`, the error covariance of the normal family.
    pub sigma_eps: Mat,
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn gen_parameters(spec: &ScenarioSpec, seed: u64) -> Result<SimParams> {
    spec.validate()?;
    let (r, p, u) = (spec.r, spec.p, spec.u);
    let mut rng = rng_from_seed(seed);
    let gamma_raw = uniform_mat(&mut rng, r, u, 0.0, 1.0);
    let beta_raw = uniform_mat(&mut rng, r, p, -10.0, 10.0);
    let n_factor = uniform_mat(&mut rng, p, p, -10.0, 10.0);
    let mu_x = Vector::from_fn(p, |_, _| rng.random_range(-10.0..10.0));
    let gamma = qr_orthonormalize(&gamma_raw)?;
    let gamma0 = orth_complete(&gamma)?;
    let beta = &gamma * (gamma.transpose() * beta_raw);
    let sigma_x = &n_factor * n_factor.transpose();
    let omega = Mat::identity(u, u) * spec.omega_scale;
    let omega0 = Mat::identity(r - u, r - u) * spec.omega0_scale;
    let sigma_eps = &gamma * &omega * gamma.transpose() + &gamma0 * &omega0 * gamma0.transpose();
    Ok(SimParams { gamma, gamma0, beta, mu_x, n_factor, sigma_x, omega, omega0, sigma_eps })
}

fn laplace(rng: &mut ChaCha8Rng, b: f64) -> f64 {
    let v: f64 = rng.random_range(-0.5..0.5);
    let mag = -b * libm::log(1.0 - 2.0 * v.abs());
    if v < 0.0 {
        -mag
    } else {
        mag
    }
}

/// `dim` error coordinates with scale parameter `s`.
fn error_block(rng: &mut ChaCha8Rng, family: ErrorFamily, dim: usize, s: f64) -> Vector {
    match family {
        ErrorFamily::Normal => Vector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            libm::sqrt(s) * z
        }),
        ErrorFamily::T5 => {
            let z = Vector::from_fn(dim, |_, _| StandardNormal.sample(rng));
            let w: f64 = ChiSquared::new(5.0).expect("5 degrees of freedom").sample(rng);
            z * (libm::sqrt(s) / libm::sqrt(w / 5.0))
        }
        ErrorFamily::Uniform => Vector::from_fn(dim, |_, _| rng.random_range(-s..s)),
        ErrorFamily::Laplace => Vector::from_fn(dim, |_, _| laplace(rng, s)),
        ErrorFamily::Zero => Vector::zeros(dim),
    }
}

/// `n` fully observed rows `(X, Y)` drawn from the scenario.
pub fn gen_full_data(params: &SimParams, spec: &ScenarioSpec, seed: u64) -> (Mat, Mat) {
    let (n, r, p, u) = (spec.n, spec.r, spec.p, spec.u);
    let mut rng = rng_from_seed(seed);
    let mut x = Mat::zeros(n, p);
    let mut y = Mat::zeros(n, r);
    for i in 0..n {
        let xi = match spec.predictors {
            PredictorFamily::Normal => {
                let z = Vector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                &params.mu_x + &params.n_factor * z
            }
            PredictorFamily::TwoPoint { scale, pi } => {
                Vector::from_fn(p, |_, _| if rng.random_bool(pi) { scale } else { 0.0 })
            }
            PredictorFamily::T5 => {
                let z = Vector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
                let w: f64 = ChiSquared::new(5.0).expect("5 degrees of freedom").sample(&mut rng);
                &params.n_factor * z / libm::sqrt(w / 5.0)
            }
        };
        let e1 = error_block(&mut rng, spec.errors, u, spec.omega_scale);
        let e2 = error_block(&mut rng, spec.errors, r - u, spec.omega0_scale);
        let yi = &params.beta * &xi + &params.gamma * e1 + &params.gamma0 * e2;
        x.set_row(i, &xi.transpose());
        y.set_row(i, &yi.transpose());
    }
    (x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    X(usize),
    Y(usize),
}

struct Mechanism {
    targets: &'static [Var],
    intercept: f64,
    terms: &'static [(Var, f64)],
}

use Var::{X, Y};

const MIN_P: usize = 5;
const MIN_R: usize = 10;

const X_MECHANISMS: [Mechanism; 3] = [
    Mechanism { targets: &[X(3)], intercept: 1.0, terms: &[(X(0), -1.0), (X(1), -2.0), (X(2), -3.0)] },
    Mechanism { targets: &[X(2)], intercept: 1.0, terms: &[(X(0), -1.0), (X(3), -2.0)] },
    Mechanism { targets: &[X(4)], intercept: 1.0, terms: &[(X(0), -1.0)] },
];

const Y_MECHANISMS: [Mechanism; 5] = [
    Mechanism { targets: &[Y(1), Y(3)], intercept: 2.0, terms: &[(X(0), -1.0), (Y(7), -1.0), (Y(8), -3.0)] },
    Mechanism { targets: &[Y(2)], intercept: 1.0, terms: &[(X(1), -1.0), (Y(3), -3.0), (Y(5), -1.0)] },
    Mechanism { targets: &[Y(6), Y(7), Y(8)], intercept: 2.0, terms: &[(Y(0), -2.0), (Y(1), -1.0), (Y(2), -3.0)] },
    Mechanism { targets: &[Y(0), Y(9)], intercept: 1.0, terms: &[(X(0), -1.0), (X(1), -1.0)] },
    Mechanism {
        targets: &[Y(4), Y(5)],
        intercept: 1.0,
        terms: &[(X(0), -1.0), (X(1), -1.0), (Y(0), -1.0), (Y(9), -1.0)],
    },
];

fn remap(v: Var, p: usize, r: usize) -> Var {
    match v {
        X(i) => X(i % p),
        Y(j) => Y(j % r),
    }
}

fn var_name(v: Var) -> String {
    match v {
        X(i) => format!("x{}", i + 1),
        Y(j) => format!("y{}", j + 1),
    }
}

/// Human-readable mechanisms after any index remapping, X family first.
pub fn describe_mechanisms(p: usize, r: usize, remap_indices: bool) -> Vec<String> {
    let map = |v: Var| if remap_indices { remap(v, p, r) } else { v };
    X_MECHANISMS
        .iter()
        .chain(Y_MECHANISMS.iter())
        .map(|m| {
            let targets: Vec<String> = m.targets.iter().map(|&v| var_name(map(v))).collect();
            let mut lp = format!("{}", m.intercept);
            for &(v, c) in m.terms {
                lp.push_str(&format!(" {} {}*{}", if c < 0.0 { '-' } else { '+' }, c.abs(), var_name(map(v))));
            }
            format!("P(miss {}) = sigmoid({})", targets.join(","), lp)
        })
        .collect()
}

/// Which cells are missing, and which mechanism of each family each row used.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMask {
    pub x: DMatrix<bool>,
    pub y: DMatrix<bool>,
    pub x_mechanism: Vec<usize>,
    pub y_mechanism: Vec<usize>,
    /// Intercepts used, X family then Y family.
    pub intercepts: Vec<f64>,
}

impl MissingMask {
    pub fn apply(&self, x: &Mat, y: &Mat) -> Result<ObservedDataset> {
        let mut xm = x.clone();
        let mut ym = y.clone();
        xm.zip_apply(&self.x, |v, miss| {
            if miss {
                *v = f64::NAN
            }
        });
        ym.zip_apply(&self.y, |v, miss| {
            if miss {
                *v = f64::NAN
            }
        });
        ObservedDataset::from_nan_masked(xm, ym)
    }

    /// Fraction of missing cells among predictors and among responses.
    pub fn rates(&self) -> (f64, f64) {
        let frac = |m: &DMatrix<bool>| m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64;
        (frac(&self.x), frac(&self.y))
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + libm::exp(-t))
    } else {
        let e = libm::exp(t);
        e / (1.0 + e)
    }
}

/// Intercept `b` with `mean_i sigmoid(b + lp_i) = target`.
fn calibrate(lp: &[f64], target: f64) -> f64 {
    let span = lp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (mut lo, mut hi) = (-span - 50.0, span + 50.0);
    let rate = |b: f64| lp.iter().map(|&v| sigmoid(b + v)).sum::<f64>() / lp.len() as f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draws the MAR mask: one mechanism per family per row, chosen uniformly,
/// `P(miss) = sigmoid(intercept + Σ coef·value)`, and nothing referenced by
/// either chosen mechanism is deleted.
pub fn gen_missingness(x: &Mat, y: &Mat, spec: &MissingnessSpec, seed: u64) -> Result<MissingMask> {
    let (n, p, r) = (x.nrows(), x.ncols(), y.ncols());
    if y.nrows() != n {
        return Err(Error::ShapeMismatch(format!("X has {n} rows but Y has {}", y.nrows())));
    }
    if !spec.remap && (p < MIN_P || r < MIN_R) {
        return Err(Error::DimensionTooSmallForMechanism(format!(
            "need p >= {MIN_P} and r >= {MIN_R} without remapping, got p = {p}, r = {r}"
        )));
    }
    let map = |v: Var| if spec.remap { remap(v, p, r) } else { v };
    let value = |i: usize, v: Var| match map(v) {
        X(k) => x[(i, k)],
        Y(k) => y[(i, k)],
    };
    let lin = |m: &Mechanism, i: usize| m.terms.iter().map(|&(v, c)| c * value(i, v)).sum::<f64>();

    let intercepts: Vec<f64> = X_MECHANISMS
        .iter()
        .map(|m| (m, true))
        .chain(Y_MECHANISMS.iter().map(|m| (m, false)))
        .map(|(m, is_x)| match spec.calibration {
            Calibration::Verbatim => m.intercept,
            Calibration::Intercept(b) => b,
            Calibration::Target { x_rate, y_rate } => {
                let family = if is_x { X_MECHANISMS.len() } else { Y_MECHANISMS.len() };
                let target = (if is_x { x_rate } else { y_rate } * family as f64).clamp(0.0, 0.99);
                let lp: Vec<f64> = (0..n).map(|i| lin(m, i)).collect();
                calibrate(&lp, target)
            }
        })
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut mask = MissingMask {
        x: DMatrix::from_element(n, p, false),
        y: DMatrix::from_element(n, r, false),
        x_mechanism: Vec::with_capacity(n),
        y_mechanism: Vec::with_capacity(n),
        intercepts,
    };
    for i in 0..n {
        let kx = rng.random_range(0..X_MECHANISMS.len());
        let ky = rng.random_range(0..Y_MECHANISMS.len());
        let ux: f64 = rng.random();
        let uy: f64 = rng.random();
        let (mx, my) = (&X_MECHANISMS[kx], &Y_MECHANISMS[ky]);
        let referenced: Vec<Var> = mx.terms.iter().chain(my.terms.iter()).map(|&(v, _)| map(v)).collect();
        let draws = [
            (mx, ux < sigmoid(mask.intercepts[kx] + lin(mx, i))),
            (my, uy < sigmoid(mask.intercepts[X_MECHANISMS.len() + ky] + lin(my, i))),
        ];
        for (m, hit) in draws {
            if !hit {
                continue;
            }
            for &t in m.targets {
                let t = map(t);
                if referenced.contains(&t) {
                    continue;
                }
                match t {
                    X(k) => mask.x[(i, k)] = true,
                    Y(k) => mask.y[(i, k)] = true,
                }
            }
        }
        mask.x_mechanism.push(kx);
        mask.y_mechanism.push(ky);
    }
    Ok(mask)
}

/// The six estimators compared in every replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    EmEnvelope,
    CcEnvelope,
    FullEnvelope,
    EmStandard,
    CcStandard,
    FullStandard,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::EmEnvelope,
        EstimatorKind::CcEnvelope,
        EstimatorKind::FullEnvelope,
        EstimatorKind::EmStandard,
        EstimatorKind::CcStandard,
        EstimatorKind::FullStandard,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::EmEnvelope => "em-envelope",
            EstimatorKind::CcEnvelope => "cc-envelope",
            EstimatorKind::FullEnvelope => "full-envelope",
            EstimatorKind::EmStandard => "em-standard",
            EstimatorKind::CcStandard => "cc-standard",
            EstimatorKind::FullStandard => "full-mle",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    /// MSE per estimator in `EstimatorKind::ALL` order; NaN when that fit failed.
    pub mse: [f64; 6],
    /// Dimension used by the em, cc and full envelope estimators.
    pub chosen_u: [Option<usize>; 3],
    pub em_iterations: Option<usize>,
    pub em_converged: Option<bool>,
    pub missing_rate_x: f64,
    pub missing_rate_y: f64,
    pub failures: Vec<(EstimatorKind, Error)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    pub params: SimParams,
    pub records: Vec<ReplicateRecord>,
    /// One summary per estimator in `EstimatorKind::ALL` order.
    pub summaries: Vec<(EstimatorKind, MseSummary)>,
    pub mechanisms: Vec<String>,
    /// Fraction of replicates whose em, cc and full envelope fits used the true `u`.
    pub u_accuracy: [f64; 3],
}

impl ScenarioResult {
    pub fn summary(&self, kind: EstimatorKind) -> &MseSummary {
        &self.summaries[kind.index()].1
    }
}

fn choose_u<R: Runner>(spec: &ScenarioSpec, ds: &ObservedDataset, seed: u64, runner: &R) -> Result<usize> {
    let opts = spec.em_options(spec.u);
    match spec.selection {
        USelection::TrueU => Ok(spec.u),
        USelection::Bic => Ok(select_u_bic_with(ds, &opts, runner)?.chosen_u),
        USelection::Bootstrap { b, threshold } => {
            Ok(select_u_bootstrap_with(ds, &opts, b, threshold, seed, runner)?.chosen_u)
        }
    }
}

/// Full data and masked dataset of one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub seed: u64,
    pub x: Mat,
    pub y: Mat,
    pub masked: Result<ObservedDataset>,
    /// Missing fractions among predictors and responses.
    pub rates: (f64, f64),
}

/// Draws replicate `index` exactly as `run_replicate` sees it.
pub fn replicate_data(spec: &ScenarioSpec, params: &SimParams, index: usize) -> ReplicateData {
    let seed = derive_seed(spec.seed, index as u64 + 1);
    let (x, y) = gen_full_data(params, spec, derive_seed(seed, 0));
    let mut rates = (f64::NAN, f64::NAN);
    let masked = gen_missingness(&x, &y, &spec.missingness, derive_seed(seed, 1)).and_then(|m| {
        rates = m.rates();
        m.apply(&x, &y)
    });
    ReplicateData { seed, x, y, masked, rates }
}

/// Generates, masks and fits replicate `index`.
pub fn run_replicate(spec: &ScenarioSpec, params: &SimParams, index: usize) -> ReplicateRecord {
    let ReplicateData { seed, x, y, masked, rates } = replicate_data(spec, params, index);
    let mut rec = ReplicateRecord {
        index,
        seed,
        mse: [f64::NAN; 6],
        chosen_u: [None; 3],
        em_iterations: None,
        em_converged: None,
        missing_rate_x: rates.0,
        missing_rate_y: rates.1,
        failures: Vec::new(),
    };
    let ds = match masked {
        Ok(ds) => ds,
        Err(e) => {
            rec.failures.extend(EstimatorKind::ALL.iter().map(|&k| (k, e.clone())));
            return rec;
        }
    };
    let full = ObservedDataset::complete(x.clone(), y.clone());
    let cc = ds.select_rows(&ds.complete_rows());
    let r = spec.r;
    for kind in EstimatorKind::ALL {
        let fit = (|| -> Result<(crate::em::EnvelopeFit, Option<usize>)> {
            let sel_seed = derive_seed(seed, 2 + kind.index() as u64);
            match kind {
                EstimatorKind::EmEnvelope => {
                    let u = choose_u(spec, &ds, sel_seed, &Serial)?;
                    Ok((em_envelope_fit(&ds, &spec.em_options(u))?, Some(u)))
                }
                EstimatorKind::CcEnvelope => {
                    let u = choose_u(spec, cc.as_ref().map_err(Clone::clone)?, sel_seed, &Serial)?;
                    Ok((complete_case_fit(&ds, &spec.em_options(u), true)?, Some(u)))
                }
                EstimatorKind::FullEnvelope => {
                    let u = choose_u(spec, full.as_ref().map_err(Clone::clone)?, sel_seed, &Serial)?;
                    Ok((full_data_fit(&x, &y, u, spec.model)?, Some(u)))
                }
                EstimatorKind::EmStandard => Ok((em_standard_fit(&ds, &spec.em_options(r))?, None)),
                EstimatorKind::CcStandard => Ok((complete_case_fit(&ds, &spec.em_options(r), false)?, None)),
                EstimatorKind::FullStandard => Ok((full_data_fit(&x, &y, r, spec.model)?, None)),
            }
        })();
        match fit {
            Ok((f, u)) => {
                rec.mse[kind.index()] = mse(&f.beta, &params.beta);
                if kind.index() < 3 {
                    rec.chosen_u[kind.index()] = u;
                }
                if kind == EstimatorKind::EmEnvelope {
                    rec.em_iterations = Some(f.iterations);
                    rec.em_converged = Some(f.converged);
                }
            }
            Err(e) => rec.failures.push((kind, e)),
        }
    }
    rec
}

/// Runs every replicate through `runner` and summarises by replicate index.
pub fn run_scenario_with<R: Runner>(spec: &ScenarioSpec, runner: &R) -> Result<ScenarioResult> {
    spec.validate()?;
    if !spec.missingness.remap && (spec.p < MIN_P || spec.r < MIN_R) {
        return Err(Error::DimensionTooSmallForMechanism(format!(
            "need p >= {MIN_P} and r >= {MIN_R} without remapping, got p = {}, r = {}",
            spec.p, spec.r
        )));
    }
    let params = gen_parameters(spec, derive_seed(spec.seed, 0))?;
    let records = runner.run(spec.reps, |k| run_replicate(spec, &params, k));
    let summaries = EstimatorKind::ALL
        .iter()
        .map(|&k| {
            let v: Vec<f64> = records.iter().map(|rec| rec.mse[k.index()]).collect();
            (k, MseSummary::of(&v))
        })
        .collect();
    let mut u_accuracy = [0.0; 3];
    for (j, acc) in u_accuracy.iter_mut().enumerate() {
        let hits = records.iter().filter(|rec| rec.chosen_u[j] == Some(spec.u)).count();
        *acc = hits as f64 / records.len().max(1) as f64;
    }
    Ok(ScenarioResult {
        mechanisms: describe_mechanisms(spec.p, spec.r, spec.missingness.remap),
        spec: spec.clone(),
        params,
        records,
        summaries,
        u_accuracy,
    })
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioResult> {
    run_scenario_with(spec, &Serial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::proj_complement;

    fn small(errors: ErrorFamily, predictors: PredictorFamily, n: usize) -> ScenarioSpec {
        ScenarioSpec {
            errors,
            predictors,
            ..ScenarioSpec::named("normal-omega0-1000").unwrap().with_dims(n, 4, 2, 1)
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (crate::stats::mean(a), crate::stats::mean(b));
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / libm::sqrt(saa * sbb)
    }

    #[test]
    fn parameters_have_envelope_structure() {
        let spec = ScenarioSpec::named("normal-omega0-1000").unwrap();
        for seed in 0..100 {
            let prm = gen_parameters(&spec, seed).unwrap();
            let q = proj_complement(&prm.gamma).unwrap();
            assert!((q * &prm.beta).amax() < 1e-12 * prm.beta.amax().max(1.0));
            let ev = prm.sigma_x.clone().symmetric_eigen().eigenvalues;
            assert!(ev.min() >= -1e-9 * ev.amax());
        }
        let prm = gen_parameters(&spec, 7).unwrap();
        let mut ev: Vec<f64> = prm.sigma_eps.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[..3].iter().all(|l| (l - 0.1).abs() < 1e-9));
        assert!(ev[3..].iter().all(|l| (l - 1000.0).abs() < 1e-9));
        assert!(prm.gamma.iter().count() == 60 && prm.gamma0.ncols() == 17);
    }

    #[test]
    fn zero_noise_gives_exact_regression() {
        let spec = small(ErrorFamily::Zero, PredictorFamily::Normal, 50);
        let prm = gen_parameters(&spec, 1).unwrap();
        let (x, y) = gen_full_data(&prm, &spec, 2);
        assert!((y - x * prm.beta.transpose()).amax() < 1e-12);
    }

    #[test]
    fn normal_errors_have_target_covariance() {
        let spec = ScenarioSpec { omega_scale: 2.0, omega0_scale: 5.0, ..small(ErrorFamily::Normal, PredictorFamily::Normal, 100_000) };
        let prm = gen_parameters(&spec, 3).unwrap();
        let (x, y) = gen_full_data(&prm, &spec, 4);
        let e = y - x * prm.beta.transpose();
        let cov = e.transpose() * &e / spec.n as f64;
        assert!((cov - &prm.sigma_eps).amax() < 0.03 * 5.0);
    }

    #[test]
    fn non_normal_errors_keep_independence_structure() {
        for fam in [ErrorFamily::T5, ErrorFamily::Uniform, ErrorFamily::Laplace] {
            let spec = ScenarioSpec { omega_scale: 1.0, omega0_scale: 20.0, ..small(fam, PredictorFamily::T5, 100_000) };
            let prm = gen_parameters(&spec, 5).unwrap();
            let (x, y) = gen_full_data(&prm, &spec, 6);
            let e = &y - &x * prm.beta.transpose();
            let mat = e.clone() * &prm.gamma;
            let imm = e * &prm.gamma0;
            for j in 0..imm.ncols() {
                let a: Vec<f64> = imm.column(j).iter().copied().collect();
                let b: Vec<f64> = mat.column(0).iter().copied().collect();
                assert!(corr(&a, &b).abs() < 0.02, "{fam:?}");
                for k in 0..x.ncols() {
                    let c: Vec<f64> = x.column(k).iter().copied().collect();
                    assert!(corr(&a, &c).abs() < 0.02, "{fam:?}");
                }
            }
        }
    }

    #[test]
    fn error_family_variances() {
        let mut rng = rng_from_seed(8);
        let n = 200_000;
        let var = |fam, s, rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..n).map(|_| error_block(rng, fam, 1, s)[0]).collect();
            let m = crate::stats::mean(&v);
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64
        };
        assert!((var(ErrorFamily::Uniform, 10.0, &mut rng) / (100.0 / 3.0) - 1.0).abs() < 0.02);
        assert!((var(ErrorFamily::Laplace, 20.0, &mut rng) / 800.0 - 1.0).abs() < 0.03);
        assert!((var(ErrorFamily::T5, 4.0, &mut rng) / (4.0 * 5.0 / 3.0) - 1.0).abs() < 0.1);
    }

    #[test]
    fn two_point_predictors_take_two_values() {
        let spec = ScenarioSpec::named("t-bernoulli").unwrap().with_dims(2000, 8, 1, 2);
        let prm = gen_parameters(&spec, 1).unwrap();
        let (x, _) = gen_full_data(&prm, &spec, 2);
        assert!(x.iter().all(|&v| v == 0.0 || v == 25.0));
        let frac = x.iter().filter(|&&v| v == 25.0).count() as f64 / 2000.0;
        assert!((frac - 0.5).abs() < 0.05);
    }

    fn full_scale_data(n: usize, seed: u64) -> (Mat, Mat) {
        let spec = ScenarioSpec::named("normal-omega0-1000").unwrap().with_dims(n, 20, 5, 3);
        let prm = gen_parameters(&spec, seed).unwrap();
        gen_missing_free(&prm, &spec, seed)
    }

    fn gen_missing_free(prm: &SimParams, spec: &ScenarioSpec, seed: u64) -> (Mat, Mat) {
        gen_full_data(prm, spec, seed + 1)
    }

    #[test]
    fn intercept_override_to_minus_infinity_deletes_nothing() {
        let (x, y) = full_scale_data(300, 1);
        let spec = MissingnessSpec { calibration: Calibration::Intercept(f64::NEG_INFINITY), remap: false };
        let m = gen_missingness(&x, &y, &spec, 3).unwrap();
        assert_eq!(m.rates(), (0.0, 0.0));
    }

    #[test]
    fn calibrated_rates_fall_in_reported_bands() {
        let (x, y) = full_scale_data(6000, 2);
        let m = gen_missingness(&x, &y, &MissingnessSpec::default(), 4).unwrap();
        let col_rate = |mm: &DMatrix<bool>, j: usize| mm.column(j).iter().filter(|&&b| b).count() as f64 / 6000.0;
        for j in 2..5 {
            let rate = col_rate(&m.x, j);
            assert!((0.10..=0.15).contains(&rate), "x{} rate {rate}", j + 1);
        }
        for j in 0..20 {
            let rate = col_rate(&m.y, j);
            if j < 10 {
                assert!((0.05..=0.10).contains(&rate), "y{} rate {rate}", j + 1);
            } else {
                assert_eq!(rate, 0.0);
            }
        }
        assert_eq!(col_rate(&m.x, 0), 0.0);
    }

    #[test]
    fn verbatim_intercepts_saturate() {
        let (x, y) = full_scale_data(2000, 3);
        let spec = MissingnessSpec { calibration: Calibration::Verbatim, remap: false };
        let m = gen_missingness(&x, &y, &spec, 1).unwrap();
        let (rx, ry) = m.rates();
        // with covariates on the U(−10,10) scale the stated logits are far from 10%
        assert!(rx > 0.0 && ry > 0.0);
        assert_eq!(m.intercepts[..3], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn masks_are_deterministic_and_keep_referenced_values() {
        let spec = ScenarioSpec::named("t-t").unwrap().with_dims(400, 6, 3, 2);
        let prm = gen_parameters(&spec, 4).unwrap();
        let (x, y) = gen_full_data(&prm, &spec, 5);
        let a = gen_missingness(&x, &y, &spec.missingness, 9).unwrap();
        assert_eq!(a, gen_missingness(&x, &y, &spec.missingness, 9).unwrap());
        assert!(a.rates().0 > 0.0 && a.rates().1 > 0.0);
        for i in 0..400 {
            let mx = &X_MECHANISMS[a.x_mechanism[i]];
            let my = &Y_MECHANISMS[a.y_mechanism[i]];
            for &(v, _) in mx.terms.iter().chain(my.terms) {
                match remap(v, 3, 6) {
                    X(k) => assert!(!a.x[(i, k)]),
                    Y(k) => assert!(!a.y[(i, k)]),
                }
            }
        }
    }

    #[test]
    fn narrow_data_needs_remapping() {
        let (x, y) = full_scale_data(50, 1);
        let narrow_x = x.columns(0, 1).into_owned();
        let spec = MissingnessSpec::default();
        assert!(matches!(gen_missingness(&narrow_x, &y, &spec, 1), Err(Error::DimensionTooSmallForMechanism(_))));
        let m = gen_missingness(&narrow_x, &y, &MissingnessSpec { remap: true, ..spec }, 1).unwrap();
        // every X mechanism references x1 after remapping, so it is never deleted
        assert_eq!(m.rates().0, 0.0);
        assert!(describe_mechanisms(1, 20, true)[0].contains("x1"));
    }

    #[test]
    fn named_scenarios_validate() {
        for name in SCENARIO_NAMES {
            let s = ScenarioSpec::named(name).unwrap();
            s.validate().unwrap();
            assert_eq!(s.missingness.remap, name == "t-bernoulli");
        }
        assert!(ScenarioSpec::named("nope").is_none());
        let bad = ScenarioSpec::named("t-bernoulli").unwrap().with_dims(100, 8, 2, 2);
        assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn without_missingness_em_matches_full_data() {
        let mut spec = ScenarioSpec::named("normal-omega0-1000").unwrap().with_dims(120, 5, 2, 2);
        spec.missingness.calibration = Calibration::Intercept(f64::NEG_INFINITY);
        spec.selection = USelection::TrueU;
        spec.reps = 3;
        let res = run_scenario(&spec).unwrap();
        for rec in &res.records {
            assert!(rec.failures.is_empty(), "{:?}", rec.failures);
            assert!((rec.mse[0] - rec.mse[2]).abs() <= 1e-8 * rec.mse[2].max(1e-12));
            assert!((rec.mse[3] - rec.mse[5]).abs() <= 1e-8 * rec.mse[5].max(1e-12));
            assert_eq!(rec.mse[1], rec.mse[2]);
        }
    }

    struct Reversed;
    impl Runner for Reversed {
        fn run<T, F>(&self, count: usize, f: F) -> Vec<T>
        where
            T: Send,
            F: Fn(usize) -> T + Sync + Send,
        {
            let mut out: Vec<(usize, T)> = (0..count).rev().map(|k| (k, f(k))).collect();
            out.reverse();
            out.into_iter().map(|(_, t)| t).collect()
        }
    }

    #[test]
    fn results_do_not_depend_on_execution_order() {
        let mut spec = ScenarioSpec::named("normal-omega0-10").unwrap().with_dims(150, 5, 2, 2);
        spec.reps = 4;
        let a = run_scenario(&spec).unwrap();
        let b = run_scenario_with(&spec, &Reversed).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.summaries.len(), 6);
        assert!(a.records.iter().all(|r| r.chosen_u[0].is_some()));
    }

    #[test]
    fn envelope_beats_standard_em_when_immaterial_variance_dominates() {
        let mut spec = ScenarioSpec::named("normal-omega0-1000").unwrap().with_dims(200, 6, 2, 2);
        spec.selection = USelection::TrueU;
        spec.reps = 6;
        let res = run_scenario(&spec).unwrap();
        let env = res.summary(EstimatorKind::EmEnvelope).median;
        let std = res.summary(EstimatorKind::EmStandard).median;
        assert!(env < std, "{env} vs {std}");
        assert!(res.summary(EstimatorKind::FullEnvelope).median < res.summary(EstimatorKind::FullStandard).median);
    }
}
