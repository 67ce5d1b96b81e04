//! Conditional moments for one E-step.
//!
//! Each row contributes `E(YYᵀ | obs)`, `E(YXᵀ | obs)`, `E(XXᵀ | obs)` and
//! `E(X | obs)`; [`MomentAccumulators`] holds their sums. Coefficient matrices
//! of the conditional normal laws are computed once per missingness pattern.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::data::{MissPattern, ObservedDataset, PatternTable};
use crate::linalg::{symmetrize, Mat, SymEig, Vector};
use crate::{Error, Result};

/// Working model for the predictors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictorModel {
    /// `X ~ N(μx, Σx)`.
    Normal,
    /// Single predictor on the support `{0, scale}` with `P(X = scale) = π`.
    Bernoulli { scale: f64 },
}

impl PredictorModel {
    /// Number of free predictor parameters for `p` predictors.
    pub fn dim_rho(&self, p: usize) -> usize {
        match self {
            PredictorModel::Normal => p + p * (p + 1) / 2,
            PredictorModel::Bernoulli { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorParams {
    Normal { mu: Vector, sigma: Mat },
    Bernoulli { pi: f64, scale: f64 },
}

impl PredictorParams {
    pub fn model(&self) -> PredictorModel {
        match self {
            PredictorParams::Normal { .. } => PredictorModel::Normal,
            PredictorParams::Bernoulli { scale, .. } => PredictorModel::Bernoulli { scale: *scale },
        }
    }

    /// The starting values `μx = 0, Σx = I` or `π = 1/2`.
    pub fn initial(model: PredictorModel, p: usize) -> Self {
        match model {
            PredictorModel::Normal => PredictorParams::Normal {
                mu: Vector::zeros(p),
                sigma: Mat::identity(p, p),
            },
            PredictorModel::Bernoulli { scale } => PredictorParams::Bernoulli { pi: 0.5, scale },
        }
    }
}

/// Parameters of `Y | X ~ N(βX, Σ)` together with the predictor law.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: Mat,
    pub sigma: Mat,
    pub predictor: PredictorParams,
}

impl ModelParams {
    pub fn initial(model: PredictorModel, p: usize, r: usize) -> Self {
        ModelParams {
            beta: Mat::zeros(r, p),
            sigma: Mat::identity(r, r),
            predictor: PredictorParams::initial(model, p),
        }
    }

    pub fn p(&self) -> usize {
        self.beta.ncols()
    }
    pub fn r(&self) -> usize {
        self.beta.nrows()
    }
}

/// Joint normal law of `(X, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalJointParams {
    pub mu_tilde: Vector,
    pub sigma_tilde: Mat,
}

fn check_psd(m: &Mat) -> Result<()> {
    let eig = SymEig::new(m)?;
    let top = eig.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if eig.values.iter().any(|&l| l < -1e-10 * top) {
        return Err(Error::NotPsd);
    }
    Ok(())
}

/// `μ̃ = (μx, βμx)` and `Σ̃ = [[Σx, Σxβᵀ], [βΣx, Σ + βΣxβᵀ]]`.
pub fn build_joint(beta: &Mat, sigma: &Mat, mux: &Vector, sigmax: &Mat) -> Result<NormalJointParams> {
    let (r, p) = beta.shape();
    if sigma.shape() != (r, r) || sigmax.shape() != (p, p) || mux.len() != p {
        return Err(Error::ShapeMismatch("joint normal parameter shapes disagree".into()));
    }
    check_psd(sigma)?;
    check_psd(sigmax)?;
    Ok(joint_unchecked(beta, sigma, mux, sigmax))
}

fn joint_unchecked(beta: &Mat, sigma: &Mat, mux: &Vector, sigmax: &Mat) -> NormalJointParams {
    let (r, p) = beta.shape();
    let d = p + r;
    let mut mu = Vector::zeros(d);
    mu.rows_mut(0, p).copy_from(mux);
    mu.rows_mut(p, r).copy_from(&(beta * mux));
    let bsx = beta * sigmax;
    let mut s = Mat::zeros(d, d);
    s.view_mut((0, 0), (p, p)).copy_from(sigmax);
    s.view_mut((p, 0), (r, p)).copy_from(&bsx);
    s.view_mut((0, p), (p, r)).copy_from(&bsx.transpose());
    s.view_mut((p, p), (r, r)).copy_from(&(sigma + &bsx * beta.transpose()));
    NormalJointParams { mu_tilde: mu, sigma_tilde: symmetrize(&s) }
}

/// Sums of the per-row conditional moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulators {
    pub a1: Mat,
    pub a2: Mat,
    pub a3: Mat,
    pub a4: Vector,
    pub n_eff: usize,
}

impl MomentAccumulators {
    pub fn zeros(p: usize, r: usize) -> Self {
        MomentAccumulators {
            a1: Mat::zeros(r, r),
            a2: Mat::zeros(r, p),
            a3: Mat::zeros(p, p),
            a4: Vector::zeros(p),
            n_eff: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.a3.nrows()
    }
    pub fn r(&self) -> usize {
        self.a1.nrows()
    }

    /// Raw cross-product sums of fully observed data.
    pub fn from_complete(x: &Mat, y: &Mat) -> Self {
        MomentAccumulators {
            a1: symmetrize(&(y.transpose() * y)),
            a2: y.transpose() * x,
            a3: symmetrize(&(x.transpose() * x)),
            a4: x.row_sum().transpose(),
            n_eff: x.nrows(),
        }
    }

    /// Splits a `(p + r)`-dimensional first and second moment into the four blocks.
    fn from_joint(p: usize, first: &Vector, second: &Mat, n_eff: usize) -> Self {
        let r = first.len() - p;
        MomentAccumulators {
            a1: symmetrize(&second.view((p, p), (r, r)).into_owned()),
            a2: second.view((p, 0), (r, p)).into_owned(),
            a3: symmetrize(&second.view((0, 0), (p, p)).into_owned()),
            a4: first.rows(0, p).into_owned(),
            n_eff,
        }
    }

    pub fn add(&mut self, other: &MomentAccumulators) {
        self.a1 += &other.a1;
        self.a2 += &other.a2;
        self.a3 += &other.a3;
        self.a4 += &other.a4;
        self.n_eff += other.n_eff;
    }

    /// Same accumulators with every sum multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        MomentAccumulators {
            a1: &self.a1 * c,
            a2: &self.a2 * c,
            a3: &self.a3 * c,
            a4: &self.a4 * c,
            n_eff: self.n_eff,
        }
    }

    /// `(A3⁻¹, A2A3⁻¹)`.
    pub fn regression(&self) -> Result<(Mat, Mat)> {
        let a3_inv = crate::linalg::spd_inverse(&self.a3).ok_or(Error::SingularA3)?;
        // Cholesky can succeed on a numerically singular matrix.
        let ill = self.a3.diagonal().iter().zip(a3_inv.diagonal().iter()).any(|(a, b)| a * b > 1e12);
        if ill || a3_inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularA3);
        }
        let b = &self.a2 * &a3_inv;
        Ok((a3_inv, b))
    }

    /// `M = A1 − A2A3⁻¹A2ᵀ`, the residual sum of squares matrix.
    pub fn residual(&self) -> Result<Mat> {
        let (_, b) = self.regression()?;
        Ok(symmetrize(&(&self.a1 - &b * self.a2.transpose())))
    }
}

/// Conditional law of the missing coordinates of a Gaussian vector given the
/// observed ones: `E(d_m | d_o) = μ_m + K(d_o − μ_o)`, `Var = S`.
#[derive(Debug, Clone)]
struct GaussCond {
    obs: Vec<usize>,
    mis: Vec<usize>,
    k: Mat,
    schur: Mat,
    oo_inv: Mat,
    log_det_oo: f64,
}

impl GaussCond {
    fn new(cov: &Mat, obs: &[usize], mis: &[usize], tag: usize) -> Result<Self> {
        let soo = cov.select_rows(obs).select_columns(obs);
        let smo = cov.select_rows(mis).select_columns(obs);
        let smm = cov.select_rows(mis).select_columns(mis);
        let chol = match soo.clone().cholesky() {
            Some(c) => c,
            None => {
                let o = obs.len().max(1) as f64;
                let ridge = 1e-10 * soo.trace() / o;
                let mut reg = soo.clone();
                for i in 0..obs.len() {
                    reg[(i, i)] += ridge;
                }
                reg.cholesky().ok_or(Error::SingularObservedBlock(tag))?
            }
        };
        let log_det_oo = 2.0 * chol.l().diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
        if !log_det_oo.is_finite() {
            return Err(Error::SingularObservedBlock(tag));
        }
        let oo_inv = symmetrize(&chol.inverse());
        let k = &smo * &oo_inv;
        let schur = symmetrize(&(smm - &k * smo.transpose()));
        Ok(GaussCond { obs: obs.to_vec(), mis: mis.to_vec(), k, schur, oo_inv, log_det_oo })
    }

    /// Conditional mean of the missing block.
    fn cond_mean(&self, mu_o: &Vector, mu_m: &Vector, d_o: &Vector) -> Vector {
        mu_m + &self.k * (d_o - mu_o)
    }

    fn log_density(&self, mu_o: &Vector, d_o: &Vector) -> f64 {
        let z = d_o - mu_o;
        let q = z.dot(&(&self.oo_inv * &z));
        -0.5 * (self.obs.len() as f64 * libm::log(2.0 * PI) + self.log_det_oo + q)
    }
}

fn pick(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn add_scattered(target: &mut Mat, block: &Mat, idx: &[usize], weight: f64) {
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            target[(i, j)] += weight * block[(a, b)];
        }
    }
}

/// Moments of one row under the joint normal model, returned as accumulators
/// with `n_eff = 1`.
pub fn cond_normal_moments(
    row: &Vector,
    pattern: &MissPattern,
    jp: &NormalJointParams,
    p: usize,
) -> Result<MomentAccumulators> {
    let gc = GaussCond::new(&jp.sigma_tilde, &pattern.obs_idx, &pattern.mis_idx, 0)?;
    let mut first = Vector::zeros(0);
    let mut second = Mat::zeros(row.len(), row.len());
    normal_rows(&gc, jp, core::iter::once(row.clone()), &mut first, &mut second);
    Ok(MomentAccumulators::from_joint(p, &first, &second, 1))
}

/// Adds the expected first and second moments of `rows` (all sharing `gc`'s pattern).
fn normal_rows(
    gc: &GaussCond,
    jp: &NormalJointParams,
    rows: impl Iterator<Item = Vector>,
    first: &mut Vector,
    second: &mut Mat,
) {
    let d = jp.mu_tilde.len();
    if first.len() != d {
        *first = Vector::zeros(d);
    }
    let mu_o = pick(&jp.mu_tilde, &gc.obs);
    let mu_m = pick(&jp.mu_tilde, &gc.mis);
    let mut count = 0.0;
    for mut e in rows {
        let d_o = pick(&e, &gc.obs);
        let m = gc.cond_mean(&mu_o, &mu_m, &d_o);
        for (a, &i) in gc.mis.iter().enumerate() {
            e[i] = m[a];
        }
        *first += &e;
        second.ger(1.0, &e, &e, 1.0);
        count += 1.0;
    }
    add_scattered(second, &gc.schur, &gc.mis, count);
}

fn sigmoid_logit_shift(pi: f64, log_q: f64) -> f64 {
    if pi <= 0.0 {
        return 0.0;
    }
    if pi >= 1.0 {
        return 1.0;
    }
    let t = libm::log(pi) - libm::log1p(-pi) + log_q;
    if t >= 0.0 {
        1.0 / (1.0 + libm::exp(-t))
    } else {
        let e = libm::exp(t);
        e / (1.0 + e)
    }
}

fn check_two_point(value: f64, scale: f64, row: usize) -> Result<f64> {
    let tol = 1e-9 * scale.abs().max(1.0);
    if value.abs() <= tol {
        Ok(0.0)
    } else if (value - scale).abs() <= tol {
        Ok(1.0)
    } else {
        Err(Error::InvalidPredictorValue { row, value, scale })
    }
}

/// Per-pattern coefficients of the two-point model: the conditional law of
/// the missing responses given the observed ones, both given `x`.
#[derive(Debug, Clone)]
struct TwoPointCond {
    gc: GaussCond,
    /// `Σ_oo⁻¹ β_o`
    w: Vector,
    /// `β_oᵀ Σ_oo⁻¹ β_o`
    quad: f64,
    beta_o: Vector,
    beta_m: Vector,
}

impl TwoPointCond {
    fn new(pattern: &MissPattern, beta: &Mat, sigma: &Mat, tag: usize) -> Result<Self> {
        // Coordinate 0 is x; responses are shifted by one.
        let obs: Vec<usize> = pattern.obs_idx.iter().filter(|&&c| c > 0).map(|c| c - 1).collect();
        let mis: Vec<usize> = pattern.mis_idx.iter().filter(|&&c| c > 0).map(|c| c - 1).collect();
        let gc = GaussCond::new(sigma, &obs, &mis, tag)?;
        let b = beta.column(0).into_owned();
        let beta_o = pick(&b, &obs);
        let beta_m = pick(&b, &mis);
        let w = &gc.oo_inv * &beta_o;
        let quad = beta_o.dot(&w);
        Ok(TwoPointCond { gc, w, quad, beta_o, beta_m })
    }

    fn log_q(&self, y_o: &Vector, c: f64) -> f64 {
        c * self.w.dot(y_o) - 0.5 * c * c * self.quad
    }

    /// Full response vector with missing entries replaced by `E(y_m | y_o, x)`.
    fn fill(&self, y: &Vector, y_o: &Vector, x: f64) -> Vector {
        let mut e = y.clone();
        let m = &self.beta_m * x + &self.gc.k * (y_o - &self.beta_o * x);
        for (a, &i) in self.gc.mis.iter().enumerate() {
            e[i] = m[a];
        }
        e
    }

    fn row_moments(&self, y: &Vector, pi_tilde: f64, c: f64, out: &mut MomentAccumulators) {
        let y_o = pick(y, &self.gc.obs);
        let e_c = self.fill(y, &y_o, c);
        let e_0 = self.fill(y, &y_o, 0.0);
        if pi_tilde > 0.0 {
            out.a1.ger(pi_tilde, &e_c, &e_c, 1.0);
        }
        if pi_tilde < 1.0 {
            out.a1.ger(1.0 - pi_tilde, &e_0, &e_0, 1.0);
        }
        add_scattered(&mut out.a1, &self.gc.schur, &self.gc.mis, 1.0);
        let mut col = out.a2.column_mut(0);
        col.axpy(c * pi_tilde, &e_c, 1.0);
        out.a3[(0, 0)] += c * c * pi_tilde;
        out.a4[0] += c * pi_tilde;
        out.n_eff += 1;
    }
}

/// `P(X = c | observed)` for one row of the two-point model.
pub fn bernoulli_posterior(
    row: &Vector,
    pattern: &MissPattern,
    beta: &Mat,
    sigma: &Mat,
    pi: f64,
    scale: f64,
) -> Result<f64> {
    if beta.ncols() != 1 {
        return Err(Error::InvalidArgument("the two-point model needs exactly one predictor".into()));
    }
    if !pattern.mis_idx.contains(&0) {
        return check_two_point(row[0], scale, 0);
    }
    let tp = TwoPointCond::new(pattern, beta, sigma, 0)?;
    let y = row.rows(1, row.len() - 1).into_owned();
    let y_o = pick(&y, &tp.gc.obs);
    Ok(sigmoid_logit_shift(pi, tp.log_q(&y_o, scale)))
}

/// Moments of one row of the two-point model given its posterior `π̃`.
pub fn bernoulli_cond_moments(
    row: &Vector,
    pattern: &MissPattern,
    beta: &Mat,
    sigma: &Mat,
    pi_tilde: f64,
    scale: f64,
) -> Result<MomentAccumulators> {
    if beta.ncols() != 1 {
        return Err(Error::InvalidArgument("the two-point model needs exactly one predictor".into()));
    }
    let tp = TwoPointCond::new(pattern, beta, sigma, 0)?;
    let y = row.rows(1, row.len() - 1).into_owned();
    let mut out = MomentAccumulators::zeros(1, beta.nrows());
    tp.row_moments(&y, pi_tilde, scale, &mut out);
    Ok(out)
}

/// Posterior `π̃_i` of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliPosterior {
    pub pi_tilde: Vec<f64>,
}

/// E-step engine over a fixed dataset; the pattern table is built once.
#[derive(Debug, Clone)]
pub struct EStep<'a> {
    ds: &'a ObservedDataset,
    table: PatternTable,
}

impl<'a> EStep<'a> {
    pub fn new(ds: &'a ObservedDataset) -> Self {
        EStep { ds, table: ds.group_patterns() }
    }

    pub fn dataset(&self) -> &ObservedDataset {
        self.ds
    }

    pub fn patterns(&self) -> &PatternTable {
        &self.table
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.beta.shape() != (self.ds.r(), self.ds.p()) || params.sigma.shape() != (self.ds.r(), self.ds.r()) {
            return Err(Error::ShapeMismatch("parameters do not match the dataset".into()));
        }
        if let PredictorParams::Bernoulli { .. } = params.predictor {
            if self.ds.p() != 1 {
                return Err(Error::InvalidArgument("the two-point model needs exactly one predictor".into()));
            }
        }
        Ok(())
    }

    /// Sums of conditional moments over all rows.
    pub fn accumulate(&self, params: &ModelParams) -> Result<MomentAccumulators> {
        self.check_params(params)?;
        match &params.predictor {
            PredictorParams::Normal { mu, sigma } => {
                let jp = joint_unchecked(&params.beta, &params.sigma, mu, sigma);
                self.accumulate_normal(&jp)
            }
            PredictorParams::Bernoulli { scale, .. } => {
                let post = self.posterior(params)?;
                self.accumulate_two_point(params, &post, *scale)
            }
        }
    }

    fn accumulate_normal(&self, jp: &NormalJointParams) -> Result<MomentAccumulators> {
        let d = self.ds.p() + self.ds.r();
        let mut first = Vector::zeros(d);
        let mut second = Mat::zeros(d, d);
        for (g, group) in self.table.groups.iter().enumerate() {
            let gc = GaussCond::new(&jp.sigma_tilde, &group.pattern.obs_idx, &group.pattern.mis_idx, g)?;
            normal_rows(&gc, jp, group.rows.iter().map(|&i| self.ds.row_values(i)), &mut first, &mut second);
        }
        Ok(MomentAccumulators::from_joint(self.ds.p(), &first, &second, self.ds.n()))
    }

    fn accumulate_two_point(
        &self,
        params: &ModelParams,
        post: &BernoulliPosterior,
        scale: f64,
    ) -> Result<MomentAccumulators> {
        let mut out = MomentAccumulators::zeros(1, self.ds.r());
        for (g, group) in self.table.groups.iter().enumerate() {
            let tp = TwoPointCond::new(&group.pattern, &params.beta, &params.sigma, g)?;
            for &i in &group.rows {
                let y = self.ds.y().row(i).transpose();
                tp.row_moments(&y, post.pi_tilde[i], scale, &mut out);
            }
        }
        out.a1 = symmetrize(&out.a1);
        Ok(out)
    }

    /// `π̃_i` for every row of a two-point model.
    pub fn posterior(&self, params: &ModelParams) -> Result<BernoulliPosterior> {
        self.check_params(params)?;
        let (pi, scale) = match params.predictor {
            PredictorParams::Bernoulli { pi, scale } => (pi, scale),
            PredictorParams::Normal { .. } => {
                return Err(Error::InvalidArgument("posterior needs the two-point model".into()))
            }
        };
        let mut pi_tilde = alloc::vec![0.0; self.ds.n()];
        for (g, group) in self.table.groups.iter().enumerate() {
            if !group.pattern.mis_idx.contains(&0) {
                for &i in &group.rows {
                    pi_tilde[i] = check_two_point(self.ds.x()[(i, 0)], scale, i)?;
                }
                continue;
            }
            let tp = TwoPointCond::new(&group.pattern, &params.beta, &params.sigma, g)?;
            for &i in &group.rows {
                let y = self.ds.y().row(i).transpose();
                let y_o = pick(&y, &tp.gc.obs);
                pi_tilde[i] = sigmoid_logit_shift(pi, tp.log_q(&y_o, scale));
            }
        }
        Ok(BernoulliPosterior { pi_tilde })
    }

    /// Observed-data log-likelihood `Σ_i log f(d_{i,obs})`.
    pub fn observed_loglik(&self, params: &ModelParams) -> Result<f64> {
        self.check_params(params)?;
        match &params.predictor {
            PredictorParams::Normal { mu, sigma } => {
                let jp = joint_unchecked(&params.beta, &params.sigma, mu, sigma);
                self.loglik_normal(&jp)
            }
            PredictorParams::Bernoulli { pi, scale } => self.loglik_two_point(params, *pi, *scale),
        }
    }

    fn loglik_normal(&self, jp: &NormalJointParams) -> Result<f64> {
        let mut total = 0.0;
        for (g, group) in self.table.groups.iter().enumerate() {
            let gc = GaussCond::new(&jp.sigma_tilde, &group.pattern.obs_idx, &group.pattern.mis_idx, g)?;
            let mu_o = pick(&jp.mu_tilde, &gc.obs);
            for &i in &group.rows {
                let d_o = pick(&self.ds.row_values(i), &gc.obs);
                total += gc.log_density(&mu_o, &d_o);
            }
        }
        Ok(total)
    }

    fn loglik_two_point(&self, params: &ModelParams, pi: f64, scale: f64) -> Result<f64> {
        let mut total = 0.0;
        let b = params.beta.column(0).into_owned();
        for (g, group) in self.table.groups.iter().enumerate() {
            let obs_y: Vec<usize> = group.pattern.obs_idx.iter().filter(|&&c| c > 0).map(|c| c - 1).collect();
            let mis_y: Vec<usize> = group.pattern.mis_idx.iter().filter(|&&c| c > 0).map(|c| c - 1).collect();
            let gc = GaussCond::new(&params.sigma, &obs_y, &mis_y, g)?;
            let beta_o = pick(&b, &obs_y);
            let zero = Vector::zeros(obs_y.len());
            let mean_c = &beta_o * scale;
            for &i in &group.rows {
                let y_o = pick(&self.ds.y().row(i).transpose(), &obs_y);
                let l_c = gc.log_density(&mean_c, &y_o);
                let l_0 = gc.log_density(&zero, &y_o);
                total += if group.pattern.mis_idx.contains(&0) {
                    log_mix(pi, l_c, l_0)
                } else if check_two_point(self.ds.x()[(i, 0)], scale, i)? == 1.0 {
                    libm::log(pi) + l_c
                } else {
                    libm::log1p(-pi) + l_0
                };
            }
        }
        Ok(total)
    }
}

fn log_mix(pi: f64, l1: f64, l0: f64) -> f64 {
    if pi <= 0.0 {
        return l0;
    }
    if pi >= 1.0 {
        return l1;
    }
    let a = libm::log(pi) + l1;
    let b = libm::log1p(-pi) + l0;
    let m = a.max(b);
    m + libm::log(libm::exp(a - m) + libm::exp(b - m))
}

/// [`EStep::accumulate`] for a one-off call.
pub fn accumulate(ds: &ObservedDataset, params: &ModelParams) -> Result<MomentAccumulators> {
    EStep::new(ds).accumulate(params)
}

/// Observed-data log-likelihood of the joint normal model.
pub fn observed_loglik_normal(ds: &ObservedDataset, jp: &NormalJointParams) -> Result<f64> {
    EStep::new(ds).loglik_normal(jp)
}

/// `Q(φ | φ)`: expected complete-data log-likelihood given accumulators that
/// were computed at `params` itself.
pub fn expected_complete_loglik(acc: &MomentAccumulators, params: &ModelParams) -> Result<f64> {
    let n = acc.n_eff as f64;
    let r = params.r() as f64;
    let chol = params.sigma.clone().cholesky().ok_or(Error::NotPd)?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
    let b = &params.beta;
    let resid = &acc.a1 - &acc.a2 * b.transpose() - b * acc.a2.transpose() + b * &acc.a3 * b.transpose();
    let q2 = -0.5 * n * log_det - 0.5 * chol.solve(&resid).trace() - 0.5 * n * r * libm::log(2.0 * PI);
    let q1 = match &params.predictor {
        PredictorParams::Normal { mu, sigma } => {
            let p = mu.len() as f64;
            let chol = sigma.clone().cholesky().ok_or(Error::NotPd)?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| libm::log(*v)).sum::<f64>();
            let m = &acc.a3 - &acc.a4 * mu.transpose() - mu * acc.a4.transpose() + mu * mu.transpose() * n;
            -0.5 * n * p * libm::log(2.0 * PI) - 0.5 * n * log_det - 0.5 * chol.solve(&m).trace()
        }
        PredictorParams::Bernoulli { pi, scale } => {
            let s = acc.a4[0] / scale;
            xlogy(s, *pi) + xlogy(n - s, 1.0 - pi)
        }
    };
    Ok(q1 + q2)
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * libm::log(y)
    }
}
