//! Structured (JSON) and plain-text renderings of fits, selections and
//! simulation summaries.

use std::fmt::Write as _;

use emenv_core::data::ObservedDataset;
use emenv_core::em::EnvelopeFit;
use emenv_core::estep::{PredictorModel, PredictorParams};
use emenv_core::inference::BootstrapResult;
use emenv_core::linalg::Vector;
use emenv_core::select::{bic_q, SelectionMethod, SelectionReport};
use emenv_core::sim::{Calibration, ErrorFamily, PredictorFamily, ScenarioResult, USelection};
use emenv_core::Mat;
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the seed of a run came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Given,
    Entropy,
}

#[derive(Debug, Clone)]
pub struct RunMeta {
    pub command: &'static str,
    pub seed: u64,
    pub seed_source: SeedSource,
}

impl RunMeta {
    fn header(&self) -> Value {
        json!({
            "schema": format!("emenv.{}/{}", self.command, SCHEMA_VERSION),
            "command": self.command,
            "seed": self.seed,
            "seed_source": match self.seed_source { SeedSource::Given => "given", SeedSource::Entropy => "entropy" },
        })
    }
}

pub fn mat_json(m: &Mat) -> Value {
    let data: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    json!({ "rows": m.nrows(), "cols": m.ncols(), "data": data })
}

fn vec_json(v: &Vector) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(a), Value::Object(b)) = (&mut base, extra) {
        a.extend(b);
    }
    base
}

pub fn model_label(fit: &EnvelopeFit) -> String {
    if fit.is_standard() {
        "standard MLE (u=r)".to_string()
    } else {
        format!("envelope (u={})", fit.u)
    }
}

fn predictor_json(p: &PredictorParams) -> Value {
    match p {
        PredictorParams::Normal { mu, sigma } => json!({ "model": "normal", "mu": vec_json(mu), "sigma": mat_json(sigma) }),
        PredictorParams::Bernoulli { pi, scale } => json!({ "model": "bernoulli", "pi": pi, "scale": scale }),
    }
}

pub fn model_name(m: PredictorModel) -> String {
    match m {
        PredictorModel::Normal => "normal".into(),
        PredictorModel::Bernoulli { scale } => format!("bernoulli(scale={scale})"),
    }
}

pub fn selection_json(s: &SelectionReport) -> Value {
    let candidates: Vec<Value> = s
        .candidates
        .iter()
        .map(|c| json!({ "u": c.u, "mean_q2": c.mean_q2, "reps_used": c.reps_used, "failures": c.failures }))
        .collect();
    json!({
        "chosen_u": s.chosen_u,
        "method": match s.method { SelectionMethod::BicQ => "bicq", SelectionMethod::Bootstrap => "bootstrap" },
        "bic_q": s.criterion,
        "bootstrap_candidates": candidates,
        "fell_back_to_bic": s.fell_back_to_bic,
        "threshold": s.threshold,
        "reps": s.reps,
    })
}

pub fn bootstrap_json(b: &BootstrapResult) -> Value {
    json!({
        "reps": b.reps,
        "successes": b.successes,
        "failures": b.failures,
        "unreliable": b.unreliable,
        "se": mat_json(&b.se),
        "ci_lower": mat_json(&b.ci_lower),
        "ci_upper": mat_json(&b.ci_upper),
        "p_value": mat_json(&b.p_value),
    })
}

fn fit_json(fit: &EnvelopeFit) -> Value {
    json!({
        "label": model_label(fit),
        "n": fit.n,
        "p": fit.p(),
        "r": fit.r(),
        "u": fit.u,
        "beta": mat_json(&fit.beta),
        "sigma": mat_json(&fit.sigma),
        "gamma": mat_json(&fit.gamma),
        "gamma0": mat_json(&fit.gamma0),
        "eta": mat_json(&fit.eta),
        "omega": mat_json(&fit.omega),
        "omega0": mat_json(&fit.omega0),
        "predictor": predictor_json(&fit.predictor),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "loglik_trace": fit.loglik_trace,
        "q_value": fit.q_value,
        "bic_q": bic_q(fit),
    })
}

pub fn fit_report(
    meta: &RunMeta,
    ds: &ObservedDataset,
    fit: &EnvelopeFit,
    selection: Option<&SelectionReport>,
    boot: Option<&BootstrapResult>,
) -> Value {
    let (mx, my) = ds.missing_rates();
    merge(
        meta.header(),
        json!({
            "data": {
                "n": ds.n(), "p": ds.p(), "r": ds.r(),
                "predictors": ds.x_names(), "responses": ds.y_names(),
                "missing_rate_predictors": mx, "missing_rate_responses": my,
            },
            "model": model_name(fit.predictor.model()),
            "fit": fit_json(fit),
            "selection": selection.map(selection_json),
            "bootstrap": boot.map(bootstrap_json),
        }),
    )
}

pub fn select_report(meta: &RunMeta, ds: &ObservedDataset, model: PredictorModel, s: &SelectionReport) -> Value {
    merge(
        meta.header(),
        json!({
            "data": { "n": ds.n(), "p": ds.p(), "r": ds.r(), "predictors": ds.x_names(), "responses": ds.y_names() },
            "model": model_name(model),
            "selection": selection_json(s),
        }),
    )
}

fn scenario_json(res: &ScenarioResult) -> Value {
    let s = &res.spec;
    let errors = match s.errors {
        ErrorFamily::Normal => "normal",
        ErrorFamily::T5 => "t5",
        ErrorFamily::Uniform => "uniform",
        ErrorFamily::Laplace => "laplace",
        ErrorFamily::Zero => "zero",
    };
    let predictors = match s.predictors {
        PredictorFamily::Normal => json!({ "family": "normal" }),
        PredictorFamily::TwoPoint { scale, pi } => json!({ "family": "two-point", "scale": scale, "pi": pi }),
        PredictorFamily::T5 => json!({ "family": "t5" }),
    };
    let selection = match s.selection {
        USelection::TrueU => json!({ "method": "true-u" }),
        USelection::Bic => json!({ "method": "bicq" }),
        USelection::Bootstrap { b, threshold } => json!({ "method": "bootstrap", "reps": b, "threshold": threshold }),
    };
    let calibration = match s.missingness.calibration {
        Calibration::Target { x_rate, y_rate } => json!({ "mode": "target", "x_rate": x_rate, "y_rate": y_rate }),
        Calibration::Verbatim => json!({ "mode": "verbatim" }),
        Calibration::Intercept(b) => json!({ "mode": "intercept", "value": b }),
    };
    json!({
        "name": s.name, "n": s.n, "r": s.r, "p": s.p, "u": s.u,
        "errors": errors, "predictors": predictors,
        "omega_scale": s.omega_scale, "omega0_scale": s.omega0_scale,
        "selection": selection, "working_model": model_name(s.model),
        "reps": s.reps, "tol": s.tol, "max_iter": s.max_iter,
        "missingness": {
            "calibration": calibration,
            "remapped": s.missingness.remap,
            "mechanisms": res.mechanisms,
            "never_delete_referenced": true,
        },
    })
}

pub fn simulate_report(meta: &RunMeta, res: &ScenarioResult) -> Value {
    let summary: Vec<Value> = res
        .summaries
        .iter()
        .map(|(k, m)| {
            json!({
                "estimator": k.label(), "min": m.min, "q1": m.q1, "median": m.median,
                "mean": m.mean, "q3": m.q3, "max": m.max, "count": m.count,
            })
        })
        .collect();
    let replicates: Vec<Value> = res
        .records
        .iter()
        .map(|r| {
            let failures: Vec<Value> =
                r.failures.iter().map(|(k, e)| json!({ "estimator": k.label(), "error": e.to_string() })).collect();
            json!({
                "index": r.index, "mse": r.mse, "chosen_u": r.chosen_u,
                "em_iterations": r.em_iterations, "em_converged": r.em_converged,
                "missing_rate_predictors": r.missing_rate_x, "missing_rate_responses": r.missing_rate_y,
                "failures": failures,
            })
        })
        .collect();
    merge(
        meta.header(),
        json!({
            "scenario": scenario_json(res),
            "estimators": emenv_core::sim::EstimatorKind::ALL.iter().map(|k| k.label()).collect::<Vec<_>>(),
            "summary": summary,
            "u_accuracy": { "em-envelope": res.u_accuracy[0], "cc-envelope": res.u_accuracy[1], "full-envelope": res.u_accuracy[2] },
            "true_beta": mat_json(&res.params.beta),
            "replicates": replicates,
        }),
    )
}

pub fn to_json_string(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values are always serialisable");
    s.push('\n');
    s
}

fn sci(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.4e}")
    }
}

/// Estimator rows with min, Q1, median, mean, Q3 and max columns.
pub fn mse_table(res: &ScenarioResult, delimiter: char) -> String {
    let mut out = ["estimator", "min", "q1", "median", "mean", "q3", "max", "count"].join(&delimiter.to_string());
    out.push('\n');
    for (k, m) in &res.summaries {
        let cells =
            [k.label().to_string(), sci(m.min), sci(m.q1), sci(m.median), sci(m.mean), sci(m.q3), sci(m.max), m.count.to_string()];
        out.push_str(&cells.join(&delimiter.to_string()));
        out.push('\n');
    }
    out
}

pub fn simulate_text(meta: &RunMeta, res: &ScenarioResult) -> String {
    let s = &res.spec;
    let mut out = String::new();
    let _ = writeln!(out, "scenario {} (n={}, r={}, p={}, u={}, reps={}, seed={})", s.name, s.n, s.r, s.p, s.u, s.reps, meta.seed);
    if s.missingness.remap {
        let _ = writeln!(out, "mechanism columns remapped modulo p and r:");
        for m in &res.mechanisms {
            let _ = writeln!(out, "  {m}");
        }
    }
    let _ = writeln!(out, "true-u rate: em {:.3}, cc {:.3}, full {:.3}", res.u_accuracy[0], res.u_accuracy[1], res.u_accuracy[2]);
    out.push_str(&mse_table(res, '\t'));
    out
}

fn write_matrix(out: &mut String, m: &Mat, rows: &[String], cols: &[String]) {
    let _ = write!(out, "{:>12}", "");
    for c in cols {
        let _ = write!(out, " {c:>14}");
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(out, "{r:>12}");
        for j in 0..m.ncols() {
            let _ = write!(out, " {:>14.6e}", m[(i, j)]);
        }
        out.push('\n');
    }
}

fn selection_text(out: &mut String, s: &SelectionReport) {
    let method = match s.method {
        SelectionMethod::BicQ => "BIC_Q",
        SelectionMethod::Bootstrap => "bootstrap q2",
    };
    let _ = writeln!(out, "selected u = {} by {method}{}", s.chosen_u, if s.fell_back_to_bic { " (fell back to BIC_Q)" } else { "" });
    for c in &s.candidates {
        let _ = writeln!(out, "  u={:<3} mean q2 {:.6} ({} used, {} failed)", c.u, c.mean_q2, c.reps_used, c.failures);
    }
    for (u, v) in s.criterion.iter().enumerate() {
        let _ = writeln!(out, "  u={u:<3} BIC_Q {v:.6}");
    }
}

pub fn fit_text(
    meta: &RunMeta,
    ds: &ObservedDataset,
    fit: &EnvelopeFit,
    selection: Option<&SelectionReport>,
    boot: Option<&BootstrapResult>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} fit, {} predictor model, seed {}", model_label(fit), model_name(fit.predictor.model()), meta.seed);
    let _ = writeln!(out, "n={} p={} r={} iterations={} converged={}", fit.n, fit.p(), fit.r(), fit.iterations, fit.converged);
    if let Some(ll) = fit.loglik_trace.last() {
        let _ = writeln!(out, "observed log-likelihood {ll:.8}");
    }
    let _ = writeln!(out, "BIC_Q {:.6}", bic_q(fit));
    if let Some(s) = selection {
        selection_text(&mut out, s);
    }
    out.push_str("beta:\n");
    write_matrix(&mut out, &fit.beta, ds.y_names(), ds.x_names());
    if let Some(b) = boot {
        let _ = writeln!(
            out,
            "bootstrap: {} of {} replicates succeeded{}",
            b.successes,
            b.reps,
            if b.unreliable { " (unreliable: more than 10% failed)" } else { "" }
        );
        let _ = writeln!(out, "{:>12} {:>12} {:>14} {:>12} {:>14} {:>14} {:>10}", "response", "predictor", "estimate", "se", "2.5%", "97.5%", "p");
        for j in 0..fit.p() {
            for i in 0..fit.r() {
                let _ = writeln!(
                    out,
                    "{:>12} {:>12} {:>14.6e} {:>12.4e} {:>14.6e} {:>14.6e} {:>10.4}",
                    ds.y_names()[i],
                    ds.x_names()[j],
                    b.estimate[(i, j)],
                    b.se[(i, j)],
                    b.ci_lower[(i, j)],
                    b.ci_upper[(i, j)],
                    b.p_value[(i, j)]
                );
            }
        }
    }
    out
}

pub fn select_text(meta: &RunMeta, s: &SelectionReport) -> String {
    let mut out = format!("seed {}\n", meta.seed);
    selection_text(&mut out, s);
    out
}
