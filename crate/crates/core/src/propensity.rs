//! Propensity model `e = P(Z=1|X)` fitted by penalized logistic maximum
//! likelihood, and the probability / linear-propensity scores it produces.
//!
//! The solver is Newton's method (equivalently iteratively reweighted least
//! squares) with step halving. Covariates are centered and scaled internally;
//! the ridge penalty and all reported coefficients refer to the original
//! covariate scale, and the intercept is never penalized.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::stats::Histogram;

pub const PROB_FLOOR: f64 = 1e-12;

pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub ridge_lambda: f64,
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the per-unit gradient of the
    /// penalized log-likelihood.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { ridge_lambda: 1e-6, max_iter: 50, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// `(intercept)` followed by the encoded covariate names.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub ridge_lambda: f64,
    pub tol: f64,
    pub log_likelihood: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub schema_digest: String,
    pub dataset_digest: String,
}

impl PropensityModel {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<PropensityModel> {
        let m: PropensityModel = serde_json::from_str(text)?;
        if m.names.len() != m.coefficients.len() || m.names.first().map(String::as_str) != Some(INTERCEPT) {
            return Err(Error::Schema("model names and coefficients disagree".into()));
        }
        Ok(m)
    }

    /// Linear predictor `intercept + beta . x`.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Logistic log-likelihood of `z` given rows of `x`, minus the ridge term
/// `lambda/2 * |beta|^2` over the non-intercept coefficients.
#[derive(Debug, Clone)]
pub struct LogisticProblem<'a> {
    x: &'a [f64],
    z: &'a [u8],
    width: usize,
    ridge_lambda: f64,
}

impl<'a> LogisticProblem<'a> {
    pub fn new(x: &'a [f64], z: &'a [u8], width: usize, ridge_lambda: f64) -> LogisticProblem<'a> {
        assert_eq!(x.len(), z.len() * width, "matrix shape");
        LogisticProblem { x, z, width, ridge_lambda }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.width..(i + 1) * self.width]
    }

    fn eta(&self, beta: &[f64], i: usize) -> f64 {
        beta[0] + beta[1..].iter().zip(self.row(i)).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn penalized_log_likelihood(&self, beta: &[f64]) -> f64 {
        let ll: f64 = (0..self.z.len()).map(|i| bernoulli_ll(self.eta(beta, i), self.z[i])).sum();
        ll - 0.5 * self.ridge_lambda * beta[1..].iter().map(|b| b * b).sum::<f64>()
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.width + 1];
        for i in 0..self.z.len() {
            let r = self.z[i] as f64 - sigmoid(self.eta(beta, i));
            g[0] += r;
            for (gj, v) in g[1..].iter_mut().zip(self.row(i)) {
                *gj += r * v;
            }
        }
        for (gj, b) in g[1..].iter_mut().zip(&beta[1..]) {
            *gj -= self.ridge_lambda * b;
        }
        g
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let t = eta.exp();
        t / (1.0 + t)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn bernoulli_ll(eta: f64, z: u8) -> f64 {
    if z == 1 {
        -softplus(-eta)
    } else {
        -softplus(eta)
    }
}

pub fn logit(e: f64) -> f64 {
    e.ln() - (-e).ln_1p()
}

/// Inverse logit clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn clamped_probability(eta: f64) -> f64 {
    sigmoid(eta).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

struct Standardized {
    x: Vec<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

fn standardize(x: &[f64], n: usize, p: usize) -> Standardized {
    let mut center = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            center[j] += x[i * p + j];
        }
    }
    for c in &mut center {
        *c /= n as f64;
    }
    let mut scale = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            let d = x[i * p + j] - center[j];
            scale[j] += d * d;
        }
    }
    for s in &mut scale {
        *s = (*s / n as f64).sqrt();
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            out.push((x[i * p + j] - center[j]) / scale[j]);
        }
    }
    Standardized { x: out, center, scale }
}

/// Raw outcome of the Newton iterations, on the original covariate scale.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub log_likelihood: f64,
    pub message: Option<String>,
}

/// Maximize the penalized logistic log-likelihood for a row-major matrix.
pub fn fit_logistic(x: &[f64], z: &[u8], width: usize, opts: &FitOptions) -> Result<FitResult> {
    let n = z.len();
    let p = width;
    if n == 0 {
        return Err(Error::InvalidData("no units to fit".into()));
    }
    if !(opts.ridge_lambda >= 0.0) || !opts.ridge_lambda.is_finite() {
        return Err(Error::Config("ridge_lambda must be finite and >= 0".into()));
    }
    let st = standardize(x, n, p);
    let d = p + 1;
    // beta_j = gamma_j / s_j, so the original-scale ridge is lambda / s_j^2 here
    let mut penalty = vec![0.0; d];
    for j in 0..p {
        penalty[j + 1] = opts.ridge_lambda / (st.scale[j] * st.scale[j]);
    }

    let xs = &st.x;
    let eta_of = |g: &[f64], i: usize| -> f64 {
        g[0] + g[1..].iter().zip(&xs[i * p..(i + 1) * p]).map(|(a, b)| a * b).sum::<f64>()
    };
    let objective = |g: &[f64]| -> f64 {
        let ll: f64 = (0..n).map(|i| bernoulli_ll(eta_of(g, i), z[i])).sum();
        ll - 0.5 * g.iter().zip(&penalty).map(|(a, l)| l * a * a).sum::<f64>()
    };

    let treated = z.iter().filter(|&&v| v == 1).count() as f64;
    let mut gamma = vec![0.0; d];
    if treated > 0.0 && treated < n as f64 {
        let frac = treated / n as f64;
        gamma[0] = (frac / (1.0 - frac)).ln();
    }
    let mut obj = objective(&gamma);
    let mut converged = false;
    let mut message = None;
    let mut iterations = 0;
    let mut grad_norm;

    loop {
        let mut grad = vec![0.0; d];
        let mut hess = SymMatrix::zeros(d);
        let mut row = vec![0.0; d];
        row[0] = 1.0;
        for i in 0..n {
            row[1..].copy_from_slice(&xs[i * p..(i + 1) * p]);
            let e = sigmoid(eta_of(&gamma, i));
            let r = z[i] as f64 - e;
            for (gj, v) in grad.iter_mut().zip(&row) {
                *gj += r * v;
            }
            hess.rank_one_upper(&row, e * (1.0 - e));
        }
        for j in 0..d {
            grad[j] -= penalty[j] * gamma[j];
            hess.add(j, j, penalty[j]);
        }
        hess.mirror();
        grad_norm = original_gradient_norm(&grad, &st, n);

        let chol = match hess.cholesky() {
            Some(c) => c,
            None if iterations == 0 => {
                return Err(Error::Singular(
                    "information matrix is singular; a covariate is constant or collinear with others \
                     (use ridge_lambda > 0 or drop the column)"
                        .into(),
                ));
            }
            None => {
                message = Some(
                    "information matrix became singular during fitting; the arms appear separated by the covariates"
                        .into(),
                );
                break;
            }
        };
        let step = chol.solve(&grad);
        let step_size = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_norm <= opts.tol && step_size <= 1e-4 {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            message = Some(if grad_norm <= opts.tol {
                "gradient vanished but Newton steps stay large; the arms appear separated and the maximizer \
                 is not finite"
                    .into()
            } else {
                format!("no convergence within {} iterations", opts.max_iter)
            });
            break;
        }

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = gamma.iter().zip(&step).map(|(g, s)| g + t * s).collect();
            let trial_obj = objective(&trial);
            if trial_obj >= obj - 1e-12 * obj.abs() {
                gamma = trial;
                obj = trial_obj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            if grad_norm <= opts.tol {
                converged = true;
            } else {
                message = Some("line search could not improve the likelihood".into());
            }
            break;
        }
    }

    let mut beta = vec![0.0; d];
    beta[0] = gamma[0];
    for j in 0..p {
        beta[j + 1] = gamma[j + 1] / st.scale[j];
        beta[0] -= beta[j + 1] * st.center[j];
    }
    let problem = LogisticProblem::new(x, z, p, opts.ridge_lambda);
    let log_likelihood = problem.penalized_log_likelihood(&beta);
    Ok(FitResult { coefficients: beta, converged, iterations, final_gradient_norm: grad_norm, log_likelihood, message })
}

/// Max-norm of the per-unit gradient with respect to the original-scale
/// coefficients, given the gradient in standardized coordinates.
fn original_gradient_norm(grad: &[f64], st: &Standardized, n: usize) -> f64 {
    let mut norm = grad[0].abs();
    // d/d beta_j = s_j * d/d gamma_j + m_j * d/d gamma_0
    for j in 0..st.scale.len() {
        let g = st.scale[j] * grad[j + 1] + st.center[j] * grad[0];
        norm = norm.max(g.abs());
    }
    norm / n as f64
}

pub fn fit_propensity(ds: &Dataset, opts: &FitOptions) -> Result<PropensityModel> {
    let (treated, control) = ds.arm_counts();
    if treated == 0 || control == 0 {
        return Err(Error::InvalidData("propensity fit needs both arms".into()));
    }
    let fit = fit_logistic(ds.matrix(), ds.treatment(), ds.width(), opts)?;
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(ds.encoded_names().iter().cloned());
    Ok(PropensityModel {
        names,
        coefficients: fit.coefficients,
        converged: fit.converged,
        iterations: fit.iterations,
        final_gradient_norm: fit.final_gradient_norm,
        ridge_lambda: opts.ridge_lambda,
        tol: opts.tol,
        log_likelihood: fit.log_likelihood,
        message: fit.message,
        schema_digest: json_digest(ds.schema()),
        dataset_digest: ds.provenance().to_string(),
    })
}

/// Per-unit probability and linear propensity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub z: Vec<u8>,
    pub e: Vec<f64>,
    pub lp: Vec<f64>,
    pub model_digest: String,
    pub dataset_digest: String,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Build a table directly from linear propensities; `e` is derived.
    pub fn from_lp(ids: Vec<String>, z: Vec<u8>, lp: Vec<f64>) -> ScoreTable {
        let e: Vec<f64> = lp.iter().map(|&v| clamped_probability(v)).collect();
        let lp = e.iter().map(|&p| logit(p)).collect();
        ScoreTable { ids, z, e, lp, model_digest: String::new(), dataset_digest: String::new() }
    }

    pub fn arm_lp(&self, arm: u8) -> Vec<f64> {
        self.lp.iter().zip(&self.z).filter(|(_, &z)| z == arm).map(|(&v, _)| v).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["unit_id", "e", "lp"])?;
        for i in 0..self.len() {
            out.write_record([self.ids[i].clone(), self.e[i].to_string(), self.lp[i].to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn score(model: &PropensityModel, ds: &Dataset) -> Result<ScoreTable> {
    if model.coefficients.len() != ds.width() + 1 {
        return Err(Error::Schema(format!(
            "model has {} coefficients but the dataset encodes {} covariates plus intercept",
            model.coefficients.len(),
            ds.width()
        )));
    }
    if model.names[1..] != *ds.encoded_names() {
        return Err(Error::Schema("model covariate names differ from the dataset encoding".into()));
    }
    let e: Vec<f64> = (0..ds.n_units())
        .into_par_iter()
        .map(|i| clamped_probability(model.linear_predictor(ds.row(i))))
        .collect();
    let lp = e.par_iter().map(|&p| logit(p)).collect();
    Ok(ScoreTable {
        ids: ds.ids().to_vec(),
        z: ds.treatment().to_vec(),
        e,
        lp,
        model_digest: model.digest(),
        dataset_digest: ds.provenance().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedHistogram {
    pub treated: Histogram,
    pub control: Histogram,
}

/// Linear-propensity histograms of both arms over one grid spanning the
/// pooled range.
pub fn score_histograms(scores: &ScoreTable, bins: usize) -> PairedHistogram {
    let (lo, hi) = crate::stats::min_max(&scores.lp).unwrap_or((0.0, 0.0));
    let mut treated = Histogram::grid(lo, hi, bins);
    let mut control = treated.clone();
    for (&v, &z) in scores.lp.iter().zip(&scores.z) {
        if z == 1 {
            treated.add(v);
        } else {
            control.add(v);
        }
    }
    PairedHistogram { treated, control }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_of_point_three() {
        assert!((logit(0.3) - (-0.847_297_860_387_203_8)).abs() < 1e-12);
    }

    #[test]
    fn zero_model_scores_half() {
        assert_eq!(clamped_probability(0.0), 0.5);
        assert_eq!(logit(0.5), 0.0);
    }

    #[test]
    fn huge_predictor_is_clamped() {
        let e = clamped_probability(1e6);
        assert_eq!(e, 1.0 - PROB_FLOOR);
        assert!(logit(e).is_finite());
        assert!(logit(clamped_probability(-1e6)).is_finite());
    }

    #[test]
    fn closed_form_binary_covariate() {
        // x=0: 1 of 4 treated, x=1: 3 of 4 treated
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let z = [1, 0, 0, 0, 1, 1, 1, 0];
        let opts = FitOptions { ridge_lambda: 0.0, ..FitOptions::default() };
        let fit = fit_logistic(&x, &z, 1, &opts).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - (1.0f64 / 3.0).ln()).abs() < 1e-9);
        assert!((fit.coefficients[1] - 9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn separation_reports_nonconvergence() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let z = [0, 0, 0, 1, 1, 1];
        let opts = FitOptions { ridge_lambda: 0.0, ..FitOptions::default() };
        let fit = fit_logistic(&x, &z, 1, &opts).unwrap();
        assert!(!fit.converged);
        assert!(fit.message.is_some());
    }

    #[test]
    fn constant_column_needs_ridge() {
        let x = [1.0, 7.0, 2.0, 7.0, 3.0, 7.0, 4.0, 7.0];
        let z = [0, 1, 0, 1];
        let none = FitOptions { ridge_lambda: 0.0, ..FitOptions::default() };
        assert!(matches!(fit_logistic(&x, &z, 2, &none), Err(Error::Singular(_))));
        let fit = fit_logistic(&x, &z, 2, &FitOptions { ridge_lambda: 1.0, ..FitOptions::default() }).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[2].abs() < 1e-6);
    }

    #[test]
    fn penalized_fit_is_stationary() {
        let x = [0.3, -1.0, 1.2, 0.4, -0.7, 2.2, 0.1, 0.5, 1.9, -0.2, -1.5, 0.9];
        let z = [0, 1, 1, 0, 1, 0];
        let opts = FitOptions { ridge_lambda: 0.5, ..FitOptions::default() };
        let fit = fit_logistic(&x, &z, 2, &opts).unwrap();
        assert!(fit.converged);
        let g = LogisticProblem::new(&x, &z, 2, 0.5).gradient(&fit.coefficients);
        assert!(g.iter().all(|v| v.abs() < 1e-7), "{g:?}");
    }
}
