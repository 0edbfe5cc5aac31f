//! Classical Cox proportional hazards fit on the fixed predictor layout.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{predictor_vector, CentringSpec, Cohort, PredictorVector, PREDICTOR_NAMES};
use crate::survival::{breslow_baseline, five_year_risk, BaselineSurvival, SurvivalError};

#[derive(Debug, Error)]
pub enum CphError {
    #[error("need more persons ({n}) than covariates ({p})")]
    TooFewPersons { n: usize, p: usize },
    #[error("no events")]
    NoEvents,
    #[error("row {row} has {got} covariates, expected {expected}")]
    RowLength { row: usize, expected: usize, got: usize },
    #[error("input length mismatch: {0}")]
    Length(String),
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("covariate {name} is constant")]
    Constant { name: String },
    #[error("monotone likelihood: coefficient for {name} diverges (beta {beta:.3e})")]
    Separation { name: String, beta: f64 },
    #[error("information matrix is singular at iteration {iteration}")]
    Singular { iteration: usize },
    #[error("no convergence after {} iterations; trace (loglik, max|score|): {trace:?}", trace.len())]
    NoConvergence { trace: Vec<(f64, f64)> },
    #[error(transparent)]
    Survival(#[from] SurvivalError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CphOptions {
    pub ties: Ties,
    pub max_iter: usize,
    /// Names used in errors and tables; defaults to `x0, x1, ...`.
    pub names: Option<Vec<String>>,
    /// Horizon (days) at which the five-year risk is read off the baseline.
    pub horizon_days: f64,
    /// Keep fits whose coefficients diverge (monotone likelihood) and list
    /// them in [`CphModel::diverged`] instead of failing.
    pub allow_separation: bool,
}

impl Default for CphOptions {
    fn default() -> Self {
        Self {
            ties: Ties::Efron,
            max_iter: 50,
            names: None,
            horizon_days: 1826.0,
            allow_separation: false,
        }
    }
}

/// |beta| beyond which a coefficient is treated as diverging.
const SEPARATION_BOUND: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CphModel {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// Inverse observed information, row-major `P×P`.
    pub covariance: Vec<Vec<f64>>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub ties: Ties,
    /// Breslow baseline at the zero covariate vector.
    pub baseline: BaselineSurvival,
    pub horizon_days: f64,
    pub centring: Option<CentringSpec>,
    /// Predictors whose coefficient exceeded the divergence bound.
    #[serde(default)]
    pub diverged: Vec<String>,
}

impl AsRef<[f64]> for PredictorVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

/// Partial log-likelihood, score and observed information at `beta`.
/// `order` lists persons by descending time.
fn evaluate(
    x: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    order: &[usize],
    beta: &DVector<f64>,
    ties: Ties,
) -> Evaluation {
    let p = beta.len();
    let eta: Vec<f64> = x
        .iter()
        .map(|row| row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut t0 = 0.0;
        let mut t1 = DVector::zeros(p);
        let mut t2 = DMatrix::zeros(p, p);
        let mut d = 0usize;
        let mut j = i;
        while j < order.len() && times[order[j]] == t {
            let k = order[j];
            let w = (eta[k] - shift).exp();
            let xk = DVector::from_column_slice(&x[k]);
            s0 += w;
            s1.axpy(w, &xk, 1.0);
            s2.ger(w, &xk, &xk, 1.0);
            if events[k] {
                d += 1;
                t0 += w;
                t1.axpy(w, &xk, 1.0);
                t2.ger(w, &xk, &xk, 1.0);
                loglik += eta[k] - shift;
                score += &xk;
            }
            j += 1;
        }
        for l in 0..d {
            let f = match ties {
                Ties::Efron => l as f64 / d as f64,
                Ties::Breslow => 0.0,
            };
            let den = s0 - f * t0;
            let mean = (&s1 - &t1 * f) / den;
            loglik -= den.ln();
            score -= &mean;
            info += (&s2 - &t2 * f) / den - &mean * mean.transpose();
        }
        i = j;
    }
    Evaluation { loglik, score, info }
}

pub fn fit_cph<R: AsRef<[f64]>>(
    rows: &[R],
    times: &[f64],
    events: &[bool],
    opts: &CphOptions,
) -> Result<CphModel, CphError> {
    let n = rows.len();
    if times.len() != n || events.len() != n {
        return Err(CphError::Length(format!(
            "{n} rows, {} times, {} events",
            times.len(),
            events.len()
        )));
    }
    let p = rows.first().map_or(0, |r| r.as_ref().len());
    for (row, r) in rows.iter().enumerate() {
        if r.as_ref().len() != p {
            return Err(CphError::RowLength {
                row,
                expected: p,
                got: r.as_ref().len(),
            });
        }
        if r.as_ref().iter().any(|v| !v.is_finite()) {
            return Err(CphError::NonFinite("covariates"));
        }
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(CphError::NonFinite("times"));
    }
    if n <= p {
        return Err(CphError::TooFewPersons { n, p });
    }
    if !events.iter().any(|&e| e) {
        return Err(CphError::NoEvents);
    }
    let names: Vec<String> = match &opts.names {
        Some(names) if names.len() == p => names.clone(),
        Some(names) => {
            return Err(CphError::Length(format!("{} names for {p} covariates", names.len())))
        }
        None => (0..p).map(|k| format!("x{k}")).collect(),
    };

    // Centring leaves beta unchanged and keeps the weights well scaled.
    let means: Vec<f64> = (0..p)
        .map(|k| rows.iter().map(|r| r.as_ref()[k]).sum::<f64>() / n as f64)
        .collect();
    for k in 0..p {
        let first = rows[0].as_ref()[k];
        if rows.iter().all(|r| r.as_ref()[k] == first) {
            return Err(CphError::Constant { name: names[k].clone() });
        }
    }
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.as_ref().iter().zip(&means).map(|(v, m)| v - m).collect())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut beta = DVector::zeros(p);
    let mut current = evaluate(&x, times, events, &order, &beta, opts.ties);
    let mut trace = vec![(current.loglik, current.score.amax())];
    let mut converged = current.score.amax() < 1e-8;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let chol = current
            .info
            .clone()
            .cholesky()
            .ok_or(CphError::Singular { iteration: iterations })?;
        let mut step = chol.solve(&current.score);
        let mut next;
        let mut halvings = 0;
        loop {
            let candidate = &beta + &step;
            next = evaluate(&x, times, events, &order, &candidate, opts.ties);
            if next.loglik.is_finite() && next.loglik >= current.loglik - 1e-12 * current.loglik.abs() {
                beta = candidate;
                break;
            }
            halvings += 1;
            if halvings > 40 {
                return Err(CphError::NoConvergence { trace });
            }
            step /= 2.0;
        }
        let rel = (next.loglik - current.loglik).abs() / current.loglik.abs().max(f64::MIN_POSITIVE);
        converged = next.score.amax() < 1e-8 || rel < 1e-10;
        current = next;
        trace.push((current.loglik, current.score.amax()));
    }
    let diverged: Vec<usize> = (0..p).filter(|&k| beta[k].abs() > SEPARATION_BOUND).collect();
    if let (Some(&k), false) = (diverged.first(), opts.allow_separation) {
        return Err(CphError::Separation {
            name: names[k].clone(),
            beta: beta[k],
        });
    }
    if !converged && diverged.is_empty() {
        return Err(CphError::NoConvergence { trace });
    }
    let covariance = current
        .info
        .clone()
        .cholesky()
        .ok_or(CphError::Singular { iteration: iterations })?
        .inverse();
    let beta: Vec<f64> = beta.iter().copied().collect();
    let g: Vec<f64> = rows
        .iter()
        .map(|r| r.as_ref().iter().zip(&beta).map(|(a, b)| a * b).sum())
        .collect();
    let baseline = breslow_baseline(&g, times, events, 0.0)?;
    let diverged = diverged.iter().map(|&k| names[k].clone()).collect();
    Ok(CphModel {
        names,
        beta,
        covariance: (0..p)
            .map(|i| (0..p).map(|j| covariance[(i, j)]).collect())
            .collect(),
        log_likelihood: current.loglik,
        iterations,
        ties: opts.ties,
        baseline,
        horizon_days: opts.horizon_days,
        centring: None,
        diverged,
    })
}

/// Fits the fixed predictor layout on a cohort.
pub fn fit_cph_cohort(cohort: &Cohort, centring: &CentringSpec, ties: Ties) -> Result<CphModel, CphError> {
    fit_cph_cohort_with(cohort, centring, CphOptions { ties, ..CphOptions::default() })
}

/// [`fit_cph_cohort`] with explicit options; names and horizon come from the
/// cohort.
pub fn fit_cph_cohort_with(cohort: &Cohort, centring: &CentringSpec, base: CphOptions) -> Result<CphModel, CphError> {
    let rows: Vec<PredictorVector> = cohort
        .persons
        .iter()
        .map(|p| predictor_vector(p, centring))
        .collect();
    let opts = CphOptions {
        names: Some(PREDICTOR_NAMES.iter().map(|s| s.to_string()).collect()),
        horizon_days: cohort.horizon_days as f64,
        ..base
    };
    let mut model = fit_cph(&rows, &cohort.times(), &cohort.events(), &opts)?;
    model.centring = Some(*centring);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardRatioRow {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl HazardRatioRow {
    pub fn from_beta(name: impl Into<String>, beta: f64, se: f64) -> Self {
        Self {
            name: name.into(),
            beta,
            se,
            hr: beta.exp(),
            ci_low: (beta - 1.96 * se).exp(),
            ci_high: (beta + 1.96 * se).exp(),
        }
    }
}

impl CphModel {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|k| self.covariance[k][k].sqrt()).collect()
    }

    pub fn hazard_ratios(&self) -> Vec<HazardRatioRow> {
        self.names
            .iter()
            .zip(&self.beta)
            .zip(self.standard_errors())
            .map(|((name, &b), se)| HazardRatioRow::from_beta(name.clone(), b, se))
            .collect()
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    /// `(g, five-year risk)` for a covariate vector.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let g = self.linear_predictor(x);
        let s0 = self.baseline.survival(self.horizon_days);
        (g, five_year_risk(g, 0.0, s0))
    }
}

/// CSV with header `predictor,beta,se,hr,ci_low,ci_high`.
pub fn write_hazard_ratio_csv<W: Write>(rows: &[HazardRatioRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "predictor,beta,se,hr,ci_low,ci_high")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.name, r.beta, r.se, r.hr, r.ci_low, r.ci_high)?;
    }
    Ok(())
}
