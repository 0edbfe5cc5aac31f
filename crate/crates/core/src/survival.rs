//! Step-function survival estimators shared by the deep model, the Cox
//! comparator and the metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no events: baseline survival is undefined")]
    NoEvents,
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), SurvivalError> {
    if expected == got {
        Ok(())
    } else {
        Err(SurvivalError::LengthMismatch { what, expected, got })
    }
}

/// Right-continuous step function starting at 1: `value(t)` is the value
/// after the last jump at or before `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn value(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    /// Left limit at `t`: only jumps strictly before `t` count.
    pub fn value_before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }
}

/// Kaplan–Meier survival estimate; jumps only at event times.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction, SurvivalError> {
    check_len("events", times.len(), events.len())?;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut surv = 1.0;
    let mut out = StepFunction {
        times: Vec::new(),
        values: Vec::new(),
    };
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0usize;
        while j < order.len() && times[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            surv *= 1.0 - d as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(surv);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(out)
}

/// Baseline survival `S0(t) = exp(-H0(t))` anchored at a reference log
/// relative risk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSurvival {
    pub g_ref: f64,
    pub curve: StepFunction,
}

impl BaselineSurvival {
    pub fn survival(&self, t: f64) -> f64 {
        self.curve.value(t)
    }

    /// Probability of an event by `t` for log relative risk `g`.
    pub fn risk(&self, g: f64, t: f64) -> f64 {
        five_year_risk(g, self.g_ref, self.survival(t))
    }

    /// `(day, survival)` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("day,survival\n");
        for (t, v) in self.curve.times.iter().zip(&self.curve.values) {
            s.push_str(&format!("{t},{v}\n"));
        }
        s
    }
}

/// Breslow estimator: at each distinct event time the hazard increment is
/// the number of events over `Σ exp(g_j - g_ref)` across everyone with
/// `t_j ≥ t_i` (tied times included).
pub fn breslow_baseline(
    g: &[f64],
    times: &[f64],
    events: &[bool],
    g_ref: f64,
) -> Result<BaselineSurvival, SurvivalError> {
    check_len("times", g.len(), times.len())?;
    check_len("events", g.len(), events.len())?;
    if !events.iter().any(|&e| e) {
        return Err(SurvivalError::NoEvents);
    }
    if g.iter().any(|v| !v.is_finite()) || !g_ref.is_finite() {
        return Err(SurvivalError::NonFinite { what: "log relative risk" });
    }
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    // Walk from the latest time down, accumulating the risk-set sum, then
    // emit increments in ascending time.
    let mut increments = Vec::new();
    let mut denom = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0usize;
        while j < order.len() && times[order[j]] == t {
            denom += (g[order[j]] - g_ref).exp();
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            increments.push((t, d as f64 / denom));
        }
        i = j;
    }
    increments.reverse();
    let mut h = 0.0;
    let mut curve = StepFunction {
        times: Vec::with_capacity(increments.len()),
        values: Vec::with_capacity(increments.len()),
    };
    for (t, dh) in increments {
        h += dh;
        curve.times.push(t);
        curve.values.push((-h).exp());
    }
    Ok(BaselineSurvival { g_ref, curve })
}

/// `1 - S0^{exp(g - g_ref)}`, evaluated without cancellation for small risks.
pub fn five_year_risk(g: f64, g_ref: f64, s0_at_horizon: f64) -> f64 {
    -((g - g_ref).exp() * s0_at_horizon.ln()).exp_m1()
}
