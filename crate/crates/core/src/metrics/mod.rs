//! Discrimination, calibration and explained-variation metrics, plus the
//! combined 5x2 cross-validation F test.

pub mod special;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::cph::{fit_cph, CphError, CphOptions};
use crate::survival::{check_len, kaplan_meier, BaselineSurvival, StepFunction, SurvivalError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("too few {what}: need {need}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("no censoring support at t={0}")]
    NoCensoringSupport(f64),
    #[error("degenerate variance")]
    DegenerateVariance,
    #[error("fold table: {0}")]
    Folds(String),
    #[error("D statistic fit failed: {0}")]
    Cph(#[from] CphError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `κ = √(8/π)`.
pub fn kappa() -> f64 {
    (8.0 / std::f64::consts::PI).sqrt()
}

fn check_inputs(g: &[f64], times: &[f64], events: &[bool]) -> Result<()> {
    check_len("times", g.len(), times.len())?;
    check_len("events", g.len(), events.len())?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("predictions"));
    }
    if times.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("times"));
    }
    Ok(())
}

/// Concordant, tied and comparable pair counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub tied: u64,
    pub comparable: u64,
}

impl PairCounts {
    pub fn c_index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(MetricsError::NoComparablePairs);
        }
        Ok((2 * self.concordant + self.tied) as f64 / (2 * self.comparable) as f64)
    }
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `≤ i`.
    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Pair counts in O(n log n). A pair is comparable when the earlier time is
/// an event, or times tie and only the first is an event.
pub fn concordance_counts(g: &[f64], times: &[f64], events: &[bool]) -> Result<PairCounts> {
    check_inputs(g, times, events)?;
    let n = g.len();
    let mut sorted_g: Vec<f64> = g.to_vec();
    sorted_g.sort_by(f64::total_cmp);
    sorted_g.dedup();
    let rank = |v: f64| sorted_g.partition_point(|&s| s < v) + 1;
    let ranks: Vec<usize> = g.iter().map(|&v| rank(v)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick(vec![0; sorted_g.len() + 1]);
    let mut inserted = 0u64;
    let mut counts = PairCounts::default();
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let mut j = i;
        while j < n && times[order[j]] == t {
            j += 1;
        }
        let group = &order[i..j];
        for &k in group.iter().filter(|&&k| !events[k]) {
            tree.add(ranks[k]);
            inserted += 1;
        }
        for &k in group.iter().filter(|&&k| events[k]) {
            let below = tree.prefix(ranks[k] - 1);
            let at_or_below = tree.prefix(ranks[k]);
            counts.concordant += below;
            counts.tied += at_or_below - below;
            counts.comparable += inserted;
        }
        for &k in group.iter().filter(|&&k| events[k]) {
            tree.add(ranks[k]);
            inserted += 1;
        }
        i = j;
    }
    Ok(counts)
}

pub fn harrell_c(g: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    concordance_counts(g, times, events)?.c_index()
}

/// O(n²) enumeration of [`concordance_counts`], kept as a test oracle.
pub fn concordance_counts_brute(g: &[f64], times: &[f64], events: &[bool]) -> Result<PairCounts> {
    check_inputs(g, times, events)?;
    let mut counts = PairCounts::default();
    for i in 0..g.len() {
        if !events[i] {
            continue;
        }
        for j in 0..g.len() {
            let comparable = times[i] < times[j] || (times[i] == times[j] && !events[j]);
            if i == j || !comparable {
                continue;
            }
            counts.comparable += 1;
            if g[i] > g[j] {
                counts.concordant += 1;
            } else if g[i] == g[j] {
                counts.tied += 1;
            }
        }
    }
    Ok(counts)
}

/// Ascending ranks with ties sharing their mean rank (1-based).
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mid;
        }
        i = j;
    }
    ranks
}

/// Royston–Sauerbrei D: the Cox coefficient of scaled Blom normal scores of
/// the prognostic index.
pub fn d_statistic(g: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_inputs(g, times, events)?;
    let n = g.len();
    if n < 4 {
        return Err(MetricsError::TooFew { what: "persons", need: 4, got: n });
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events < 2 {
        return Err(MetricsError::TooFew { what: "events", need: 2, got: n_events });
    }
    if g.iter().all(|&v| v == g[0]) {
        return Ok(0.0);
    }
    let normal = Normal::standard();
    let k = kappa();
    let rows: Vec<[f64; 1]> = midranks(g)
        .into_iter()
        .map(|r| [normal.inverse_cdf((r - 0.375) / (n as f64 + 0.25)) / k])
        .collect();
    let model = fit_cph(&rows, times, events, &CphOptions::default())?;
    Ok(model.beta[0])
}

/// `R² = (D²/κ²) / (π²/6 + D²/κ²)`.
pub fn r_squared_from_d(d: f64) -> f64 {
    let a = d * d / (8.0 / std::f64::consts::PI);
    a / (std::f64::consts::PI.powi(2) / 6.0 + a)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrierWeighting {
    /// Inverse probability of censoring weights.
    #[default]
    Ipcw,
    /// Drops persons censored before `t` and weights the rest equally.
    Unweighted,
}

/// Kaplan–Meier estimate `Ĝ` of the censoring distribution.
#[derive(Clone, Debug)]
pub struct CensoringWeights {
    km: StepFunction,
}

impl CensoringWeights {
    pub fn new(times: &[f64], events: &[bool]) -> Result<Self> {
        let censored: Vec<bool> = events.iter().map(|&e| !e).collect();
        Ok(Self {
            km: kaplan_meier(times, &censored)?,
        })
    }

    pub fn at(&self, t: f64) -> f64 {
        self.km.value(t)
    }

    pub fn before(&self, t: f64) -> f64 {
        self.km.value_before(t)
    }
}

/// Brier score at `t` for predicted event probabilities by `t`.
pub fn brier(t: f64, predicted: &[f64], times: &[f64], events: &[bool], weighting: BrierWeighting) -> Result<f64> {
    check_inputs(predicted, times, events)?;
    let weights = CensoringWeights::new(times, events)?;
    brier_with(&weights, t, predicted, times, events, weighting)
}

pub fn brier_with(
    weights: &CensoringWeights,
    t: f64,
    predicted: &[f64],
    times: &[f64],
    events: &[bool],
    weighting: BrierWeighting,
) -> Result<f64> {
    let n = predicted.len();
    if n == 0 {
        return Err(MetricsError::TooFew { what: "persons", need: 1, got: 0 });
    }
    let mut total = 0.0;
    match weighting {
        BrierWeighting::Ipcw => {
            let g_t = weights.at(t);
            let mut at_risk = 0.0;
            for i in 0..n {
                if times[i] <= t {
                    if events[i] {
                        total += (1.0 - predicted[i]).powi(2) / weights.before(times[i]);
                    }
                } else {
                    at_risk += predicted[i].powi(2);
                }
            }
            if g_t <= 0.0 {
                return Err(MetricsError::NoCensoringSupport(t));
            }
            total += at_risk / g_t;
            Ok(total / n as f64)
        }
        BrierWeighting::Unweighted => {
            let mut used = 0usize;
            for i in 0..n {
                if times[i] <= t {
                    if events[i] {
                        total += (1.0 - predicted[i]).powi(2);
                        used += 1;
                    }
                } else {
                    total += predicted[i].powi(2);
                    used += 1;
                }
            }
            if used == 0 {
                return Err(MetricsError::NoCensoringSupport(t));
            }
            Ok(total / used as f64)
        }
    }
}

/// Distinct event times up to and including `horizon`, ascending.
pub fn event_time_grid(times: &[f64], events: &[bool], horizon: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..times.len())
        .filter(|&i| events[i] && times[i] <= horizon)
        .map(|i| times[i])
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Trapezoid average of `brier(t)` over `[0, horizon]` across the event
/// time grid. The score is held constant before the first and after the
/// last grid time.
pub fn integrated_brier<F>(
    mut predict: F,
    times: &[f64],
    events: &[bool],
    horizon: f64,
    weighting: BrierWeighting,
) -> Result<f64>
where
    F: FnMut(f64, &mut [f64]),
{
    check_len("events", times.len(), events.len())?;
    if !(horizon > 0.0) {
        return Err(MetricsError::NonFinite("horizon"));
    }
    let grid = event_time_grid(times, events, horizon);
    if grid.is_empty() {
        return Err(MetricsError::TooFew { what: "event times", need: 1, got: 0 });
    }
    let weights = CensoringWeights::new(times, events)?;
    let mut pred = vec![0.0; times.len()];
    let mut scores = Vec::with_capacity(grid.len());
    for &t in &grid {
        predict(t, &mut pred);
        scores.push(brier_with(&weights, t, &pred, times, events, weighting)?);
    }
    Ok(trapezoid_average(&grid, &scores, horizon))
}

pub(crate) fn trapezoid_average(grid: &[f64], values: &[f64], horizon: f64) -> f64 {
    let mut area = values[0] * grid[0];
    for k in 1..grid.len() {
        area += 0.5 * (values[k - 1] + values[k]) * (grid[k] - grid[k - 1]);
    }
    area += values[values.len() - 1] * (horizon - grid[grid.len() - 1]);
    area / horizon
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub decile: usize,
    pub n: usize,
    pub events: usize,
    pub mean_predicted: f64,
    pub observed: f64,
}

impl CalibrationRow {
    pub fn binomial_se(&self) -> f64 {
        let p = self.mean_predicted;
        (p * (1.0 - p) / self.n as f64).sqrt()
    }

    pub fn within_ses(&self, k: f64) -> bool {
        (self.mean_predicted - self.observed).abs() <= k * self.binomial_se()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationRow {
    pub decile: usize,
    pub events: usize,
    pub share: f64,
}

/// Index groups of ten near-equal contiguous bins by ascending prediction
/// (stable in person order).
pub fn decile_groups(predicted: &[f64]) -> Result<Vec<Vec<usize>>> {
    let n = predicted.len();
    if n < 10 {
        return Err(MetricsError::TooFew { what: "persons", need: 10, got: n });
    }
    if predicted.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("predictions"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]));
    Ok((0..10).map(|k| order[k * n / 10..(k + 1) * n / 10].to_vec()).collect())
}

pub fn calibration_deciles(predicted: &[f64], times: &[f64], events: &[bool], horizon: f64) -> Result<Vec<CalibrationRow>> {
    check_inputs(predicted, times, events)?;
    let groups = decile_groups(predicted)?;
    groups
        .iter()
        .enumerate()
        .map(|(k, group)| {
            let t: Vec<f64> = group.iter().map(|&i| times[i]).collect();
            let e: Vec<bool> = group.iter().map(|&i| events[i]).collect();
            let km = kaplan_meier(&t, &e)?;
            Ok(CalibrationRow {
                decile: k + 1,
                n: group.len(),
                events: group.iter().filter(|&&i| events[i] && times[i] <= horizon).count(),
                mean_predicted: group.iter().map(|&i| predicted[i]).sum::<f64>() / group.len() as f64,
                observed: 1.0 - km.value(horizon),
            })
        })
        .collect()
}

pub fn discrimination_deciles(predicted: &[f64], times: &[f64], events: &[bool], horizon: f64) -> Result<Vec<DiscriminationRow>> {
    check_inputs(predicted, times, events)?;
    let groups = decile_groups(predicted)?;
    let counts: Vec<usize> = groups
        .iter()
        .map(|g| g.iter().filter(|&&i| events[i] && times[i] <= horizon).count())
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::TooFew { what: "events", need: 1, got: 0 });
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| DiscriminationRow {
            decile: k + 1,
            events: c,
            share: c as f64 / total as f64,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_squared: f64,
    pub d_statistic: f64,
    pub harrell_c: f64,
    pub integrated_brier: f64,
    pub calibration_deciles: Vec<CalibrationRow>,
    pub discrimination_deciles: Vec<DiscriminationRow>,
}

impl MetricsReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            r_squared: self.r_squared,
            d_statistic: self.d_statistic,
            harrell_c: self.harrell_c,
            integrated_brier: self.integrated_brier,
        }
    }
}

/// Full report for log relative risks `g` interpreted through `baseline`.
pub fn evaluate(
    g: &[f64],
    baseline: &BaselineSurvival,
    times: &[f64],
    events: &[bool],
    horizon: f64,
    weighting: BrierWeighting,
) -> Result<MetricsReport> {
    check_inputs(g, times, events)?;
    let d = d_statistic(g, times, events)?;
    let risk5: Vec<f64> = g.iter().map(|&v| baseline.risk(v, horizon)).collect();
    let ibs = integrated_brier(
        |t, out| {
            let s0 = baseline.survival(t);
            for (o, &v) in out.iter_mut().zip(g) {
                *o = crate::survival::five_year_risk(v, baseline.g_ref, s0);
            }
        },
        times,
        events,
        horizon,
        weighting,
    )?;
    Ok(MetricsReport {
        r_squared: r_squared_from_d(d),
        d_statistic: d,
        harrell_c: harrell_c(g, times, events)?,
        integrated_brier: ibs,
        calibration_deciles: calibration_deciles(&risk5, times, events, horizon)?,
        discrimination_deciles: discrimination_deciles(&risk5, times, events, horizon)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub r_squared: f64,
    pub d_statistic: f64,
    pub harrell_c: f64,
    pub integrated_brier: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    RSquared,
    DStatistic,
    HarrellC,
    IntegratedBrier,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::RSquared, Metric::DStatistic, Metric::HarrellC, Metric::IntegratedBrier];

    pub fn name(self) -> &'static str {
        match self {
            Metric::RSquared => "r_squared",
            Metric::DStatistic => "d_statistic",
            Metric::HarrellC => "harrell_c",
            Metric::IntegratedBrier => "integrated_brier",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::RSquared => "R-squared",
            Metric::DStatistic => "D statistic",
            Metric::HarrellC => "Harrell's C",
            Metric::IntegratedBrier => "Integrated Brier score",
        }
    }

    pub fn of(self, v: &MetricValues) -> f64 {
        match self {
            Metric::RSquared => v.r_squared,
            Metric::DStatistic => v.d_statistic,
            Metric::HarrellC => v.harrell_c,
            Metric::IntegratedBrier => v.integrated_brier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub replication: usize,
    pub fold: usize,
    pub deep: MetricValues,
    pub cph: MetricValues,
}

/// Metric values of two models on the ten folds of a 5x2 design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResults {
    folds: Vec<FoldRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FTest {
    pub f: f64,
    pub p_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl FoldResults {
    pub fn new(mut folds: Vec<FoldRecord>) -> Result<Self> {
        folds.sort_by_key(|f| (f.replication, f.fold));
        let expected: Vec<(usize, usize)> = (0..5).flat_map(|r| (0..2).map(move |f| (r, f))).collect();
        let got: Vec<(usize, usize)> = folds.iter().map(|f| (f.replication, f.fold)).collect();
        if got != expected {
            return Err(MetricsError::Folds(format!("expected 5 replications x 2 folds, got {got:?}")));
        }
        Ok(Self { folds })
    }

    pub fn folds(&self) -> &[FoldRecord] {
        &self.folds
    }

    /// Deep-minus-CPH differences laid out by replication and fold.
    pub fn differences(&self, metric: Metric) -> [[f64; 2]; 5] {
        let mut p = [[0.0; 2]; 5];
        for f in &self.folds {
            p[f.replication][f.fold] = metric.of(&f.deep) - metric.of(&f.cph);
        }
        p
    }

    pub fn f_test(&self, metric: Metric) -> Result<FTest> {
        f_test_5x2(&self.differences(metric))
    }

    /// Mean over folds with a normal interval `mean ± 1.96·sd/√10`.
    pub fn summary(&self, metric: Metric, deep: bool) -> Summary {
        let xs: Vec<f64> = self
            .folds
            .iter()
            .map(|f| metric.of(if deep { &f.deep } else { &f.cph }))
            .collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let half = 1.96 * sd / n.sqrt();
        Summary {
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
        }
    }
}

/// Combined 5x2cv F test on per-fold differences.
pub fn f_test_5x2(p: &[[f64; 2]; 5]) -> Result<FTest> {
    if p.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("fold differences"));
    }
    let num: f64 = p.iter().flatten().map(|v| v * v).sum();
    let den: f64 = p
        .iter()
        .map(|[a, b]| {
            let m = (a + b) / 2.0;
            (a - m).powi(2) + (b - m).powi(2)
        })
        .sum();
    if den == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    let f = num / (2.0 * den);
    Ok(FTest {
        f,
        p_value: special::f_upper_tail(f, 10.0, 5.0),
    })
}
