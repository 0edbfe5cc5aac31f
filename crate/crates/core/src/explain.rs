//! Local hazard ratios: the change in log relative risk when a reference
//! person is perturbed, summarised across independently trained models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    encode_history_with, predictor_index, predictor_vector, CentringSpec, CodeEvent, CodeKind, Cohort, MonthStamp,
    Person, Sex, PREDICTOR_DIM, PREDICTOR_NAMES,
};
use crate::coxtrain::{Encoder, TrainError, TrainedModel};
use crate::risknet::EncodedPerson;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("no models supplied")]
    NoModels,
    #[error("unknown predictor {0:?}")]
    UnknownPredictor(String),
    #[error("predictor {0:?} is an interaction and follows from its factors")]
    DerivedPredictor(String),
    #[error("non-finite value for predictor {0:?}")]
    NonFinite(String),
    #[error("code {0:?} is not in the model vocabulary")]
    UnknownCode(String),
    #[error("invalid month {0}")]
    Month(u8),
    #[error("empty perturbation list")]
    Empty,
    #[error("perturbation line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Number of non-interaction predictors; the rest are products of these.
const BASE_PREDICTORS: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationKind {
    /// No change; the local HR is exactly 1.
    Reference,
    /// Sets one predictor on its encoded scale: age in years from the mean,
    /// deprivation in quintiles from the reference, 0/1 for flags.
    SetPredictor { field: String, value: f64 },
    /// Adds one code; defaults to one month before the index date.
    AddCode {
        code: String,
        code_kind: CodeKind,
        #[serde(default)]
        year: Option<i32>,
        #[serde(default)]
        month: Option<u8>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub label: String,
    #[serde(flatten)]
    pub kind: PerturbationKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Predictor,
    DiagnosisProcedure,
    Medication,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Predictor => "predictor",
            Category::DiagnosisProcedure => "diagnosis_procedure",
            Category::Medication => "medication",
        }
    }
}

impl Perturbation {
    pub fn set_predictor(label: impl Into<String>, field: impl Into<String>, value: f64) -> Self {
        Self {
            label: label.into(),
            kind: PerturbationKind::SetPredictor {
                field: field.into(),
                value,
            },
        }
    }

    pub fn add_code(label: impl Into<String>, code: impl Into<String>, code_kind: CodeKind) -> Self {
        Self {
            label: label.into(),
            kind: PerturbationKind::AddCode {
                code: code.into(),
                code_kind,
                year: None,
                month: None,
            },
        }
    }

    pub fn reference() -> Self {
        Self {
            label: "reference".into(),
            kind: PerturbationKind::Reference,
        }
    }

    pub fn category(&self) -> Category {
        match &self.kind {
            PerturbationKind::AddCode { code_kind, .. } if code_kind.is_medication() => Category::Medication,
            PerturbationKind::AddCode { .. } => Category::DiagnosisProcedure,
            _ => Category::Predictor,
        }
    }
}

/// Parses one perturbation per non-blank line.
pub fn parse_perturbations(text: &str) -> Result<Vec<Perturbation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ExplainError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Predictor fields a perturbation may set.
pub fn settable_predictors() -> &'static [&'static str] {
    &PREDICTOR_NAMES[..BASE_PREDICTORS]
}

fn with_interactions(mut v: Vec<f64>) -> Vec<f64> {
    let (age, dm, af, bp, ll, apac) = (v[0], v[6], v[7], v[8], v[9], v[10]);
    v[11] = age * bp;
    v[12] = age * dm;
    v[13] = age * af;
    v[14] = bp * dm;
    v[15] = apac * dm;
    v[16] = bp * ll;
    v
}

/// Mean age, deprivation quintile 3, reference categories, no history.
pub fn baseline_person() -> EncodedPerson {
    EncodedPerson {
        seq: Default::default(),
        predictors: vec![0.0; PREDICTOR_DIM],
    }
}

/// The reference person with `perturbation` applied, encoded for one model.
pub fn perturbed_person(encoder: &Encoder, perturbation: &Perturbation) -> Result<EncodedPerson> {
    let mut person = baseline_person();
    match &perturbation.kind {
        PerturbationKind::Reference => {}
        PerturbationKind::SetPredictor { field, value } => {
            let k = predictor_index(field).ok_or_else(|| ExplainError::UnknownPredictor(field.clone()))?;
            if k >= BASE_PREDICTORS {
                return Err(ExplainError::DerivedPredictor(field.clone()));
            }
            if !value.is_finite() {
                return Err(ExplainError::NonFinite(field.clone()));
            }
            person.predictors[k] = *value;
            person.predictors = with_interactions(person.predictors);
        }
        PerturbationKind::AddCode {
            code,
            code_kind,
            year,
            month,
        } => {
            if encoder.vocabulary.token_id(code).is_none() {
                return Err(ExplainError::UnknownCode(code.clone()));
            }
            let default = MonthStamp::from_ordinal(encoder.index_date.ordinal() - 1);
            let stamp = MonthStamp::new(year.unwrap_or(default.year), month.unwrap_or(default.month));
            if !(1..=12).contains(&stamp.month) {
                return Err(ExplainError::Month(stamp.month));
            }
            let mut carrier = Person::reference("perturbed", Sex::F, encoder.centring.age_mean);
            carrier.events.push(CodeEvent::new(stamp.year, stamp.month, code.clone(), *code_kind));
            person.seq = encode_history_with(&carrier, &encoder.vocabulary, encoder.index_date, encoder.max_events);
        }
    }
    Ok(person)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalHrRow {
    pub label: String,
    pub category: Category,
    pub n_exposed: Option<usize>,
    pub mean_hr: f64,
    /// Absent with fewer than two models.
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_models: usize,
}

/// Mean of `exp(Δ)` and the interval `exp(mean Δ ± 1.96 sd Δ)`.
pub fn summarise_deltas(deltas: &[f64]) -> (f64, Option<(f64, f64)>) {
    let n = deltas.len() as f64;
    let mean_hr = deltas.iter().map(|d| d.exp()).sum::<f64>() / n;
    if deltas.len() < 2 {
        return (mean_hr, None);
    }
    let mean = deltas.iter().sum::<f64>() / n;
    let sd = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean_hr, Some(((mean - 1.96 * sd).exp(), (mean + 1.96 * sd).exp())))
}

/// `g(perturbed) - g(reference)` for every model.
pub fn deltas(models: &[TrainedModel], perturbation: &Perturbation) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(ExplainError::NoModels);
    }
    models
        .par_iter()
        .map(|m| {
            let base = m.risk.predict_g(&baseline_person())?;
            let pert = m.risk.predict_g(&perturbed_person(&m.encoder, perturbation)?)?;
            Ok(pert - base)
        })
        .collect()
}

pub fn local_hr(models: &[TrainedModel], perturbation: &Perturbation) -> Result<LocalHrRow> {
    let d = deltas(models, perturbation)?;
    let (mean_hr, ci) = summarise_deltas(&d);
    Ok(LocalHrRow {
        label: perturbation.label.clone(),
        category: perturbation.category(),
        n_exposed: None,
        mean_hr,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        n_models: models.len(),
    })
}

/// Persons in `cohort` already exposed to the perturbation: carriers of an
/// added code, or persons whose predictor equals the set value. `None` for
/// age and the reference.
pub fn n_exposed(cohort: &Cohort, centring: &CentringSpec, perturbation: &Perturbation) -> Option<usize> {
    match &perturbation.kind {
        PerturbationKind::Reference => None,
        PerturbationKind::AddCode { code, .. } => Some(cohort.persons.iter().filter(|p| p.carries(code)).count()),
        PerturbationKind::SetPredictor { field, value } => {
            let k = predictor_index(field).filter(|&k| k > 0 && k < BASE_PREDICTORS)?;
            Some(
                cohort
                    .persons
                    .iter()
                    .filter(|p| predictor_vector(p, centring).0[k] == *value)
                    .count(),
            )
        }
    }
}

/// Rows grouped by category, each group sorted by descending mean HR
/// (ties by label) and cut to its first `top_k`.
pub fn hr_table(mut rows: Vec<LocalHrRow>, top_k: usize) -> Result<Vec<LocalHrRow>> {
    if rows.is_empty() {
        return Err(ExplainError::Empty);
    }
    rows.sort_by(|a, b| {
        a.category
            .cmp(&b.category)
            .then(b.mean_hr.total_cmp(&a.mean_hr))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut out = Vec::with_capacity(rows.len());
    let mut taken = 0;
    let mut current = None;
    for row in rows {
        if current != Some(row.category) {
            current = Some(row.category);
            taken = 0;
        }
        if taken < top_k {
            out.push(row);
            taken += 1;
        }
    }
    Ok(out)
}

pub fn write_hr_csv(rows: &[LocalHrRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("label,category,n_exposed,hr,ci_low,ci_high,n_models\n");
    for r in rows {
        let label = if r.label.contains([',', '"', '\n']) {
            format!("\"{}\"", r.label.replace('"', "\"\""))
        } else {
            r.label.clone()
        };
        s.push_str(&format!(
            "{label},{},{},{},{},{},{}\n",
            r.category.name(),
            r.n_exposed.map_or(String::new(), |n| n.to_string()),
            r.mean_hr,
            opt(r.ci_low),
            opt(r.ci_high),
            r.n_models
        ));
    }
    s
}

/// HR for a `step`-year age increase evaluated from each grid age offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeGridHr {
    pub step: f64,
    pub grid: Vec<f64>,
    /// Mean over models at each grid point.
    pub hr: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn age_grid_hr(models: &[TrainedModel], step: f64, grid: &[f64]) -> Result<AgeGridHr> {
    if grid.is_empty() {
        return Err(ExplainError::Empty);
    }
    let mut hr = Vec::with_capacity(grid.len());
    for &a in grid {
        let from = Perturbation::set_predictor("", "age", a);
        let to = Perturbation::set_predictor("", "age", a + step);
        let d0 = deltas(models, &from)?;
        let d1 = deltas(models, &to)?;
        let ratios: Vec<f64> = d1.iter().zip(&d0).map(|(b, a)| b - a).collect();
        hr.push(summarise_deltas(&ratios).0);
    }
    let mean = hr.iter().sum::<f64>() / hr.len() as f64;
    let min = hr.iter().copied().fold(f64::INFINITY, f64::min);
    let max = hr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(AgeGridHr {
        step,
        grid: grid.to_vec(),
        hr,
        mean,
        min,
        max,
    })
}
