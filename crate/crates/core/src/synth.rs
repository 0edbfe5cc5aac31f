//! Synthetic cohorts with a known proportional-hazards truth.
//!
//! Every person draws predictors and a coded history independently. The
//! true log relative risk `g*` combines linear predictor effects, effects of
//! carrying particular codes, and an optional order effect that a model of
//! the predictors alone cannot represent. Event times are exponential with
//! rate `λ · exp(g*)`, so the true five-year risk has a closed form.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    predictor_index, predictor_vector, CentringSpec, CodeEvent, CodeKind, Cohort, Ethnicity,
    MonthStamp, Person, Sex,
};
use crate::metrics;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("ground truth io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ground truth line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("ground truth does not match the cohort: {0}")]
    Misaligned(String),
}

/// Extra log hazard for persons with an occurrence of `later` in a strictly
/// later month than some occurrence of `earlier`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEffect {
    pub later: String,
    pub earlier: String,
    pub log_hr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Censoring {
    pub admin_days: u32,
    pub dropout_rate_per_day: f64,
}

impl Default for Censoring {
    fn default() -> Self {
        Self {
            admin_days: 1826,
            dropout_rate_per_day: 0.0,
        }
    }
}

/// Marginal distributions of the pre-specified predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateDistribution {
    pub age_mean: f64,
    pub age_sd: f64,
    pub min_age: f64,
    pub max_age: f64,
    /// Probabilities for European, Maori, Pacific, Indian, Other.
    pub ethnicity: [f64; 5],
    /// Probabilities for deprivation quintiles 1 to 5.
    pub deprivation: [f64; 5],
    pub diabetes: f64,
    pub atrial_fibrillation: f64,
    pub bp_lowering: f64,
    pub lipid_lowering: f64,
    pub antiplatelet_anticoagulant: f64,
}

impl Default for CovariateDistribution {
    /// Roughly the women's column of a national primary-prevention cohort,
    /// with atrial fibrillation made more common so small cohorts still
    /// contain it.
    fn default() -> Self {
        Self {
            age_mean: 49.0,
            age_sd: 11.8,
            min_age: 30.0,
            max_age: 75.0,
            ethnicity: [0.698, 0.116, 0.053, 0.034, 0.099],
            deprivation: [0.239, 0.214, 0.199, 0.186, 0.162],
            diabetes: 0.059,
            atrial_fibrillation: 0.02,
            bp_lowering: 0.17,
            lipid_lowering: 0.097,
            antiplatelet_anticoagulant: 0.056,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_persons: usize,
    pub sex: Sex,
    /// Total number of distinct codes, named effect codes included.
    pub vocab_size: usize,
    /// Mean number of background code occurrences per person (Poisson).
    pub mean_events_per_person: f64,
    /// Background codes are drawn with weight `1 / rank^exponent`.
    pub code_frequency_exponent: f64,
    /// Log hazard ratio per predictor, keyed by predictor name.
    pub true_betas: BTreeMap<String, f64>,
    /// Log hazard ratio for carrying a code at least once.
    pub code_effects: BTreeMap<String, f64>,
    /// Probability that a person carries a named code, drawn separately
    /// from the background occurrences.
    pub code_prevalence: BTreeMap<String, f64>,
    pub sequence_effect: Option<SequenceEffect>,
    pub baseline_hazard_per_day: f64,
    pub censoring: Censoring,
    pub covariates: CovariateDistribution,
    /// Probability that a code occurrence also appears in the next month.
    pub spanning_probability: f64,
    pub index_date: MonthStamp,
    pub lookback_months: u32,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_persons: 1000,
            sex: Sex::F,
            vocab_size: 200,
            mean_events_per_person: 3.0,
            code_frequency_exponent: 1.0,
            true_betas: BTreeMap::new(),
            code_effects: BTreeMap::new(),
            code_prevalence: BTreeMap::new(),
            sequence_effect: None,
            baseline_hazard_per_day: 1e-5,
            censoring: Censoring::default(),
            covariates: CovariateDistribution::default(),
            spanning_probability: 0.05,
            index_date: MonthStamp::new(2012, 12),
            lookback_months: 60,
            seed: 0,
        }
    }
}

/// Log hazard ratios resembling a published women's CVD equation.
pub fn cvd_betas() -> BTreeMap<String, f64> {
    [
        ("age", 1.09f64),
        ("ethnicity_maori", 1.84),
        ("ethnicity_pacific", 1.40),
        ("ethnicity_indian", 0.910),
        ("ethnicity_other", 0.688),
        ("deprivation_quintile", 1.15),
        ("diabetes", 2.43),
        ("atrial_fibrillation", 2.54),
        ("bp_lowering", 2.24),
        ("lipid_lowering", 1.02),
        ("antiplatelet_anticoagulant", 1.48),
        ("age_x_bp_lowering", 0.975),
        ("age_x_diabetes", 0.983),
        ("age_x_atrial_fibrillation", 0.984),
        ("bp_lowering_x_diabetes", 0.878),
        ("antiplatelet_anticoagulant_x_diabetes", 0.804),
        ("bp_lowering_x_lipid_lowering", 0.858),
    ]
    .into_iter()
    .map(|(k, hr)| (k.to_owned(), hr.ln()))
    .collect()
}

impl GeneratorConfig {
    /// 20,000 persons, 200 codes, linear predictor effects only; roughly 4%
    /// of persons have an event within five years.
    pub fn linear_preset() -> Self {
        Self {
            n_persons: 20_000,
            true_betas: cvd_betas(),
            baseline_hazard_per_day: 8.5e-6,
            censoring: Censoring {
                admin_days: 1826,
                dropout_rate_per_day: 2e-5,
            },
            ..Self::default()
        }
    }

    /// [`GeneratorConfig::linear_preset`] plus the default order rule: extra
    /// log hazard `ln 1.5` when code `SEQ_A` appears in a later month than
    /// code `SEQ_B`.
    pub fn with_sequence_effect(mut self, log_hr: f64, prevalence: f64) -> Self {
        self.code_prevalence.insert("SEQ_A".into(), prevalence);
        self.code_prevalence.insert("SEQ_B".into(), prevalence);
        self.sequence_effect = Some(SequenceEffect {
            later: "SEQ_A".into(),
            earlier: "SEQ_B".into(),
            log_hr,
        });
        self
    }

    pub fn sequence_preset() -> Self {
        Self::linear_preset().with_sequence_effect(1.5f64.ln(), 0.3)
    }

    fn named_codes(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = self.code_effects.keys().cloned().collect();
        names.extend(self.code_prevalence.keys().cloned());
        if let Some(seq) = &self.sequence_effect {
            names.insert(seq.later.clone());
            names.insert(seq.earlier.clone());
        }
        names
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.baseline_hazard_per_day >= 0.0 && self.baseline_hazard_per_day.is_finite()) {
            return bad(format!("baseline_hazard_per_day {} must be finite and >= 0", self.baseline_hazard_per_day));
        }
        if !(self.censoring.dropout_rate_per_day >= 0.0 && self.censoring.dropout_rate_per_day.is_finite()) {
            return bad("dropout_rate_per_day must be finite and >= 0".into());
        }
        if self.censoring.admin_days == 0 {
            return bad("admin_days must be positive".into());
        }
        if !(self.mean_events_per_person >= 0.0 && self.mean_events_per_person.is_finite()) {
            return bad("mean_events_per_person must be finite and >= 0".into());
        }
        let named = self.named_codes();
        if self.vocab_size == 0 && (!named.is_empty() || self.mean_events_per_person > 0.0) {
            return bad("vocab_size is 0 but code effects or code occurrences were requested".into());
        }
        if named.len() > self.vocab_size {
            return bad(format!(
                "vocab_size {} is smaller than the {} named codes",
                self.vocab_size,
                named.len()
            ));
        }
        for name in self.true_betas.keys() {
            if predictor_index(name).is_none() {
                return bad(format!("unknown predictor {name:?} in true_betas"));
            }
        }
        for (code, &p) in &self.code_prevalence {
            if !prob(p) {
                return bad(format!("prevalence of {code} is {p}, not a probability"));
            }
        }
        let c = &self.covariates;
        for p in [c.diabetes, c.atrial_fibrillation, c.bp_lowering, c.lipid_lowering, c.antiplatelet_anticoagulant, self.spanning_probability] {
            if !prob(p) {
                return bad(format!("{p} is not a probability"));
            }
        }
        for dist in [&c.ethnicity, &c.deprivation] {
            if dist.iter().any(|&p| !prob(p)) || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad(format!("{dist:?} is not a probability distribution"));
            }
        }
        if !(c.age_sd > 0.0) || !(c.min_age < c.max_age) {
            return bad("age distribution is degenerate".into());
        }
        if self.lookback_months == 0 {
            return bad("lookback_months must be positive".into());
        }
        Ok(())
    }
}

/// True quantities for one generated person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRecord {
    pub id: String,
    pub g_star: f64,
    pub p5: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn g_star(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.g_star).collect()
    }

    pub fn p5(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.p5).collect()
    }

    pub fn write<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(writer);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read<R: Read>(reader: R) -> Result<Self, SynthError> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| SynthError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }

    /// Truth values reordered to follow `cohort.persons`.
    pub fn aligned_to(&self, cohort: &Cohort) -> Result<GroundTruth, SynthError> {
        let by_id: HashMap<&str, &TruthRecord> =
            self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        let records = cohort
            .persons
            .iter()
            .map(|p| {
                by_id
                    .get(p.id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| SynthError::Misaligned(format!("no truth for person {}", p.id)))
            })
            .collect::<Result<_, _>>()?;
        Ok(GroundTruth { records })
    }
}

/// The kind attached to every occurrence of the code at `index`.
fn kind_for(index: usize) -> CodeKind {
    // Two in five codes are medications; diagnoses dominate the rest.
    match index % 5 {
        0 | 3 => CodeKind::Medication,
        1 => CodeKind::PrimaryDiagnosis,
        2 => CodeKind::SecondaryDiagnosis,
        _ => {
            if index % 2 == 0 {
                CodeKind::Procedure
            } else {
                CodeKind::ExternalCause
            }
        }
    }
}

/// Codes and kinds used by a generator config, named codes first.
pub fn code_catalogue(config: &GeneratorConfig) -> Vec<(String, CodeKind)> {
    let named = config.named_codes();
    let mut codes: Vec<String> = named.iter().cloned().collect();
    let mut i = 0;
    while codes.len() < config.vocab_size {
        let candidate = format!("C{i:03}");
        if !named.contains(&candidate) {
            codes.push(candidate);
        }
        i += 1;
    }
    codes
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, kind_for(i)))
        .collect()
}

/// Counter-based stream for person `index`: output does not depend on the
/// order or thread in which persons are generated.
fn person_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    if rate > 0.0 {
        Exp::new(rate).expect("positive rate").sample(rng)
    } else {
        f64::INFINITY
    }
}

struct Sampler<'a> {
    config: &'a GeneratorConfig,
    catalogue: Vec<(String, CodeKind)>,
    background: Vec<usize>,
    background_cdf: Vec<f64>,
    prevalence: Vec<(usize, f64)>,
    betas: Vec<f64>,
    centring: CentringSpec,
    age: Normal<f64>,
}

impl<'a> Sampler<'a> {
    fn new(config: &'a GeneratorConfig) -> Self {
        let catalogue = code_catalogue(config);
        let position: HashMap<&str, usize> = catalogue
            .iter()
            .enumerate()
            .map(|(i, (c, _))| (c.as_str(), i))
            .collect();
        let prevalence: Vec<(usize, f64)> = config
            .code_prevalence
            .iter()
            .map(|(c, &p)| (position[c.as_str()], p))
            .collect();
        let background: Vec<usize> = (0..catalogue.len())
            .filter(|i| !prevalence.iter().any(|(j, _)| j == i))
            .collect();
        let mut acc = 0.0;
        let background_cdf = background
            .iter()
            .enumerate()
            .map(|(rank, _)| {
                acc += 1.0 / ((rank + 1) as f64).powf(config.code_frequency_exponent);
                acc
            })
            .collect();
        let mut betas = vec![0.0; crate::cohort::PREDICTOR_DIM];
        for (name, &b) in &config.true_betas {
            betas[predictor_index(name).expect("validated predictor name")] = b;
        }
        let c = &config.covariates;
        Self {
            config,
            catalogue,
            background,
            background_cdf,
            prevalence,
            betas,
            centring: CentringSpec::new(c.age_mean),
            age: Normal::new(c.age_mean, c.age_sd).expect("validated sd"),
        }
    }

    fn background_code<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.background_cdf.last().expect("non-empty background");
        let u = rng.random::<f64>() * total;
        let k = self.background_cdf.partition_point(|&c| c <= u);
        self.background[k.min(self.background.len() - 1)]
    }

    fn person(&self, index: usize) -> (Person, TruthRecord) {
        let cfg = self.config;
        let cov = &cfg.covariates;
        let mut rng = person_rng(cfg.seed, index);
        let age = loop {
            let a = self.age.sample(&mut rng);
            if a >= cov.min_age && a < cov.max_age {
                break (a * 1000.0).round() / 1000.0;
            }
        };
        let age = if age >= cov.max_age { cov.max_age - 0.001 } else { age };
        let mut person = Person::reference(format!("P{index:06}"), cfg.sex, age);
        person.ethnicity = Ethnicity::ALL[categorical(&mut rng, &cov.ethnicity)];
        person.dep_quintile = categorical(&mut rng, &cov.deprivation) as i64 + 1;
        person.diabetes = rng.random_bool(cov.diabetes);
        person.atrial_fibrillation = rng.random_bool(cov.atrial_fibrillation);
        person.bp_lowering = rng.random_bool(cov.bp_lowering);
        person.lipid_lowering = rng.random_bool(cov.lipid_lowering);
        person.antiplatelet_anticoagulant = rng.random_bool(cov.antiplatelet_anticoagulant);

        let mut occurrences: Vec<usize> = Vec::new();
        for &(code, p) in &self.prevalence {
            if rng.random_bool(p) {
                occurrences.push(code);
            }
        }
        if !self.background.is_empty() && cfg.mean_events_per_person > 0.0 {
            let n = Poisson::new(cfg.mean_events_per_person)
                .expect("positive mean")
                .sample(&mut rng) as usize;
            for _ in 0..n {
                occurrences.push(self.background_code(&mut rng));
            }
        }
        let last = cfg.index_date.ordinal();
        let first = last - cfg.lookback_months as i64 + 1;
        let mut events = Vec::with_capacity(occurrences.len() + 2);
        for code in occurrences {
            let month = rng.random_range(first..=last);
            let (name, kind) = &self.catalogue[code];
            let stamp = MonthStamp::from_ordinal(month);
            events.push(CodeEvent::new(stamp.year, stamp.month, name.clone(), *kind));
            if month < last && rng.random_bool(cfg.spanning_probability) {
                let next = MonthStamp::from_ordinal(month + 1);
                events.push(CodeEvent::new(next.year, next.month, name.clone(), *kind));
            }
        }
        person.events = events;
        person.sort_events();

        let g_star = self.log_risk(&person);
        let admin = cfg.censoring.admin_days as f64;
        let rate = cfg.baseline_hazard_per_day * g_star.exp();
        let event_time = exponential(&mut rng, rate);
        let censor_time = exponential(&mut rng, cfg.censoring.dropout_rate_per_day).min(admin);
        let (days, event) = if event_time <= censor_time {
            (event_time.ceil().min(admin), true)
        } else {
            (censor_time.ceil().min(admin), false)
        };
        person.outcome_days = days.max(1.0) as u32;
        person.outcome_event = event;
        let p5 = -(-cfg.baseline_hazard_per_day * admin * g_star.exp()).exp_m1();
        let truth = TruthRecord {
            id: person.id.clone(),
            g_star,
            p5,
        };
        (person, truth)
    }

    fn log_risk(&self, person: &Person) -> f64 {
        let x = predictor_vector(person, &self.centring);
        let mut g: f64 = x.0.iter().zip(&self.betas).map(|(x, b)| x * b).sum();
        let carried: BTreeSet<&str> = person.events.iter().map(|e| e.code.as_str()).collect();
        for (code, effect) in &self.config.code_effects {
            if carried.contains(code.as_str()) {
                g += effect;
            }
        }
        if let Some(seq) = &self.config.sequence_effect {
            if sequence_rule_holds(person, &seq.later, &seq.earlier) {
                g += seq.log_hr;
            }
        }
        g
    }
}

/// True when some occurrence of `later` falls in a strictly later month than
/// some occurrence of `earlier`.
pub fn sequence_rule_holds(person: &Person, later: &str, earlier: &str) -> bool {
    let months = |code: &str| -> Vec<i64> {
        person
            .events
            .iter()
            .filter(|e| e.code == code)
            .map(|e| e.stamp().ordinal())
            .collect()
    };
    match (months(later).into_iter().max(), months(earlier).into_iter().min()) {
        (Some(a), Some(b)) => a > b,
        _ => false,
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<(Cohort, GroundTruth), SynthError> {
    config.validate()?;
    let sampler = Sampler::new(config);
    let (persons, records) = (0..config.n_persons).map(|i| sampler.person(i)).unzip();
    Ok((
        Cohort::new(config.index_date, config.censoring.admin_days, persons),
        GroundTruth { records },
    ))
}

/// Harrell's C of the true log relative risk against observed outcomes.
pub fn true_concordance(truth: &GroundTruth, cohort: &Cohort) -> Result<f64, metrics::MetricsError> {
    metrics::harrell_c(&truth.g_star(), &cohort.times(), &cohort.events())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_persons: n,
            seed: 5,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small(200)).unwrap();
        let b = generate(&small(200)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let mut other = small(200);
        other.seed = 6;
        assert_ne!(generate(&other).unwrap().0, a.0);
    }

    #[test]
    fn persons_do_not_depend_on_cohort_size() {
        let (a, _) = generate(&small(50)).unwrap();
        let (b, _) = generate(&small(80)).unwrap();
        assert_eq!(a.persons[..], b.persons[..50]);
    }

    #[test]
    fn generated_persons_satisfy_cohort_invariants() {
        let cfg = GeneratorConfig {
            n_persons: 500,
            mean_events_per_person: 6.0,
            spanning_probability: 0.5,
            ..small(0)
        };
        let (cohort, truth) = generate(&cfg).unwrap();
        let mut text = Vec::new();
        crate::cohort::write_cohort(&cohort, &mut text).unwrap();
        let reread = crate::cohort::read_cohort(text.as_slice(), &Default::default()).unwrap();
        assert_eq!(reread, cohort);
        assert_eq!(truth.records.len(), 500);
    }

    #[test]
    fn zero_hazard_censors_everyone_administratively() {
        let cfg = GeneratorConfig {
            baseline_hazard_per_day: 0.0,
            ..small(300)
        };
        let (cohort, _) = generate(&cfg).unwrap();
        assert!(cohort.persons.iter().all(|p| !p.outcome_event && p.outcome_days == 1826));
    }

    #[test]
    fn null_model_event_rate_matches_closed_form() {
        let lambda = 2e-5;
        let cfg = GeneratorConfig {
            n_persons: 20_000,
            baseline_hazard_per_day: lambda,
            ..small(0)
        };
        let (cohort, truth) = generate(&cfg).unwrap();
        let p = 1.0 - (-lambda * 1826.0f64).exp();
        let n = cohort.len() as f64;
        let rate = cohort.event_count() as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((rate - p).abs() < 3.0 * sigma, "{rate} vs {p}");
        assert!(truth.records.iter().all(|r| (r.p5 - p).abs() < 1e-15 && r.g_star == 0.0));
    }

    #[test]
    fn vocab_size_zero_with_effects_is_config_error() {
        let mut cfg = small(10);
        cfg.vocab_size = 0;
        cfg.mean_events_per_person = 0.0;
        cfg.code_effects.insert("SMOKE".into(), 2f64.ln());
        assert!(matches!(generate(&cfg), Err(SynthError::Config(_))));
        cfg.code_effects.clear();
        assert!(generate(&cfg).is_ok());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let mut cfg = small(10);
        cfg.covariates.diabetes = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = small(10);
        cfg.true_betas.insert("height".into(), 0.1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn code_effect_doubles_empirical_hazard() {
        let mut cfg = small(50_000);
        cfg.code_effects.insert("SMOKE".into(), 2f64.ln());
        cfg.code_prevalence.insert("SMOKE".into(), 0.25);
        cfg.baseline_hazard_per_day = 3e-5;
        let (cohort, _) = generate(&cfg).unwrap();
        // Person-time rates equal the Nelson-Aalen slopes under constant hazards.
        let rate = |smoke: bool| {
            let group: Vec<&Person> =
                cohort.persons.iter().filter(|p| p.carries("SMOKE") == smoke).collect();
            let events = group.iter().filter(|p| p.outcome_event).count() as f64;
            let exposure: f64 = group.iter().map(|p| p.outcome_days as f64).sum();
            (events / exposure, events)
        };
        let (r1, e1) = rate(true);
        let (r0, e0) = rate(false);
        let log_ratio = (r1 / r0).ln();
        let se = (1.0 / e1 + 1.0 / e0).sqrt();
        assert!((log_ratio - 2f64.ln()).abs() < 3.0 * se, "ratio {}", r1 / r0);
    }

    #[test]
    fn event_rate_increases_with_positive_beta() {
        let rate = |beta: f64| {
            let mut cfg = small(20_000);
            cfg.true_betas.insert("diabetes".into(), beta);
            cfg.covariates.diabetes = 0.3;
            let (c, _) = generate(&cfg).unwrap();
            c.event_count()
        };
        let (a, b, c) = (rate(0.0), rate(0.7), rate(1.4));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn linear_preset_event_rate() {
        let cfg = GeneratorConfig::linear_preset();
        let (cohort, _) = generate(&cfg).unwrap();
        let rate = cohort.event_count() as f64 / cohort.len() as f64;
        assert!((0.03..0.05).contains(&rate), "{rate}");
    }

    #[test]
    fn sequence_rule() {
        let mut p = Person::reference("x", Sex::F, 50.0);
        p.events = vec![
            CodeEvent::new(2010, 1, "B", CodeKind::Medication),
            CodeEvent::new(2010, 1, "A", CodeKind::Medication),
        ];
        assert!(!sequence_rule_holds(&p, "A", "B"));
        p.events.push(CodeEvent::new(2010, 2, "A", CodeKind::Medication));
        assert!(sequence_rule_holds(&p, "A", "B"));
        assert!(!sequence_rule_holds(&p, "B", "A"));
    }

    #[test]
    fn true_concordance_edge_cases() {
        let mut cfg = small(100);
        cfg.baseline_hazard_per_day = 1e-3;
        let (cohort, truth) = generate(&cfg).unwrap();
        assert_eq!(true_concordance(&truth, &cohort).unwrap(), 0.5);

        // Strictly ordered event times opposite to g*.
        let mut cohort = cohort;
        let mut truth = truth;
        for (i, (p, r)) in cohort.persons.iter_mut().zip(&mut truth.records).enumerate() {
            p.outcome_days = i as u32 + 1;
            p.outcome_event = true;
            r.g_star = i as f64;
        }
        assert_eq!(true_concordance(&truth, &cohort).unwrap(), 0.0);
    }

    #[test]
    fn ground_truth_roundtrip_and_alignment() {
        let (cohort, truth) = generate(&small(20)).unwrap();
        let mut buf = Vec::new();
        truth.write(&mut buf).unwrap();
        let back = GroundTruth::read(buf.as_slice()).unwrap();
        assert_eq!(back, truth);
        let mut rev = cohort.clone();
        rev.persons.reverse();
        let aligned = truth.aligned_to(&rev).unwrap();
        assert_eq!(aligned.records[0].id, rev.persons[0].id);
    }
}
