//! Longitudinal coded cohorts: the person record, its line-delimited JSON
//! file format, code vocabularies, sequence encoding and the fixed
//! pre-specified predictor layout.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {field} out of range: {message}")]
    Validation {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate person id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("stratified split needs at least 2 events and 2 censored persons (found {events} events, {censored} censored)")]
    TooFewForSplit { events: usize, censored: usize },
}

pub type Result<T> = std::result::Result<T, CohortError>;

/// Number of distinct code kinds.
pub const KIND_COUNT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CodeKind {
    #[serde(rename = "pd")]
    PrimaryDiagnosis,
    #[serde(rename = "sd")]
    SecondaryDiagnosis,
    #[serde(rename = "ec")]
    ExternalCause,
    #[serde(rename = "pr")]
    Procedure,
    #[serde(rename = "rx")]
    Medication,
}

impl CodeKind {
    pub const ALL: [CodeKind; KIND_COUNT] = [
        CodeKind::PrimaryDiagnosis,
        CodeKind::SecondaryDiagnosis,
        CodeKind::ExternalCause,
        CodeKind::Procedure,
        CodeKind::Medication,
    ];

    pub fn index(self) -> usize {
        match self {
            CodeKind::PrimaryDiagnosis => 0,
            CodeKind::SecondaryDiagnosis => 1,
            CodeKind::ExternalCause => 2,
            CodeKind::Procedure => 3,
            CodeKind::Medication => 4,
        }
    }

    pub fn is_medication(self) -> bool {
        self == CodeKind::Medication
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl std::str::FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "F" | "f" => Ok(Sex::F),
            "M" | "m" => Ok(Sex::M),
            other => Err(format!("unknown sex {other:?} (expected F or M)")),
        }
    }
}

/// Ethnicity groups; `European` is the reference category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ethnicity {
    #[serde(rename = "EU")]
    European,
    #[serde(rename = "MA")]
    Maori,
    #[serde(rename = "PA")]
    Pacific,
    #[serde(rename = "IN")]
    Indian,
    #[serde(rename = "OT")]
    Other,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 5] = [
        Ethnicity::European,
        Ethnicity::Maori,
        Ethnicity::Pacific,
        Ethnicity::Indian,
        Ethnicity::Other,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Ethnicity::European => "EU",
            Ethnicity::Maori => "MA",
            Ethnicity::Pacific => "PA",
            Ethnicity::Indian => "IN",
            Ethnicity::Other => "OT",
        }
    }
}

/// Calendar month, ordered chronologically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MonthStamp {
    pub year: i32,
    pub month: u8,
}

impl MonthStamp {
    pub fn new(year: i32, month: u8) -> Self {
        Self { year, month }
    }

    /// Months since year 0, month 1.
    pub fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ordinal: i64) -> Self {
        Self {
            year: ordinal.div_euclid(12) as i32,
            month: (ordinal.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn months_until(self, later: MonthStamp) -> i64 {
        later.ordinal() - self.ordinal()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeEvent {
    #[serde(rename = "y")]
    pub year: i32,
    #[serde(rename = "m")]
    pub month: u8,
    #[serde(rename = "c")]
    pub code: String,
    #[serde(rename = "k")]
    pub kind: CodeKind,
}

impl CodeEvent {
    pub fn new(year: i32, month: u8, code: impl Into<String>, kind: CodeKind) -> Self {
        Self {
            year,
            month,
            code: code.into(),
            kind,
        }
    }

    pub fn stamp(&self) -> MonthStamp {
        MonthStamp::new(self.year, self.month)
    }
}

mod flag01 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!(
                "event flag must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// One subject: pre-specified predictors, coded history and outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Person {
    pub id: String,
    pub sex: Sex,
    #[serde(rename = "age")]
    pub age_years: f64,
    #[serde(rename = "eth")]
    pub ethnicity: Ethnicity,
    #[serde(rename = "dep")]
    pub dep_quintile: i64,
    #[serde(rename = "dm")]
    pub diabetes: bool,
    #[serde(rename = "af")]
    pub atrial_fibrillation: bool,
    #[serde(rename = "bp")]
    pub bp_lowering: bool,
    #[serde(rename = "ll")]
    pub lipid_lowering: bool,
    #[serde(rename = "apac")]
    pub antiplatelet_anticoagulant: bool,
    pub events: Vec<CodeEvent>,
    #[serde(rename = "t")]
    pub outcome_days: u32,
    #[serde(rename = "e", with = "flag01")]
    pub outcome_event: bool,
}

impl Person {
    /// A person in every reference category with no history and no outcome.
    pub fn reference(id: impl Into<String>, sex: Sex, age_years: f64) -> Self {
        Self {
            id: id.into(),
            sex,
            age_years,
            ethnicity: Ethnicity::European,
            dep_quintile: 3,
            diabetes: false,
            atrial_fibrillation: false,
            bp_lowering: false,
            lipid_lowering: false,
            antiplatelet_anticoagulant: false,
            events: Vec::new(),
            outcome_days: 0,
            outcome_event: false,
        }
    }

    /// Stable re-sort of the history by (year, month, code).
    pub fn sort_events(&mut self) {
        self.events
            .sort_by(|a, b| (a.year, a.month, &a.code).cmp(&(b.year, b.month, &b.code)));
    }

    pub fn carries(&self, code: &str) -> bool {
        self.events.iter().any(|e| e.code == code)
    }
}

/// Loader settings for the parts of a cohort that the line format does not carry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortOptions {
    pub index_date: MonthStamp,
    pub horizon_days: u32,
    pub lookback_months: u32,
    pub min_age: f64,
    pub max_age: f64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self {
            index_date: MonthStamp::new(2012, 12),
            horizon_days: 1826,
            lookback_months: 60,
            min_age: 30.0,
            max_age: 75.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub index_date: MonthStamp,
    pub horizon_days: u32,
    pub persons: Vec<Person>,
}

impl Cohort {
    pub fn new(index_date: MonthStamp, horizon_days: u32, persons: Vec<Person>) -> Self {
        Self {
            index_date,
            horizon_days,
            persons,
        }
    }

    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            index_date: self.index_date,
            horizon_days: self.horizon_days,
            persons: indices.iter().map(|&i| self.persons[i].clone()).collect(),
        }
    }

    pub fn filter_sex(&self, sex: Sex) -> Cohort {
        Cohort {
            index_date: self.index_date,
            horizon_days: self.horizon_days,
            persons: self.persons.iter().filter(|p| p.sex == sex).cloned().collect(),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        self.persons.iter().map(|p| p.outcome_days as f64).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.persons.iter().map(|p| p.outcome_event).collect()
    }

    pub fn event_count(&self) -> usize {
        self.persons.iter().filter(|p| p.outcome_event).count()
    }
}

fn validate_person(person: &Person, line: usize, opts: &CohortOptions) -> Result<()> {
    let invalid = |field: &'static str, message: String| CohortError::Validation {
        line,
        field,
        message,
    };
    if !(1..=5).contains(&person.dep_quintile) {
        return Err(invalid(
            "dep_quintile",
            format!("{} not in 1..=5", person.dep_quintile),
        ));
    }
    if !person.age_years.is_finite()
        || person.age_years < opts.min_age
        || person.age_years >= opts.max_age
    {
        return Err(invalid(
            "age",
            format!(
                "{} not in [{}, {})",
                person.age_years, opts.min_age, opts.max_age
            ),
        ));
    }
    if person.outcome_days > opts.horizon_days {
        return Err(invalid(
            "outcome_days",
            format!("{} exceeds horizon {}", person.outcome_days, opts.horizon_days),
        ));
    }
    for ev in &person.events {
        if !(1..=12).contains(&ev.month) {
            return Err(invalid("month", format!("{} not in 1..=12", ev.month)));
        }
        let before = ev.stamp().months_until(opts.index_date);
        if before < 0 || before >= opts.lookback_months as i64 {
            return Err(invalid(
                "year",
                format!(
                    "event {}-{:02} outside the {}-month lookback before {}-{:02}",
                    ev.year, ev.month, opts.lookback_months, opts.index_date.year, opts.index_date.month
                ),
            ));
        }
    }
    Ok(())
}

/// Parses line-delimited person records. Blank lines are ignored.
pub fn read_cohort<R: Read>(reader: R, opts: &CohortOptions) -> Result<Cohort> {
    let mut persons = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CohortError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut person: Person =
            serde_json::from_str(&line).map_err(|e| CohortError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        validate_person(&person, line_no, opts)?;
        if !seen.insert(person.id.clone()) {
            return Err(CohortError::DuplicateId {
                line: line_no,
                id: person.id,
            });
        }
        person.sort_events();
        persons.push(person);
    }
    Ok(Cohort::new(opts.index_date, opts.horizon_days, persons))
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    load_cohort_with(path, &CohortOptions::default())
}

pub fn load_cohort_with(path: impl AsRef<Path>, opts: &CohortOptions) -> Result<Cohort> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_cohort(file, opts)
}

pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    for person in &cohort.persons {
        serde_json::to_writer(&mut w, person)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| CohortError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_cohort(cohort, file).map_err(io_err)
}

/// Code-to-index map. Index 0 is reserved for padding; retained codes take
/// indices `1..=len()` ordered by descending person count, then by code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    codes: Vec<String>,
    person_counts: Vec<usize>,
    min_count: usize,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    min_count: usize,
    codes: Vec<String>,
    person_counts: Vec<usize>,
}

impl From<VocabularyFile> for Vocabulary {
    fn from(f: VocabularyFile) -> Self {
        Vocabulary::from_parts(f.codes, f.person_counts, f.min_count)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            min_count: v.min_count,
            codes: v.codes,
            person_counts: v.person_counts,
        }
    }
}

impl Vocabulary {
    fn from_parts(codes: Vec<String>, person_counts: Vec<usize>, min_count: usize) -> Self {
        let index = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as u32 + 1))
            .collect();
        Self {
            codes,
            person_counts,
            min_count,
            index,
        }
    }

    /// Number of retained codes (excluding the padding slot).
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Rows needed in a code embedding table, padding included.
    pub fn table_size(&self) -> usize {
        self.codes.len() + 1
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn token_id(&self, code: &str) -> Option<u32> {
        self.index.get(code).copied()
    }

    pub fn code(&self, token_id: u32) -> Option<&str> {
        if token_id == 0 {
            return None;
        }
        self.codes.get(token_id as usize - 1).map(String::as_str)
    }

    pub fn person_count(&self, code: &str) -> Option<usize> {
        self.token_id(code)
            .map(|id| self.person_counts[id as usize - 1])
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn kind_id(&self, kind: CodeKind) -> u32 {
        kind.index() as u32
    }
}

/// Retains every code carried by at least `min_count` distinct persons.
pub fn build_vocabulary(cohort: &Cohort, min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for person in &cohort.persons {
        let distinct: HashSet<&str> = person.events.iter().map(|e| e.code.as_str()).collect();
        for code in distinct {
            *counts.entry(code).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let (codes, person_counts) = kept.into_iter().map(|(c, n)| (c.to_owned(), n)).unzip();
    Vocabulary::from_parts(codes, person_counts, min_count)
}

/// Integer streams fed to the network. All three lists have equal length.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub token_ids: Vec<u32>,
    pub kind_ids: Vec<u32>,
    pub delta_t_months: Vec<u32>,
}

impl CodeSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Encodes a person's history with no length limit.
pub fn encode_history(person: &Person, vocab: &Vocabulary, index_date: MonthStamp) -> CodeSequence {
    encode_history_with(person, vocab, index_date, None)
}

/// Encodes a person's history, keeping only the most recent `max_events`
/// retained codes when a limit is given. Codes missing from the vocabulary
/// and events after the index date are dropped; `delta_t_months` is measured
/// between consecutive kept codes and is 0 for the first.
pub fn encode_history_with(
    person: &Person,
    vocab: &Vocabulary,
    index_date: MonthStamp,
    max_events: Option<usize>,
) -> CodeSequence {
    let kept: Vec<(u32, u32, i64)> = person
        .events
        .iter()
        .filter(|e| e.stamp() <= index_date)
        .filter_map(|e| {
            vocab
                .token_id(&e.code)
                .map(|tok| (tok, vocab.kind_id(e.kind), e.stamp().ordinal()))
        })
        .collect();
    let start = match max_events {
        Some(k) if kept.len() > k => kept.len() - k,
        _ => 0,
    };
    let kept = &kept[start..];
    let mut seq = CodeSequence {
        token_ids: Vec::with_capacity(kept.len()),
        kind_ids: Vec::with_capacity(kept.len()),
        delta_t_months: Vec::with_capacity(kept.len()),
    };
    let mut prev: Option<i64> = None;
    for &(tok, kind, ord) in kept {
        seq.token_ids.push(tok);
        seq.kind_ids.push(kind);
        seq.delta_t_months
            .push(prev.map_or(0, |p| (ord - p).max(0) as u32));
        prev = Some(ord);
    }
    seq
}

/// Number of entries in a [`PredictorVector`].
pub const PREDICTOR_DIM: usize = 17;

/// Column names of the predictor layout, in order.
pub const PREDICTOR_NAMES: [&str; PREDICTOR_DIM] = [
    "age",
    "ethnicity_maori",
    "ethnicity_pacific",
    "ethnicity_indian",
    "ethnicity_other",
    "deprivation_quintile",
    "diabetes",
    "atrial_fibrillation",
    "bp_lowering",
    "lipid_lowering",
    "antiplatelet_anticoagulant",
    "age_x_bp_lowering",
    "age_x_diabetes",
    "age_x_atrial_fibrillation",
    "bp_lowering_x_diabetes",
    "antiplatelet_anticoagulant_x_diabetes",
    "bp_lowering_x_lipid_lowering",
];

pub fn predictor_index(name: &str) -> Option<usize> {
    PREDICTOR_NAMES.iter().position(|&n| n == name)
}

/// Centring reference: the (sex-specific) mean age and the reference
/// deprivation quintile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentringSpec {
    pub age_mean: f64,
    pub dep_reference: i64,
}

impl CentringSpec {
    pub fn new(age_mean: f64) -> Self {
        Self {
            age_mean,
            dep_reference: 3,
        }
    }

    pub fn from_persons(persons: &[Person]) -> Self {
        let mean = if persons.is_empty() {
            0.0
        } else {
            persons.iter().map(|p| p.age_years).sum::<f64>() / persons.len() as f64
        };
        Self::new(mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorVector(pub Vec<f64>);

impl PredictorVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Builds the fixed-order predictor vector; see [`PREDICTOR_NAMES`].
/// Interaction terms use the centred age.
pub fn predictor_vector(person: &Person, centring: &CentringSpec) -> PredictorVector {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let age = person.age_years - centring.age_mean;
    let eth = |e: Ethnicity| flag(person.ethnicity == e);
    let dm = flag(person.diabetes);
    let af = flag(person.atrial_fibrillation);
    let bp = flag(person.bp_lowering);
    let ll = flag(person.lipid_lowering);
    let apac = flag(person.antiplatelet_anticoagulant);
    PredictorVector(vec![
        age,
        eth(Ethnicity::Maori),
        eth(Ethnicity::Pacific),
        eth(Ethnicity::Indian),
        eth(Ethnicity::Other),
        (person.dep_quintile - centring.dep_reference) as f64,
        dm,
        af,
        bp,
        ll,
        apac,
        age * bp,
        age * dm,
        age * af,
        bp * dm,
        apac * dm,
        bp * ll,
    ])
}

/// One train/test partition of a 5x2 cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub replication: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_5x2_stratified(cohort: &Cohort, seed: u64) -> Result<Vec<FoldSplit>> {
    split_5x2_stratified_flags(&cohort.events(), seed)
}

/// Five replications of a two-fold split stratified by event status. Within
/// a replication each half is used once for training and once for testing.
pub fn split_5x2_stratified_flags(events: &[bool], seed: u64) -> Result<Vec<FoldSplit>> {
    let cases: Vec<usize> = (0..events.len()).filter(|&i| events[i]).collect();
    let censored: Vec<usize> = (0..events.len()).filter(|&i| !events[i]).collect();
    if cases.len() < 2 || censored.len() < 2 {
        return Err(CohortError::TooFewForSplit {
            events: cases.len(),
            censored: censored.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Vec::with_capacity(10);
    for replication in 0..5 {
        let mut halves = [Vec::new(), Vec::new()];
        let mut shuffled_cases = cases.clone();
        shuffled_cases.shuffle(&mut rng);
        let mut shuffled_censored = censored.clone();
        shuffled_censored.shuffle(&mut rng);
        for (k, &i) in shuffled_cases.iter().enumerate() {
            halves[k % 2].push(i);
        }
        // An odd case count leaves half 0 one larger; start censored on half 1.
        let offset = shuffled_cases.len() % 2;
        for (k, &i) in shuffled_censored.iter().enumerate() {
            halves[(k + offset) % 2].push(i);
        }
        for half in &mut halves {
            half.sort_unstable();
        }
        for fold in 0..2 {
            splits.push(FoldSplit {
                replication,
                fold,
                train: halves[fold].clone(),
                test: halves[1 - fold].clone(),
            });
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(id: &str, events: Vec<CodeEvent>) -> Person {
        let mut p = Person::reference(id, Sex::F, 50.0);
        p.events = events;
        p
    }

    fn cohort(persons: Vec<Person>) -> Cohort {
        Cohort::new(MonthStamp::new(2012, 12), 1826, persons)
    }

    const LINE: &str = r#"{"id":"a","sex":"F","age":49.5,"eth":"EU","dep":3,"dm":false,"af":false,"bp":true,"ll":false,"apac":false,"events":[{"y":2012,"m":7,"c":"I10","k":"pd"},{"y":2012,"m":3,"c":"Z72","k":"sd"}],"t":1826,"e":0}"#;

    #[test]
    fn empty_file_is_empty_cohort() {
        let c = read_cohort("".as_bytes(), &CohortOptions::default()).unwrap();
        assert!(c.persons.is_empty());
    }

    #[test]
    fn loader_sorts_events() {
        let c = read_cohort(LINE.as_bytes(), &CohortOptions::default()).unwrap();
        let p = &c.persons[0];
        assert_eq!(p.events[0].month, 3);
        assert_eq!(p.events[1].month, 7);
        assert!(p.bp_lowering);
    }

    #[test]
    fn bad_quintile_names_field() {
        let line = LINE.replace("\"dep\":3", "\"dep\":6");
        let err = read_cohort(line.as_bytes(), &CohortOptions::default()).unwrap_err();
        assert!(err.to_string().contains("dep_quintile out of range"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{LINE}\n{{not json\n");
        let err = read_cohort(text.as_bytes(), &CohortOptions::default()).unwrap_err();
        assert!(matches!(err, CohortError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let line = LINE.replace("\"e\":0", "\"e\":0,\"extra\":1");
        assert!(read_cohort(line.as_bytes(), &CohortOptions::default()).is_err());
        let line = LINE.replace("\"k\":\"pd\"", "\"k\":\"pd\",\"z\":1");
        assert!(read_cohort(line.as_bytes(), &CohortOptions::default()).is_err());
    }

    #[test]
    fn event_flag_must_be_binary() {
        let line = LINE.replace("\"e\":0", "\"e\":2");
        assert!(read_cohort(line.as_bytes(), &CohortOptions::default()).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{LINE}\n{LINE}\n");
        let err = read_cohort(text.as_bytes(), &CohortOptions::default()).unwrap_err();
        assert!(matches!(err, CohortError::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn event_outside_lookback_rejected() {
        let line = LINE.replace("\"y\":2012,\"m\":3", "\"y\":2007,\"m\":12");
        let err = read_cohort(line.as_bytes(), &CohortOptions::default()).unwrap_err();
        assert!(matches!(err, CohortError::Validation { field: "year", .. }), "{err}");
        let line = LINE.replace("\"y\":2012,\"m\":3", "\"y\":2008,\"m\":1");
        assert!(read_cohort(line.as_bytes(), &CohortOptions::default()).is_ok());
    }

    #[test]
    fn outcome_beyond_horizon_rejected() {
        let line = LINE.replace("\"t\":1826", "\"t\":1827");
        assert!(read_cohort(line.as_bytes(), &CohortOptions::default()).is_err());
    }

    #[test]
    fn rare_code_excluded() {
        let c = cohort(vec![person("a", vec![CodeEvent::new(2012, 1, "X", CodeKind::Procedure)])]);
        let v = build_vocabulary(&c, 2);
        assert!(v.is_empty());
        assert_eq!(v.table_size(), 1);
        assert_eq!(v.token_id("X"), None);
    }

    #[test]
    fn threshold_met_exactly_is_retained() {
        let persons = (0..500)
            .map(|i| person(&i.to_string(), vec![CodeEvent::new(2012, 1, "I10", CodeKind::PrimaryDiagnosis)]))
            .collect();
        let v = build_vocabulary(&cohort(persons), 500);
        assert_eq!(v.token_id("I10"), Some(1));
    }

    #[test]
    fn counts_are_per_person_not_per_occurrence() {
        let events = (0..900).map(|_| CodeEvent::new(2012, 1, "X", CodeKind::Medication)).collect();
        let c = cohort(vec![person("a", events), person("b", vec![])]);
        let v = build_vocabulary(&c, 2);
        assert_eq!(v.token_id("X"), None);
    }

    #[test]
    fn vocabulary_orders_by_count_then_code() {
        let ev = |c: &str| CodeEvent::new(2012, 1, c, CodeKind::PrimaryDiagnosis);
        let c = cohort(vec![
            person("a", vec![ev("B"), ev("C")]),
            person("b", vec![ev("A"), ev("C")]),
            person("c", vec![ev("C")]),
        ]);
        let v = build_vocabulary(&c, 1);
        assert_eq!(v.codes(), &["C", "A", "B"]);
        assert_eq!(v.token_id("A"), Some(2));
        assert_eq!(v.code(3), Some("B"));
        assert_eq!(v.code(0), None);
        assert_eq!(v.person_count("C"), Some(3));
    }

    #[test]
    fn vocabulary_serde_rebuilds_index() {
        let ev = |c: &str| CodeEvent::new(2012, 1, c, CodeKind::PrimaryDiagnosis);
        let c = cohort(vec![person("a", vec![ev("B"), ev("C")])]);
        let v = build_vocabulary(&c, 1);
        let text = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.token_id("C"), v.token_id("C"));
    }

    fn vocab_of(codes: &[&str]) -> Vocabulary {
        let events = codes
            .iter()
            .map(|c| CodeEvent::new(2012, 1, *c, CodeKind::PrimaryDiagnosis))
            .collect();
        build_vocabulary(&cohort(vec![person("v", events)]), 1)
    }

    #[test]
    fn empty_history_encodes_empty() {
        let seq = encode_history(&person("a", vec![]), &vocab_of(&["A"]), MonthStamp::new(2012, 12));
        assert_eq!(seq, CodeSequence::default());
    }

    #[test]
    fn deltas_are_month_differences() {
        let p = person(
            "a",
            vec![
                CodeEvent::new(2012, 3, "A", CodeKind::PrimaryDiagnosis),
                CodeEvent::new(2012, 7, "B", CodeKind::Medication),
            ],
        );
        let seq = encode_history(&p, &vocab_of(&["A", "B"]), MonthStamp::new(2012, 12));
        assert_eq!(seq.delta_t_months, vec![0, 4]);
        assert_eq!(seq.kind_ids, vec![0, 4]);
    }

    #[test]
    fn spanning_stay_listed_per_month() {
        let p = person(
            "a",
            vec![
                CodeEvent::new(2011, 3, "A", CodeKind::PrimaryDiagnosis),
                CodeEvent::new(2011, 4, "A", CodeKind::PrimaryDiagnosis),
            ],
        );
        let v = vocab_of(&["A"]);
        let seq = encode_history(&p, &v, MonthStamp::new(2012, 12));
        assert_eq!(seq.token_ids, vec![1, 1]);
        assert_eq!(seq.delta_t_months, vec![0, 1]);
    }

    #[test]
    fn unknown_codes_dropped_and_deltas_bridge_gap() {
        let p = person(
            "a",
            vec![
                CodeEvent::new(2011, 1, "A", CodeKind::PrimaryDiagnosis),
                CodeEvent::new(2011, 6, "RARE", CodeKind::PrimaryDiagnosis),
                CodeEvent::new(2012, 1, "A", CodeKind::PrimaryDiagnosis),
            ],
        );
        let seq = encode_history(&p, &vocab_of(&["A"]), MonthStamp::new(2012, 12));
        assert_eq!(seq.delta_t_months, vec![0, 12]);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let p = person(
            "a",
            (1..=5)
                .map(|m| CodeEvent::new(2012, m, "A", CodeKind::PrimaryDiagnosis))
                .collect(),
        );
        let seq = encode_history_with(&p, &vocab_of(&["A"]), MonthStamp::new(2012, 12), Some(2));
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.delta_t_months, vec![0, 1]);
    }

    #[test]
    fn reference_person_is_zero_vector() {
        let p = Person::reference("r", Sex::F, 49.021);
        let x = predictor_vector(&p, &CentringSpec::new(49.021));
        assert_eq!(x.0.len(), PREDICTOR_DIM);
        assert!(x.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interactions_follow_main_effects() {
        let mut p = Person::reference("r", Sex::F, 49.021);
        p.diabetes = true;
        p.bp_lowering = true;
        let x = predictor_vector(&p, &CentringSpec::new(49.021));
        let at = |n: &str| x.0[predictor_index(n).unwrap()];
        assert_eq!(at("diabetes"), 1.0);
        assert_eq!(at("bp_lowering"), 1.0);
        assert_eq!(at("bp_lowering_x_diabetes"), 1.0);
        assert_eq!(at("antiplatelet_anticoagulant_x_diabetes"), 0.0);
        assert_eq!(at("age_x_diabetes"), 0.0);
    }

    #[test]
    fn age_centring_is_exact() {
        let p = Person::reference("r", Sex::F, 50.021);
        let x = predictor_vector(&p, &CentringSpec::new(49.021));
        assert!((x.0[0] - 1.0).abs() < 1e-12);
        let p = Person::reference("r", Sex::F, 50.5);
        assert_eq!(predictor_vector(&p, &CentringSpec::new(49.5)).0[0], 1.0);
    }

    #[test]
    fn ethnicity_and_deprivation_encoding() {
        let mut p = Person::reference("r", Sex::M, 40.0);
        p.ethnicity = Ethnicity::Pacific;
        p.dep_quintile = 5;
        let x = predictor_vector(&p, &CentringSpec::new(40.0));
        assert_eq!(&x.0[1..6], &[0.0, 1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn four_person_split_balances_strata() {
        let splits = split_5x2_stratified_flags(&[true, false, true, false], 7).unwrap();
        assert_eq!(splits.len(), 10);
        let flags = [true, false, true, false];
        for s in &splits {
            for fold in [&s.train, &s.test] {
                assert_eq!(fold.len(), 2);
                assert_eq!(fold.iter().filter(|&&i| flags[i]).count(), 1);
            }
        }
    }

    #[test]
    fn split_requires_both_strata() {
        assert!(split_5x2_stratified_flags(&[true, true, false], 1).is_err());
        assert!(split_5x2_stratified_flags(&[true, false, false, false], 1).is_err());
    }

    #[test]
    fn splits_are_partitions_and_deterministic() {
        let flags: Vec<bool> = (0..1000).map(|i| i % 27 == 0).collect();
        let splits = split_5x2_stratified_flags(&flags, 99).unwrap();
        assert_eq!(splits, split_5x2_stratified_flags(&flags, 99).unwrap());
        assert_ne!(splits, split_5x2_stratified_flags(&flags, 100).unwrap());
        let total_events = flags.iter().filter(|&&e| e).count() as f64;
        for s in &splits {
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..1000).collect::<Vec<_>>());
            for fold in [&s.train, &s.test] {
                let ev = fold.iter().filter(|&&i| flags[i]).count() as f64;
                let expected = total_events * fold.len() as f64 / 1000.0;
                assert!((ev - expected).abs() <= 1.0, "{ev} vs {expected}");
            }
        }
        for r in 0..5 {
            assert_eq!(splits[2 * r].train, splits[2 * r + 1].test);
        }
    }

    #[test]
    fn month_stamp_ordinal_roundtrip() {
        for ord in [0i64, 11, 12, 24143, 24155] {
            assert_eq!(MonthStamp::from_ordinal(ord).ordinal(), ord);
        }
        assert_eq!(MonthStamp::new(2012, 3).months_until(MonthStamp::new(2012, 7)), 4);
    }
}
