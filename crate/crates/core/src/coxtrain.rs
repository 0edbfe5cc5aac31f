//! Case-control partial-likelihood training of network ensembles, with a
//! Breslow baseline anchored at the reference person.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, AutodiffError, Graph, NodeId, Tensor};
use crate::cohort::{
    build_vocabulary, encode_history_with, predictor_vector, CentringSpec, Cohort, MonthStamp, Person,
    Vocabulary, PREDICTOR_DIM,
};
use crate::risknet::{forward_graph, init_params, predict, EncodedPerson, NetConfig, NetError, NetParams};
pub use crate::survival::{breslow_baseline, five_year_risk, BaselineSurvival};
use crate::survival::{StepFunction, SurvivalError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("nothing to train on: no events")]
    NothingToTrain,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("input length mismatch: {0}")]
    Length(String),
    #[error(
        "non-finite loss in member {member}, epoch {epoch}, batch {batch} (parameter norm {param_norm:.6e})"
    )]
    NonFiniteLoss {
        member: usize,
        epoch: usize,
        batch: usize,
        param_norm: f64,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Survival(#[from] SurvivalError),
    #[error("model directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("model directory format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_cases: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_cases: 256,
            epochs: 10,
            learning_rate: 0.001,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            ensemble_size: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        if self.batch_cases == 0 {
            return bad("batch_cases must be positive");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.adam_betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad("adam_betas must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// One event and the persons at risk at its time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseEntry {
    pub case: usize,
    /// The risk set is `order[..at_risk]`.
    pub at_risk: usize,
    /// Index of the case itself within `order`.
    position: usize,
}

/// Risk sets for every event, sharing one descending-time ordering.
#[derive(Clone, Debug)]
pub struct RiskSets {
    order: Vec<usize>,
    cases: Vec<CaseEntry>,
    skipped: usize,
}

pub fn build_risk_sets(times: &[f64], events: &[bool]) -> Result<RiskSets> {
    if times.len() != events.len() {
        return Err(TrainError::Length(format!("{} times, {} events", times.len(), events.len())));
    }
    if !events.iter().any(|&e| e) {
        return Err(TrainError::NothingToTrain);
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
    let mut position = vec![0; times.len()];
    for (p, &i) in order.iter().enumerate() {
        position[i] = p;
    }
    let mut cases = Vec::new();
    let mut skipped = 0;
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        let at_risk = order.partition_point(|&j| times[j] >= times[i]);
        if at_risk < 2 {
            skipped += 1;
            continue;
        }
        cases.push(CaseEntry {
            case: i,
            at_risk,
            position: position[i],
        });
    }
    Ok(RiskSets { order, cases, skipped })
}

impl RiskSets {
    /// Cases with at least one possible control.
    pub fn cases(&self) -> &[CaseEntry] {
        &self.cases
    }

    /// Events whose risk set holds only themselves.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn members(&self, entry: &CaseEntry) -> &[usize] {
        &self.order[..entry.at_risk]
    }

    /// A control drawn uniformly from the case's risk set, excluding the case.
    pub fn sample_control<R: Rng + ?Sized>(&self, entry: &CaseEntry, rng: &mut R) -> usize {
        let mut k = rng.random_range(0..entry.at_risk - 1);
        if k >= entry.position {
            k += 1;
        }
        self.order[k]
    }

    /// One epoch: every case once in shuffled order, split into batches of
    /// `batch_cases` (case, control) pairs.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, batch_cases: usize, rng: &mut R) -> Vec<Vec<(usize, usize)>> {
        let mut entries = self.cases.clone();
        entries.shuffle(rng);
        entries
            .chunks(batch_cases)
            .map(|chunk| chunk.iter().map(|e| (e.case, self.sample_control(e, rng))).collect())
            .collect()
    }
}

/// Mean of `ln(1 + exp(g_control - g_case))` over pairs.
pub fn case_control_loss(g_case: &[f64], g_control: &[f64]) -> f64 {
    let n = g_case.len().min(g_control.len());
    if n == 0 {
        return 0.0;
    }
    g_case
        .iter()
        .zip(g_control)
        .map(|(c, k)| softplus(k - c))
        .sum::<f64>()
        / n as f64
}

/// Graph form of [`case_control_loss`] for `1×1` output nodes.
pub fn case_control_loss_graph(graph: &mut Graph, cases: &[NodeId], controls: &[NodeId]) -> std::result::Result<NodeId, AutodiffError> {
    let c = graph.concat(cases, 0)?;
    let k = graph.concat(controls, 0)?;
    let diff = graph.sub(k, c)?;
    let sp = graph.softplus(diff);
    graph.mean(sp)
}

/// Adam state for one parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &NetParams, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr: cfg.learning_rate,
            betas: cfg.adam_betas,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; `grads` align with `params.tensors_mut()` and a
    /// missing gradient counts as zero.
    pub fn update(&mut self, params: &mut NetParams, grads: &[Option<Tensor>]) {
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (k, t) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            match &grads[k] {
                Some(g) => {
                    for (((w, m), v), &g) in t.values_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.values()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
                None => {
                    for ((w, m), v) in t.values_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Training inputs aligned by person.
#[derive(Clone, Debug)]
pub struct TrainingData<'a> {
    pub persons: &'a [EncodedPerson],
    pub times: &'a [f64],
    pub events: &'a [bool],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemberHistory {
    pub init_seed: u64,
    /// Eval-mode loss on a fixed monitoring sample before training and
    /// after each epoch.
    pub monitor_loss: Vec<f64>,
    /// Mean training-batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trained ensemble with its baseline survival.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskModel {
    pub members: Vec<NetParams>,
    pub g_ref: f64,
    pub baseline: BaselineSurvival,
    pub horizon_days: f64,
    pub history: Vec<MemberHistory>,
    pub skipped_cases: usize,
}

impl RiskModel {
    /// Mean member log relative risk (eval mode).
    pub fn predict_g(&self, person: &EncodedPerson) -> Result<f64> {
        predict_ensemble(&self.members, person)
    }

    pub fn five_year_risk(&self, person: &EncodedPerson) -> Result<f64> {
        Ok(self.baseline.risk(self.predict_g(person)?, self.horizon_days))
    }

    pub fn predict_all(&self, persons: &[EncodedPerson]) -> Result<Vec<f64>> {
        persons.par_iter().map(|p| self.predict_g(p)).collect()
    }
}

pub fn predict_ensemble(members: &[NetParams], person: &EncodedPerson) -> Result<f64> {
    let mut total = 0.0;
    for m in members {
        total += predict(m, person)?.g;
    }
    Ok(total / members.len() as f64)
}

/// Seeds for member `k` derived from the training seed.
fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64 + 1);
    rng
}

const MONITOR_CASES: usize = 1000;

fn monitor_pairs(sets: &RiskSets, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut entries = sets.cases().to_vec();
    entries.shuffle(&mut rng);
    entries.truncate(MONITOR_CASES);
    entries.iter().map(|e| (e.case, sets.sample_control(e, &mut rng))).collect()
}

fn pair_loss(params: &NetParams, persons: &[EncodedPerson], pairs: &[(usize, usize)]) -> Result<f64> {
    let mut gc = Vec::with_capacity(pairs.len());
    let mut gk = Vec::with_capacity(pairs.len());
    for &(c, k) in pairs {
        gc.push(predict(params, &persons[c])?.g);
        gk.push(predict(params, &persons[k])?.g);
    }
    Ok(case_control_loss(&gc, &gk))
}

fn train_member(
    member: usize,
    data: &TrainingData,
    sets: &RiskSets,
    monitor: &[(usize, usize)],
    net: &NetConfig,
    cfg: &TrainConfig,
    vocab_size: usize,
) -> Result<(NetParams, MemberHistory)> {
    let mut rng = member_rng(cfg.seed, member);
    let init_seed = rng.next_u64();
    let net = NetConfig { seed: init_seed, ..net.clone() };
    let mut params = init_params(&net, vocab_size)?;
    let mut adam = Adam::new(&params, cfg);
    let mut history = MemberHistory {
        init_seed,
        monitor_loss: vec![pair_loss(&params, data.persons, monitor)?],
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let batches = sets.epoch_batches(cfg.batch_cases, &mut rng);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut graph = Graph::with_capacity(batch.len() * 600);
            let nodes = params.registered(&mut graph, true);
            let mut cases = Vec::with_capacity(batch.len());
            let mut controls = Vec::with_capacity(batch.len());
            for &(c, k) in batch {
                cases.push(forward_graph(&mut graph, &nodes, &net, &data.persons[c], true, &mut rng)?);
                controls.push(forward_graph(&mut graph, &nodes, &net, &data.persons[k], true, &mut rng)?);
            }
            let loss = case_control_loss_graph(&mut graph, &cases, &controls).map_err(NetError::from)?;
            let value = graph.scalar(loss);
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    member,
                    epoch,
                    batch: b,
                    param_norm: params.norm(),
                });
            }
            total += value;
            let mut grads = graph.backward(loss).map_err(NetError::from)?;
            let grads: Vec<Option<Tensor>> = nodes.ids().iter().map(|&id| grads.take(id)).collect();
            adam.update(&mut params, &grads);
        }
        history.epoch_loss.push(total / batches.len().max(1) as f64);
        history.monitor_loss.push(pair_loss(&params, data.persons, monitor)?);
    }
    Ok((params, history))
}

/// Trains `ensemble_size` members and derives `g_ref` and the baseline
/// from the training data.
pub fn train(
    data: &TrainingData,
    reference: &EncodedPerson,
    vocab_size: usize,
    net: &NetConfig,
    cfg: &TrainConfig,
    horizon_days: f64,
) -> Result<RiskModel> {
    cfg.validate()?;
    net.validate()?;
    let n = data.persons.len();
    if data.times.len() != n || data.events.len() != n {
        return Err(TrainError::Length(format!(
            "{n} persons, {} times, {} events",
            data.times.len(),
            data.events.len()
        )));
    }
    let sets = build_risk_sets(data.times, data.events)?;
    let monitor = monitor_pairs(&sets, cfg.seed);
    let trained: Vec<(NetParams, MemberHistory)> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|k| train_member(k, data, &sets, &monitor, net, cfg, vocab_size))
        .collect::<Result<_>>()?;
    let (members, history): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let g_ref = members
        .iter()
        .map(|m| predict(m, reference).map(|p| p.g))
        .sum::<std::result::Result<f64, _>>()?
        / members.len() as f64;
    let g_all: Vec<f64> = data
        .persons
        .par_iter()
        .map(|p| predict_ensemble(&members, p))
        .collect::<Result<_>>()?;
    let baseline = breslow_baseline(&g_all, data.times, data.events, g_ref)?;
    Ok(RiskModel {
        members,
        g_ref,
        baseline,
        horizon_days,
        history,
        skipped_cases: sets.skipped(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    /// Codes carried by fewer persons than this are dropped.
    pub min_count: usize,
    /// Keep only the most recent codes when set.
    pub max_events: Option<usize>,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            min_count: 500,
            max_events: None,
        }
    }
}

/// Everything needed to turn a person into network input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub vocabulary: Vocabulary,
    pub centring: CentringSpec,
    pub index_date: MonthStamp,
    pub max_events: Option<usize>,
}

impl Encoder {
    pub fn fit(cohort: &Cohort, cfg: &EncodingConfig) -> Self {
        Self {
            vocabulary: build_vocabulary(cohort, cfg.min_count),
            centring: CentringSpec::from_persons(&cohort.persons),
            index_date: cohort.index_date,
            max_events: cfg.max_events,
        }
    }

    pub fn encode(&self, person: &Person) -> EncodedPerson {
        EncodedPerson {
            seq: encode_history_with(person, &self.vocabulary, self.index_date, self.max_events),
            predictors: predictor_vector(person, &self.centring).0,
        }
    }

    pub fn encode_all(&self, persons: &[Person]) -> Vec<EncodedPerson> {
        persons.par_iter().map(|p| self.encode(p)).collect()
    }

    /// Mean age, deprivation quintile 3, reference categories, no history.
    pub fn reference(&self) -> EncodedPerson {
        EncodedPerson {
            seq: Default::default(),
            predictors: vec![0.0; PREDICTOR_DIM],
        }
    }
}

/// A trained model with its encoder and configuration echo.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub encoder: Encoder,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub encoding: EncodingConfig,
    pub risk: RiskModel,
}

pub fn train_cohort(cohort: &Cohort, net: &NetConfig, cfg: &TrainConfig, encoding: &EncodingConfig) -> Result<TrainedModel> {
    let encoder = Encoder::fit(cohort, encoding);
    let persons = encoder.encode_all(&cohort.persons);
    let times = cohort.times();
    let events = cohort.events();
    let data = TrainingData {
        persons: &persons,
        times: &times,
        events: &events,
    };
    let risk = train(
        &data,
        &encoder.reference(),
        encoder.vocabulary.len(),
        net,
        cfg,
        cohort.horizon_days as f64,
    )?;
    Ok(TrainedModel {
        encoder,
        net: net.clone(),
        train: cfg.clone(),
        encoding: encoding.clone(),
        risk,
    })
}

impl TrainedModel {
    pub fn predict_g(&self, person: &Person) -> Result<f64> {
        self.risk.predict_g(&self.encoder.encode(person))
    }

    pub fn predict_cohort(&self, cohort: &Cohort) -> Result<Vec<f64>> {
        self.risk.predict_all(&self.encoder.encode_all(&cohort.persons))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigFile {
    net: NetConfig,
    train: TrainConfig,
    encoding: EncodingConfig,
    members: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFile {
    g_ref: f64,
    horizon_days: f64,
    skipped_cases: usize,
    centring: CentringSpec,
    index_date: MonthStamp,
    max_events: Option<usize>,
    history: Vec<MemberHistory>,
}

fn member_file(k: usize) -> String {
    format!("member_{k:03}.json")
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

fn parse_baseline_csv(text: &str, g_ref: f64) -> Result<BaselineSurvival> {
    let mut lines = text.lines();
    if lines.next() != Some("day,survival") {
        return Err(TrainError::Format("baseline.csv header must be day,survival".into()));
    }
    let mut curve = StepFunction {
        times: Vec::new(),
        values: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let (t, s) = line
            .split_once(',')
            .ok_or_else(|| TrainError::Format(format!("baseline.csv line {}: expected two fields", i + 2)))?;
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|e| TrainError::Format(format!("baseline.csv line {}: {e}", i + 2)))
        };
        curve.times.push(parse(t)?);
        curve.values.push(parse(s)?);
    }
    Ok(BaselineSurvival { g_ref, curve })
}

impl TrainedModel {
    /// Writes config, vocabulary, reference quantities, member checkpoints
    /// and `baseline.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let config = ModelConfigFile {
            net: self.net.clone(),
            train: self.train.clone(),
            encoding: self.encoding.clone(),
            members: self.risk.members.len(),
        };
        std::fs::write(dir.join("config.json"), pretty(&config))?;
        std::fs::write(dir.join("vocabulary.json"), pretty(&self.encoder.vocabulary))?;
        let reference = ReferenceFile {
            g_ref: self.risk.g_ref,
            horizon_days: self.risk.horizon_days,
            skipped_cases: self.risk.skipped_cases,
            centring: self.encoder.centring,
            index_date: self.encoder.index_date,
            max_events: self.encoder.max_events,
            history: self.risk.history.clone(),
        };
        std::fs::write(dir.join("reference.json"), pretty(&reference))?;
        std::fs::write(dir.join("baseline.csv"), self.risk.baseline.to_csv())?;
        for (k, m) in self.risk.members.iter().enumerate() {
            m.save(dir.join(member_file(k)))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| TrainError::Format(format!("{}: {e}", dir.join(name).display())))
        };
        let json = |name: &str, e: serde_json::Error| TrainError::Format(format!("{name}: {e}"));
        let config: ModelConfigFile = serde_json::from_str(&read("config.json")?).map_err(|e| json("config.json", e))?;
        let vocabulary: Vocabulary =
            serde_json::from_str(&read("vocabulary.json")?).map_err(|e| json("vocabulary.json", e))?;
        let reference: ReferenceFile =
            serde_json::from_str(&read("reference.json")?).map_err(|e| json("reference.json", e))?;
        let baseline = parse_baseline_csv(&read("baseline.csv")?, reference.g_ref)?;
        if config.members == 0 {
            return Err(TrainError::Format("model has no members".into()));
        }
        let members = (0..config.members)
            .map(|k| NetParams::from_json(&read(&member_file(k))?).map_err(TrainError::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder: Encoder {
                vocabulary,
                centring: reference.centring,
                index_date: reference.index_date,
                max_events: reference.max_events,
            },
            net: config.net,
            train: config.train,
            encoding: config.encoding,
            risk: RiskModel {
                members,
                g_ref: reference.g_ref,
                baseline,
                horizon_days: reference.horizon_days,
                history: reference.history,
                skipped_cases: reference.skipped_cases,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::CodeSequence;
    use crate::synth::{generate, GeneratorConfig};

    #[test]
    fn risk_set_sizes() {
        let s = build_risk_sets(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        let sizes: Vec<usize> = s.cases().iter().map(|e| e.at_risk).collect();
        assert_eq!(sizes, vec![3, 2]);
        assert_eq!(s.skipped(), 1);
        assert!(matches!(build_risk_sets(&[1.0], &[false]), Err(TrainError::NothingToTrain)));
    }

    #[test]
    fn censored_person_in_earlier_risk_sets() {
        let times = [1.0, 3.0, 5.0, 7.0];
        let events = [true, true, false, true];
        let s = build_risk_sets(&times, &events).unwrap();
        for e in s.cases() {
            assert_eq!(s.members(e).contains(&2), times[e.case] <= 5.0);
        }
    }

    #[test]
    fn risk_sets_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 50;
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..20) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let s = build_risk_sets(&times, &events).unwrap();
        let mut seen = 0;
        for e in s.cases() {
            let mut got: Vec<usize> = s.members(e).to_vec();
            got.sort();
            let want: Vec<usize> = (0..n).filter(|&j| times[j] >= times[e.case]).collect();
            assert_eq!(got, want);
            assert!(got.contains(&e.case));
            seen += 1;
        }
        assert_eq!(seen + s.skipped(), events.iter().filter(|&&e| e).count());
    }

    #[test]
    fn small_batches_and_controls() {
        let s = build_risk_sets(&[1.0, 2.0, 5.0, 6.0], &[true, true, false, false]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = s.epoch_batches(256, &mut rng);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 2);
        for _ in 0..100 {
            for (c, k) in s.epoch_batches(1, &mut rng).concat() {
                assert_ne!(c, k);
            }
        }
    }

    #[test]
    fn control_distribution_is_uniform() {
        // One case at t=1 with four other persons at risk.
        let times = [1.0, 2.0, 3.0, 4.0, 5.0];
        let events = [true, false, false, false, false];
        let s = build_risk_sets(&times, &events).unwrap();
        let entry = s.cases()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[s.sample_control(&entry, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-squared with 3 degrees of freedom.
        assert!(chi2 < 11.345, "{chi2}");
    }

    #[test]
    fn loss_identities() {
        assert_eq!(case_control_loss(&[0.7], &[0.7]), 2f64.ln());
        assert!(case_control_loss(&[5.0], &[0.0]) < case_control_loss(&[1.0], &[0.0]));
        let big = case_control_loss(&[800.0], &[-800.0]);
        assert!(big.is_finite() && big >= 0.0);
        assert!(case_control_loss(&[-800.0], &[800.0]).is_finite());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let err = crate::autodiff::gradient_check(
            |g, ids| {
                let cases: Vec<NodeId> = (0..3).map(|i| g.slice(ids[0], 0, i, i + 1)).collect::<std::result::Result<_, _>>()?;
                let controls: Vec<NodeId> = (0..3).map(|i| g.slice(ids[1], 0, i, i + 1)).collect::<std::result::Result<_, _>>()?;
                case_control_loss_graph(g, &cases, &controls)
            },
            &[Tensor::column(vec![0.3, -1.2, 2.0]), Tensor::column(vec![0.1, 0.5, -0.7])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn tiny_net() -> NetConfig {
        NetConfig {
            embed_dim: 4,
            gru_layers: 1,
            delta_t_scale: 1.0 / 12.0,
            ..NetConfig::default()
        }
    }

    fn tiny_data() -> (Cohort, Vec<EncodedPerson>, Encoder) {
        let cfg = GeneratorConfig {
            n_persons: 300,
            baseline_hazard_per_day: 1e-4,
            vocab_size: 10,
            seed: 2,
            ..GeneratorConfig::default()
        };
        let (cohort, _) = generate(&cfg).unwrap();
        let enc = Encoder::fit(&cohort, &EncodingConfig { min_count: 1, max_events: None });
        let persons = enc.encode_all(&cohort.persons);
        (cohort, persons, enc)
    }

    #[test]
    fn zero_epochs_keep_initial_parameters() {
        let (cohort, persons, enc) = tiny_data();
        let (times, events) = (cohort.times(), cohort.events());
        let data = TrainingData { persons: &persons, times: &times, events: &events };
        let cfg = TrainConfig { epochs: 0, ensemble_size: 2, seed: 5, ..TrainConfig::default() };
        let model = train(&data, &enc.reference(), enc.vocabulary.len(), &tiny_net(), &cfg, 1826.0).unwrap();
        for (k, m) in model.members.iter().enumerate() {
            let seed = model.history[k].init_seed;
            let init = init_params(&NetConfig { seed, ..tiny_net() }, enc.vocabulary.len()).unwrap();
            assert_eq!(m, &init);
        }
    }

    #[test]
    fn training_is_deterministic_and_saves_roundtrip() {
        let (cohort, _, _) = tiny_data();
        let cfg = TrainConfig { epochs: 2, ensemble_size: 2, batch_cases: 16, seed: 3, ..TrainConfig::default() };
        let enc = EncodingConfig { min_count: 1, max_events: Some(8) };
        let a = train_cohort(&cohort, &tiny_net(), &cfg, &enc).unwrap();
        let b = train_cohort(&cohort, &tiny_net(), &cfg, &enc).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(back, a);
        let baseline = &a.risk.baseline.curve.values;
        assert!(baseline.windows(2).all(|w| w[1] <= w[0]));
        assert!(baseline.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn ensemble_prediction_is_member_mean() {
        let p = init_params(&tiny_net(), 5).unwrap();
        let person = EncodedPerson {
            seq: CodeSequence { token_ids: vec![1, 2], kind_ids: vec![0, 1], delta_t_months: vec![0, 3] },
            predictors: vec![0.5; PREDICTOR_DIM],
        };
        let single = predict(&p, &person).unwrap().g;
        assert_eq!(predict_ensemble(std::slice::from_ref(&p), &person).unwrap(), single);
        let triple = predict_ensemble(&[p.clone(), p.clone(), p.clone()], &person).unwrap();
        assert!((triple - single).abs() < 1e-15);
    }
}
