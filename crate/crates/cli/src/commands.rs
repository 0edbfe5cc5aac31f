use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deepcox::cohort::{load_cohort, predictor_vector, save_cohort, split_5x2_stratified, CentringSpec, Cohort, Sex};
use deepcox::coxtrain::{train_cohort, TrainConfig, TrainedModel};
use deepcox::cph::{fit_cph_cohort_with, write_hazard_ratio_csv, CphModel, CphOptions};
use deepcox::explain::{age_grid_hr, hr_table, local_hr, n_exposed, parse_perturbations, write_hr_csv};
use deepcox::metrics::{evaluate, FoldRecord, FoldResults, MetricsReport};
use deepcox::synth::generate;
use serde::Serialize;

use crate::config::{MetricsConfig, RunConfig};
use crate::output::{Manifest, Staging};
use crate::report::{calibration_csv, comparison_csv, discrimination_csv, folds_csv, metrics_csv};
use crate::strata::StratifyKey;

/// Flags shared by every command.
#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct Common {
    /// JSON run configuration; defaults apply to anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; built as `<out>.partial` and renamed on success.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load_or_default(self.config.as_deref())
    }

    fn manifest(&self, command: &str, args: &impl Serialize, config: &RunConfig) -> Result<Manifest> {
        let mut m = Manifest::new(command, self.seed, serde_json::to_value(args)?, config);
        if let Some(path) = &self.config {
            m.input(path)?;
        }
        Ok(m)
    }
}

fn read_cohort(path: &Path, sex: Option<Sex>) -> Result<Cohort> {
    let cohort = load_cohort(path).with_context(|| format!("loading cohort {}", path.display()))?;
    Ok(match sex {
        Some(s) => cohort.filter_sex(s),
        None => cohort,
    })
}

fn horizon(cfg: &MetricsConfig, cohort: &Cohort) -> f64 {
    cfg.horizon_days.unwrap_or(cohort.horizon_days as f64)
}

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub sex: Option<Sex>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let mut cfg = args.common.load()?;
    if let Some(seed) = args.common.seed {
        cfg.generator.seed = seed;
    }
    if let Some(sex) = args.sex {
        cfg.generator.sex = sex;
    }
    let (cohort, truth) = generate(&cfg.generator)?;
    let stage = Staging::new(&args.common.out, args.common.force)?;
    save_cohort(&cohort, stage.path("cohort.jsonl"))?;
    let mut buf = Vec::new();
    truth.write(&mut buf)?;
    stage.write("truth.jsonl", buf)?;
    stage.write_json("config.json", &cfg)?;
    let manifest = args.common.manifest("generate", args, &cfg)?;
    stage.finish(manifest)
}

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Cohort file (JSON lines).
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub sex: Option<Sex>,
    /// Independent retrainings, written to `run_000`, `run_001`, ... with
    /// seeds `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = args.common.load()?;
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let cohort = read_cohort(&args.cohort, args.sex)?;
    let stage = Staging::new(&args.common.out, args.common.force)?;
    for r in 0..args.runs {
        let train = TrainConfig {
            seed: cfg.train.seed.wrapping_add(r as u64),
            ..cfg.train.clone()
        };
        let model = train_cohort(&cohort, &cfg.net, &train, &cfg.encoding)?;
        let dir = if args.runs == 1 {
            stage.path("")
        } else {
            stage.path(&format!("run_{r:03}"))
        };
        model.save(&dir)?;
    }
    stage.write_json("run_config.json", &cfg)?;
    let mut manifest = args.common.manifest("train", args, &cfg)?;
    manifest.input(&args.cohort)?;
    stage.finish(manifest)
}

pub fn deep_report(model: &TrainedModel, cohort: &Cohort, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let g = model.predict_cohort(cohort)?;
    Ok(evaluate(
        &g,
        &model.risk.baseline,
        &cohort.times(),
        &cohort.events(),
        horizon(cfg, cohort),
        cfg.brier_weighting,
    )?)
}

pub fn cph_g(cph: &CphModel, centring: &CentringSpec, cohort: &Cohort) -> Vec<f64> {
    cohort
        .persons
        .iter()
        .map(|p| cph.linear_predictor(&predictor_vector(p, centring).0))
        .collect()
}

pub fn cph_report(cph: &CphModel, centring: &CentringSpec, cohort: &Cohort, cfg: &MetricsConfig) -> Result<MetricsReport> {
    Ok(evaluate(
        &cph_g(cph, centring, cohort),
        &cph.baseline,
        &cohort.times(),
        &cohort.events(),
        horizon(cfg, cohort),
        cfg.brier_weighting,
    )?)
}

fn fit_cph(cohort: &Cohort, cfg: &RunConfig) -> Result<(CphModel, CentringSpec)> {
    let centring = CentringSpec::from_persons(&cohort.persons);
    let opts = CphOptions {
        ties: cfg.cph.ties,
        allow_separation: cfg.cph.allow_separation,
        ..CphOptions::default()
    };
    Ok((fit_cph_cohort_with(cohort, &centring, opts)?, centring))
}

fn write_report(stage: &Staging, prefix: &str, report: &MetricsReport) -> Result<()> {
    stage.write(&format!("{prefix}metrics.csv"), metrics_csv(&report.values()))?;
    stage.write(&format!("{prefix}calibration.csv"), calibration_csv(&report.calibration_deciles))?;
    stage.write(&format!("{prefix}discrimination.csv"), discrimination_csv(&report.discrimination_deciles))?;
    Ok(())
}

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained model directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub sex: Option<Sex>,
    /// Also write decile tables per sub-population.
    #[arg(long)]
    pub stratify: Option<StratifyKey>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<PathBuf> {
    let cfg = args.common.load()?;
    let model = TrainedModel::load(&args.model)?;
    let cohort = read_cohort(&args.cohort, args.sex)?;
    let stage = Staging::new(&args.common.out, args.common.force)?;
    let report = deep_report(&model, &cohort, &cfg.metrics)?;
    write_report(&stage, "", &report)?;
    stage.write_json("report.json", &report)?;
    if let Some(key) = args.stratify {
        let mut summary = String::from("stratum,n,events,status\n");
        for (name, idx) in key.groups(&cohort.persons) {
            let sub = cohort.subset(&idx);
            let status = match deep_report(&model, &sub, &cfg.metrics) {
                Ok(r) => {
                    write_report(&stage, &format!("strata/{key}/{name}/"), &r)?;
                    "ok".to_owned()
                }
                Err(e) => format!("skipped: {}", e.to_string().replace(',', ";")),
            };
            summary.push_str(&format!("{name},{},{},{status}\n", sub.len(), sub.event_count()));
        }
        stage.write(&format!("strata/{key}/summary.csv"), summary)?;
    }
    let mut manifest = args.common.manifest("evaluate", args, &cfg)?;
    manifest.input(&args.model)?;
    manifest.input(&args.cohort)?;
    stage.finish(manifest)
}

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub sex: Option<Sex>,
}

/// Training seed for one fold, derived from the run seed.
pub fn fold_seed(seed: u64, replication: usize, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((2 * replication + fold + 1) as u64)
}

/// Deep model and CPH trained on each training half and scored on the
/// matching test half, over a stratified 5x2 design.
pub fn compare_folds(cohort: &Cohort, cfg: &RunConfig, seed: u64) -> Result<FoldResults> {
    let splits = split_5x2_stratified(cohort, seed)?;
    let mut records = Vec::with_capacity(splits.len());
    for split in &splits {
        let train = cohort.subset(&split.train);
        let test = cohort.subset(&split.test);
        let tc = TrainConfig {
            seed: fold_seed(seed, split.replication, split.fold),
            ..cfg.train.clone()
        };
        let deep = train_cohort(&train, &cfg.net, &tc, &cfg.encoding)
            .with_context(|| format!("deep model, replication {} fold {}", split.replication + 1, split.fold + 1))?;
        let (cph, centring) = fit_cph(&train, cfg)
            .with_context(|| format!("CPH model, replication {} fold {}", split.replication + 1, split.fold + 1))?;
        records.push(FoldRecord {
            replication: split.replication,
            fold: split.fold,
            deep: deep_report(&deep, &test, &cfg.metrics)?.values(),
            cph: cph_report(&cph, &centring, &test, &cfg.metrics)?.values(),
        });
    }
    Ok(FoldResults::new(records)?)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<PathBuf> {
    let cfg = args.common.load()?;
    let seed = args.common.seed.unwrap_or(cfg.train.seed);
    let cohort = read_cohort(&args.cohort, args.sex)?;
    let stage = Staging::new(&args.common.out, args.common.force)?;
    let results = compare_folds(&cohort, &cfg, seed)?;
    stage.write("folds.csv", folds_csv(&results))?;
    stage.write("comparison.csv", comparison_csv(&results)?)?;
    let (cph, _) = fit_cph(&cohort, &cfg).context("CPH model on the full cohort")?;
    let mut hr = Vec::new();
    write_hazard_ratio_csv(&cph.hazard_ratios(), &mut hr)?;
    stage.write("cph_hazard_ratios.csv", hr)?;
    let mut manifest = args.common.manifest("compare", args, &cfg)?;
    manifest.input(&args.cohort)?;
    stage.finish(manifest)
}

#[derive(clap::Args, Clone, Debug, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model directories or glob patterns; each match is one run.
    #[arg(long, required = true, num_args = 1..)]
    pub models: Vec<String>,
    /// Perturbations, one JSON object per line.
    #[arg(long)]
    pub perturbations: PathBuf,
    /// Cohort used only to count exposed persons.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub sex: Option<Sex>,
}

pub fn expand_models(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for pat in patterns {
        let before = dirs.len();
        for entry in glob::glob(pat).with_context(|| format!("bad pattern {pat:?}"))? {
            let path = entry?;
            if path.join("config.json").is_file() {
                dirs.push(path);
            }
        }
        if dirs.len() == before {
            bail!("no model directories match {pat:?}");
        }
    }
    dirs.sort();
    dirs.dedup();
    Ok(dirs)
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<PathBuf> {
    let cfg = args.common.load()?;
    let dirs = expand_models(&args.models)?;
    let models = dirs
        .iter()
        .map(|d| TrainedModel::load(d).with_context(|| format!("loading model {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let text = std::fs::read_to_string(&args.perturbations)
        .with_context(|| format!("reading {}", args.perturbations.display()))?;
    let perturbations = parse_perturbations(&text)?;
    if perturbations.is_empty() {
        bail!("no perturbations in {}", args.perturbations.display());
    }
    let cohort = args.cohort.as_deref().map(|p| read_cohort(p, args.sex)).transpose()?;
    let mut rows = Vec::with_capacity(perturbations.len());
    for p in &perturbations {
        let mut row = local_hr(&models, p)?;
        if let Some(c) = &cohort {
            row.n_exposed = n_exposed(c, &models[0].encoder.centring, p);
        }
        rows.push(row);
    }
    let stage = Staging::new(&args.common.out, args.common.force)?;
    stage.write("local_hr.csv", write_hr_csv(&rows))?;
    stage.write("hr_table.csv", write_hr_csv(&hr_table(rows, cfg.explain.top_k)?))?;
    let age = age_grid_hr(&models, cfg.explain.age_step, &cfg.explain.age_grid)?;
    let mut grid = String::from("age_offset,hr\n");
    for (a, h) in age.grid.iter().zip(&age.hr) {
        grid.push_str(&format!("{a},{h}\n"));
    }
    grid.push_str(&format!("mean,{}\nmin,{}\nmax,{}\n", age.mean, age.min, age.max));
    stage.write("age_grid.csv", grid)?;
    let mut manifest = args.common.manifest("explain", args, &cfg)?;
    for d in &dirs {
        manifest.input(d)?;
    }
    manifest.input(&args.perturbations)?;
    if let Some(c) = &args.cohort {
        manifest.input(c)?;
    }
    stage.finish(manifest)
}
