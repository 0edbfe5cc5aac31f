use std::path::Path;

use anyhow::{Context, Result};
use deepcox::coxtrain::{EncodingConfig, TrainConfig};
use deepcox::cph::Ties;
use deepcox::metrics::BrierWeighting;
use deepcox::risknet::NetConfig;
use deepcox::synth::GeneratorConfig;
use serde::{Deserialize, Serialize};

/// Every knob of the pipeline. Each command reads the sections it needs and
/// echoes the whole thing into its manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub encoding: EncodingConfig,
    pub metrics: MetricsConfig,
    pub cph: CphConfig,
    pub explain: ExplainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Prediction horizon; the cohort's own horizon when absent.
    pub horizon_days: Option<f64>,
    pub brier_weighting: BrierWeighting,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            horizon_days: None,
            brier_weighting: BrierWeighting::Ipcw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CphConfig {
    pub ties: Ties,
    /// Keep fits with diverging coefficients instead of failing the fold.
    pub allow_separation: bool,
}

impl Default for CphConfig {
    fn default() -> Self {
        Self {
            ties: Ties::Efron,
            allow_separation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub top_k: usize,
    /// Age step (years) for the continuous-age hazard ratio.
    pub age_step: f64,
    /// Age offsets from the mean at which the age step is evaluated.
    pub age_grid: Vec<f64>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            age_step: 1.0,
            age_grid: vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
