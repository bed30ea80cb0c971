//! Run configuration: a JSON file overlaid by command-line flags.
//!
//! Every flag has a config-file equivalent and flags win. Unknown keys in
//! the file are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use avfm_core::backbone::BackboneConfig;
use avfm_core::datagen::DatagenConfig;
use avfm_core::error::{Error, Result};
use avfm_core::lora::InjectionPlan;
use avfm_core::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub save_maps: bool,
    /// Gaussian smoothing of anomaly maps before scoring; 0 disables.
    pub smooth_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            save_maps: false,
            smooth_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_objects: Vec<String>,
    pub eval_objects: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_objects: vec![
                "apple".into(),
                "fabric".into(),
                "hammer".into(),
                "paper".into(),
                "plastic".into(),
                "tomato".into(),
            ],
            eval_objects: vec!["battery".into(), "denim".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub plan: InjectionPlan,
    pub datagen: DatagenConfig,
    /// Accepted samples to generate.
    pub n: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            backbone: BackboneConfig::default(),
            plan: InjectionPlan::default(),
            datagen: DatagenConfig::default(),
            n: 512,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

impl RunConfig {

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
