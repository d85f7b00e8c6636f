//! Run configuration: one JSON document covering the model shape, both
//! training stages, adapter hyperparameters, corpus generation, and paths.
//! The loaded value is echoed verbatim into every artifact this tool writes.

use echo_moe::error::{Error, Result};
use echo_moe::model::ModelConfig;
use echo_moe::train::TrainPlan;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "ECHO_MOE_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraParams {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraParams {
    fn default() -> Self {
        LoraParams { rank: 8, alpha: 16.0, dropout: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// caption pairs to generate
    pub count: usize,
    pub image_side: usize,
    /// planted near-duplicate fraction of the instruction corpus
    pub duplicate_rate: f64,
    /// instruction records to generate (duplicates included)
    pub instruction_count: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            count: 50,
            image_side: 28,
            duplicate_rate: 0.1,
            instruction_count: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub stage_i: TrainPlan,
    pub stage_ii: TrainPlan,
    pub lora: LoraParams,
    pub synth: SynthParams,
    pub decode_max_new: usize,
    /// "words" or "chars"
    pub eval_tokenize: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        RunConfig {
            seed,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::desk(),
            stage_i: TrainPlan::stage_i(seed),
            stage_ii: TrainPlan::stage_ii(seed),
            lora: LoraParams::default(),
            synth: SynthParams::default(),
            decode_max_new: 40,
            eval_tokenize: "words".to_string(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by the config file when given, then by the
    /// seed-override environment variable.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Data(format!("reading config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("parsing config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .parse()
                .map_err(|e| Error::Data(format!("{SEED_ENV}={v:?} is not a seed: {e}")))?;
        }
        cfg.sync_seeds();
        Ok(cfg)
    }

    /// Stamp the root seed into both stage plans.
    pub fn sync_seeds(&mut self) {
        self.stage_i.seed = self.seed;
        self.stage_ii.seed = self.seed;
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
