//! Pipeline configuration: one JSON file covering every stage, with flag
//! overrides applied on top by the binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use drivescene_core::distill::{ModelConfig, TrainSettings};
use drivescene_core::mining::{ConsistencyRuleSet, FusionPolicy, WindowConfig};
use drivescene_core::quant::QuantConfig;
use drivescene_core::synth::{GenerationConfig, ScoreWeights};

use crate::errors::RunError;

/// Environment variable that overrides the inference endpoint.
pub const ENDPOINT_ENV: &str = "DRIVESCENE_ENDPOINT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub frames: Option<PathBuf>,
    pub vlm_labels: Option<PathBuf>,
    pub expert_labels: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub prompt_library: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningStageConfig {
    pub window: WindowConfig,
    pub rules: ConsistencyRuleSet,
    pub fusion: FusionPolicy,
    /// Confidence assigned to labels parsed from endpoint responses, which
    /// carry no confidence signal of their own.
    pub vlm_confidence: f64,
}

impl Default for MiningStageConfig {
    fn default() -> Self {
        MiningStageConfig {
            window: WindowConfig::default(),
            rules: ConsistencyRuleSet::default(),
            fusion: FusionPolicy::default(),
            vlm_confidence: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthStageConfig {
    pub scenes: usize,
    pub generation: GenerationConfig,
    /// Candidate captions requested per scene from the generator endpoint;
    /// 0 disables the text-to-image selection step.
    pub candidates_per_scene: usize,
    pub best_n: usize,
    pub score_weights: ScoreWeights,
}

impl Default for SynthStageConfig {
    fn default() -> Self {
        SynthStageConfig {
            scenes: 50,
            generation: GenerationConfig::default(),
            candidates_per_scene: 0,
            best_n: 2,
            score_weights: ScoreWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptStageConfig {
    pub budget: usize,
    /// Cap on evaluation frames scored per round.
    pub max_eval_frames: usize,
}

impl Default for PromptOptStageConfig {
    fn default() -> Self {
        PromptOptStageConfig {
            budget: 50,
            max_eval_frames: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillStageConfig {
    pub model: ModelConfig,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub settings: TrainSettings,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub teacher_corpus: usize,
    pub train_corpus: usize,
    pub heldout_corpus: usize,
    pub context_len: usize,
    pub target_len: usize,
}

impl Default for DistillStageConfig {
    fn default() -> Self {
        DistillStageConfig {
            model: ModelConfig {
                vocab: 12,
                context: 3,
                d_embed: 8,
                d_hidden: 16,
            },
            adapter_rank: 4,
            adapter_alpha: 8.0,
            settings: TrainSettings::default(),
            teacher_steps: 1_500,
            teacher_lr: 0.5,
            teacher_corpus: 512,
            train_corpus: 48,
            heldout_corpus: 256,
            context_len: 2,
            target_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantStageConfig {
    pub config: QuantConfig,
    pub instances: usize,
    pub rows: usize,
    pub cols: usize,
    pub samples: usize,
    pub heavy_tailed: bool,
}

impl Default for QuantStageConfig {
    fn default() -> Self {
        QuantStageConfig {
            config: QuantConfig::default(),
            instances: 100,
            rows: 16,
            cols: 64,
            samples: 24,
            heavy_tailed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub endpoint: Option<String>,
    pub model_id: String,
    /// JSON file mapping image_ref to response text; when set, stages use
    /// the in-process mock client instead of HTTP.
    pub mock_script: Option<PathBuf>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            endpoint: None,
            model_id: "mock-vlm".to_string(),
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub concurrency: Concurrency,
    pub paths: PathsConfig,
    pub mining: MiningStageConfig,
    pub synth: SynthStageConfig,
    pub prompt_opt: PromptOptStageConfig,
    pub distill: DistillStageConfig,
    pub quant: QuantStageConfig,
    pub inference: InferenceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Concurrency(pub usize);

impl Default for Concurrency {
    fn default() -> Self {
        Concurrency(8)
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let contents = std::fs::read_to_string(path)
            .map_err(|e| RunError::input(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&contents)
            .map_err(|e| RunError::input(format!("config {}: {e}", path.display())))
    }

    /// Endpoint resolution order: environment variable, then config.
    pub fn endpoint(&self) -> Option<String> {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|v| !v.is_empty())
            .or_else(|| self.inference.endpoint.clone())
    }

    /// Hash of the canonical config JSON, recorded in run metadata.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn output_dir(&self) -> Result<&Path, RunError> {
        self.paths
            .output_dir
            .as_deref()
            .ok_or_else(|| RunError::input("paths.output_dir is required"))
    }

    pub fn require(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf, RunError> {
        value
            .clone()
            .ok_or_else(|| RunError::input(format!("paths.{field} is required")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        let cfg: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.concurrency.0, 8);
        assert_eq!(cfg.mining.window.reference_distance_m, 10.0);
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn config_round_trips() {
        let cfg = PipelineConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
}
