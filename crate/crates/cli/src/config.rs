//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use dbmm::envs::{build_fig1_env, build_phase_grid, generate_random_env, EnvSpec, GeneratorParams};
use dbmm::pipeline::PipelineConfig;
use dbmm::qlearning::QLearningConfig;
use dbmm::LabelSet;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where `gen-env` takes its environment from.
///
/// Externally tagged: an internally tagged enum buffers its contents, and
/// with arbitrary-precision numbers that turns every float into a map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSource {
    #[default]
    Fig1,
    PhaseGrid { size: usize, phases: usize },
    Random(GeneratorParams),
}

impl EnvSource {
    /// Materialise into a spec; `seed` replaces the generator seed when given.
    pub fn to_spec(&self, seed: Option<u64>) -> Result<EnvSpec, CliError> {
        match self {
            EnvSource::Fig1 => {
                build_fig1_env();
                Ok(EnvSpec::Fig1)
            }
            EnvSource::PhaseGrid { size, phases } => {
                build_phase_grid(*size, *phases).map_err(|e| CliError::Data(e.to_string()))?;
                Ok(EnvSpec::PhaseGrid {
                    size: *size,
                    phases: *phases,
                })
            }
            EnvSource::Random(params) => {
                let params = GeneratorParams {
                    seed: seed.unwrap_or(params.seed),
                    ..params.clone()
                };
                let (_, ground_truth) = generate_random_env(&params).map_err(|e| CliError::Data(e.to_string()))?;
                Ok(EnvSpec::Generated { ground_truth })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub count: usize,
    pub max_len: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            count: 500,
            max_len: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub depth: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { depth: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 1,
            max_steps: 2000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the generator, the trace sampler and the learner.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub env: EnvSource,
    pub traces: TraceConfig,
    pub pipeline: PipelineConfig,
    pub verify: VerifyConfig,
    pub qlearning: QLearningConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.qlearning.validate().map_err(|e| CliError::Data(e.to_string()))?;
        if self.jobs == Some(0) {
            return Err(CliError::Data("jobs must be positive".into()));
        }
        if self.traces.max_len == 0 {
            return Err(CliError::Data("traces.max_len must be positive".into()));
        }
        if self.verify.depth == 0 {
            return Err(CliError::Data("verify.depth must be positive".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// `a,b` is the set {a, b}; an empty string or `{}` is the empty set.
pub fn parse_label_set(text: &str) -> LabelSet {
    let text = text.trim().trim_start_matches('{').trim_end_matches('}');
    LabelSet::new(text.split(',').map(str::trim).filter(|p| !p.is_empty()))
}
