//! TOML configuration. Every key is optional; missing keys take the
//! defaults below.

use std::path::{Path, PathBuf};
use std::time::Duration;

use refn_core::grpo::HyperParams;
use refn_core::task::TaskConfig;
use refn_core::validator::BEAM_WIDTH;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENDPOINT_ENV: &str = "REFN_GEN_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub iters: usize,
    pub grpo: HyperParams,
    pub task: TaskSection,
    pub fuzz: FuzzSection,
    pub paths: PathSection,
    pub generation: GenerationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Idle gap that closes an ADU, in milliseconds.
    pub adu_gap_ms: u64,
    pub pair_threshold: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzSection {
    pub budget: usize,
    pub beam: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub dataset: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_candidates: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            iters: 200,
            grpo: HyperParams::default(),
            task: TaskSection::default(),
            fuzz: FuzzSection::default(),
            paths: PathSection::default(),
            generation: GenerationSection::default(),
        }
    }
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskConfig::default();
        TaskSection {
            adu_gap_ms: t.adu_gap.as_millis() as u64,
            pair_threshold: t.pair_threshold,
            top_k: t.top_k,
        }
    }
}

impl Default for FuzzSection {
    fn default() -> Self {
        FuzzSection {
            budget: 500,
            beam: BEAM_WIDTH,
        }
    }
}

impl Default for PathSection {
    fn default() -> Self {
        PathSection {
            dataset: PathBuf::from("dataset"),
            reports: PathBuf::from("reports"),
        }
    }
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            endpoint: None,
            timeout_ms: 10_000,
            max_candidates: 4,
        }
    }
}

impl Config {
    /// Reads and validates a config file. Relative paths inside it are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A non-empty `REFN_GEN_ENDPOINT` replaces the configured endpoint.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENDPOINT_ENV) {
            let v = v.trim();
            if !v.is_empty() {
                self.generation.endpoint = Some(v.to_string());
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        self.grpo.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.task.adu_gap_ms == 0 {
            return bad("task.adu_gap_ms must be positive");
        }
        if !(self.task.pair_threshold > 0.0 && self.task.pair_threshold <= 1.0) {
            return bad("task.pair_threshold must lie in (0, 1]");
        }
        if self.task.top_k == 0 {
            return bad("task.top_k must be at least 1");
        }
        if self.fuzz.budget == 0 {
            return bad("fuzz.budget must be at least 1");
        }
        if self.fuzz.beam == 0 {
            return bad("fuzz.beam must be at least 1");
        }
        if self.generation.max_candidates == 0 {
            return bad("generation.max_candidates must be at least 1");
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            adu_gap: Duration::from_millis(self.task.adu_gap_ms),
            pair_threshold: self.task.pair_threshold,
            top_k: self.task.top_k,
        }
    }
}
