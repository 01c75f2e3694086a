//! The run configuration document. Every field is optional; command-line
//! flags take precedence over whatever the file says.

use std::path::{Path, PathBuf};

use mowst::confidence::ConfidenceSpec;
use mowst::experts::ExpertDocument;
use mowst::graph::SpecializationParams;
use mowst::theory::SuiteConfig;
use mowst::training::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<DataSource>,
    pub train: Option<TrainConfig>,
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub cost: CostConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Where a command's graph comes from. Exactly one per run.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    File {
        path: PathBuf,
        /// Blindspot side information written next to the graph by `gen`.
        #[serde(default)]
        meta: Option<PathBuf>,
    },
    Specialization {
        #[serde(default = "default_n_per_group")]
        n_per_group: usize,
        #[serde(default = "default_spec_f")]
        f: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Blindspot {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_blindspot_f")]
        f: usize,
    },
}

fn default_n_per_group() -> usize {
    SpecializationParams::default().n_per_group
}

fn default_spec_f() -> usize {
    SpecializationParams::default().f
}

fn default_noise() -> f64 {
    SpecializationParams::default().noise
}

fn default_k() -> usize {
    2
}

fn default_blindspot_f() -> usize {
    4
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Group-problem theorem, tightness, binary window, quasiconvexity.
    #[default]
    Theorem,
    Blindspot,
    All,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub suite: Suite,
    pub theorem: SuiteConfig,
    pub quasiconvexity: QuasiConfig,
    pub blindspot: BlindspotConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            suite: Suite::Theorem,
            theorem: SuiteConfig::default(),
            quasiconvexity: QuasiConfig::default(),
            blindspot: BlindspotConfig::default(),
        }
    }
}

/// A confidence to probe; `gate` supplies the weights of a learnable `G`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateCheck {
    pub spec: ConfidenceSpec,
    #[serde(default)]
    pub gate: Option<ExpertDocument>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuasiConfig {
    pub trials: usize,
    pub classes: Vec<usize>,
    /// Empty means the built-in set of fixed confidences.
    pub specs: Vec<GateCheck>,
}

impl Default for QuasiConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            classes: vec![2, 3, 5],
            specs: vec![],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlindspotConfig {
    pub radii: Vec<usize>,
    pub f: usize,
    pub draws: usize,
}

impl Default for BlindspotConfig {
    fn default() -> Self {
        Self {
            radii: vec![1, 2],
            f: 4,
            draws: 50,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub f: usize,
    pub layers: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { f: 256, layers: 3 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_valid() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.verify.suite, Suite::Theorem);
        assert_eq!(c.cost.f, 256);
    }

    #[test]
    fn data_sources_parse_with_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"data":{"kind":"specialization","noise":0.3}}"#).unwrap();
        assert_eq!(
            c.data,
            Some(DataSource::Specialization {
                n_per_group: 100,
                f: 8,
                noise: 0.3
            })
        );
        let c: RunConfig = serde_json::from_str(r#"{"data":{"kind":"file","path":"g.json"}}"#).unwrap();
        assert!(matches!(c.data, Some(DataSource::File { meta: None, .. })));
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede":1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data":{"kind":"blindspot","q":1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"verify":{"theorem":{"binry":3}}}"#).is_err());
    }
}
