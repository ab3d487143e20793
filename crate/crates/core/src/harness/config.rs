use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::DEFAULT_THRESHOLDS;
use crate::corpus::SynthConfig;
use crate::cpc::CpcConfig;
use crate::grounder::GrounderConfig;
use crate::vgcl::{CurriculumConfig, VariantFlags};
use crate::{Error, Result};

/// Corpus split files. When `train` is unset the corpus is synthesized
/// from `RunConfig::synth` and the run seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcRunConfig {
    pub model: CpcConfig,
    pub steps: usize,
}

impl Default for CpcRunConfig {
    fn default() -> Self {
        CpcRunConfig { model: CpcConfig::default(), steps: 2000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VgclRunConfig {
    pub curriculum: CurriculumConfig,
    pub flags: VariantFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_thresholds: DEFAULT_THRESHOLDS.to_vec() }
    }
}

/// Everything one experiment needs. Every field has a default and unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusPaths,
    pub synth: SynthConfig,
    pub cpc: CpcRunConfig,
    pub vgcl: VgclRunConfig,
    pub grounding: GrounderConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusPaths::default(),
            synth: SynthConfig::default(),
            cpc: CpcRunConfig::default(),
            vgcl: VgclRunConfig::default(),
            grounding: GrounderConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.cpc.model.validate()?;
        self.grounding.validate()?;
        if self.cpc.model.d != self.grounding.d {
            return Err(Error::Config(format!("pretraining width {} differs from grounder width {}", self.cpc.model.d, self.grounding.d)));
        }
        if self.cpc.model.kernel != self.grounding.audio_kernel {
            return Err(Error::Config(format!(
                "pretraining kernel {} differs from grounder audio kernel {}",
                self.cpc.model.kernel, self.grounding.audio_kernel
            )));
        }
        if self.eval.iou_thresholds.is_empty() || self.eval.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("iou thresholds must be a non-empty list within [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}
