use std::path::Path;

use muxnet::compiler::CompileConfig;
use muxnet::costmodel::EnergyCoefficients;
use muxnet::frontend::{CicConfig, StimChannelConfig, LoopConfig};
use muxnet::pipeline::SegmentConfig;
use muxnet::verify::VerifyConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub compile: CompileConfig,
    pub cic: CicConfig,
    pub input_rate_hz: f64,
    /// Right shift applied to decimated samples before the first layer.
    pub input_shift: u32,
    /// Per-class early-stop thresholds; empty selects the safe defaults.
    pub thresholds: Vec<u32>,
    pub channels: Vec<StimChannelConfig>,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub verify: VerifySection,
    pub cost: CostSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// True stage of each generated epoch.
    pub stages: Vec<u32>,
    pub noise_amplitude: f64,
    pub input_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_len: u32,
    pub classes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub random_cases: u64,
    pub decomposition_lines: u64,
    pub cic_samples: usize,
    pub model_inputs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    /// Chunk widths swept when no model is given.
    pub n_values: Vec<u32>,
    pub energy: EnergyCoefficients,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lc = LoopConfig::default();
        Self {
            seed: 0,
            compile: CompileConfig::default(),
            cic: lc.cic,
            input_rate_hz: lc.input_rate_hz,
            input_shift: 14,
            thresholds: Vec::new(),
            channels: lc.channels,
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            verify: VerifySection::default(),
            cost: CostSection::default(),
        }
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            stages: vec![0, 1, 2, 2, 3, 2, 4, 2],
            noise_amplitude: 300.0,
            input_bits: 16,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 500,
            classes: 5,
        }
    }
}

impl Default for VerifySection {
    fn default() -> Self {
        let v = VerifyConfig::default();
        Self {
            random_cases: v.random_cases,
            decomposition_lines: v.decomposition_lines,
            cic_samples: v.cic_samples,
            model_inputs: v.model_inputs,
        }
    }
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            n_values: vec![1, 2],
            energy: EnergyCoefficients::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn segment(&self) -> SegmentConfig {
        self.compile.segment
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            cic: self.cic,
            input_rate_hz: self.input_rate_hz,
            segment: self.segment(),
            thresholds: self.thresholds.clone(),
            channels: self.channels.clone(),
        }
    }

    pub fn verify_config(&self, seed: u64) -> VerifyConfig {
        VerifyConfig {
            seed,
            random_cases: self.verify.random_cases,
            decomposition_lines: self.verify.decomposition_lines,
            cic_samples: self.verify.cic_samples,
            model_inputs: self.verify.model_inputs,
            fault: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 7\n[compile]\nn = 1\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.compile.n, 1);
        assert_eq!(cfg.compile.activation_bits, 8);
        assert_eq!(cfg.channels.len(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 7\n").is_err());
    }
}
