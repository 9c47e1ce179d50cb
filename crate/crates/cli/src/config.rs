//! Sectioned run configuration. Every section must be present (it may be
//! empty); keys inside a section default to the module defaults.

use std::path::Path;

use handgf_core::graspdata::{SplitConfig, SynthConfig};
use handgf_core::graspgf::{GfTrainConfig, NoiseSchedule, ScoreSpec};
use handgf_core::hand::{EnvConfig, HandModel};
use handgf_core::rl::{PolicySpec, PpoConfig, RewardConfig};
use handgf_core::trajgen::TrajGenConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub hand: HandSection,
    pub objects: ObjectsSection,
    pub trajgen: TrajGenConfig,
    pub gf: GfSection,
    pub rl: RlSection,
    pub eval: EvalSection,
    pub server: ServerSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandSection {
    pub env: EnvConfig,
    /// Replaces the default hand when given; all of its keys are then required.
    pub model: HandModel<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectsSection {
    pub synth: SynthConfig,
    pub split: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GfSection {
    pub schedule: NoiseSchedule,
    pub model: ScoreSpec,
    pub train: GfTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub policy: PolicySpec,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            ppo: PpoConfig {
                total_steps: 1_000_000,
                ..Default::default()
            },
            reward: RewardConfig::default(),
            policy: PolicySpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    pub repeats: usize,
    pub targets_per_object: usize,
    /// Objects per split; zero keeps all.
    pub max_objects: usize,
    /// Noise levels `(degrees, centimeters)` swept by `eval --noise-sweep`.
    pub noise_levels: Vec<(f64, f64)>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            repeats: 5,
            targets_per_object: 5,
            max_objects: 0,
            noise_levels: vec![(2.0, 2.0), (5.0, 5.0)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub addr: String,
    pub tick_hz: f64,
    /// Tick once per fresh wrist input instead of on the clock.
    pub lockstep: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            tick_hz: 20.0,
            lockstep: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| CliError::Config(e);
        self.hand
            .model
            .validate()
            .map_err(|e| cfg(format!("hand.model: {e}")))?;
        self.hand
            .env
            .validate()
            .map_err(|e| cfg(format!("hand.env: {e}")))?;
        self.gf
            .schedule
            .validate()
            .map_err(|e| cfg(format!("gf.schedule: {e}")))?;
        self.rl
            .reward
            .validate()
            .map_err(|e| cfg(format!("rl.reward: {e}")))?;
        self.rl
            .ppo
            .validate(&self.hand.env)
            .map_err(|e| cfg(format!("rl.ppo: {e}")))?;
        if self.trajgen.n_patterns < 2 || self.trajgen.n_test_patterns >= self.trajgen.n_patterns {
            return Err(cfg(
                "trajgen: need at least two patterns and a nonempty training share".into(),
            ));
        }
        if self.eval.seeds.is_empty() || self.eval.repeats == 0 || self.eval.targets_per_object == 0
        {
            return Err(cfg(
                "eval: seeds, repeats and targets_per_object must be nonempty".into(),
            ));
        }
        if !(self.server.tick_hz > 0.0) {
            return Err(cfg("server.tick_hz must be positive".into()));
        }
        Ok(())
    }
}
