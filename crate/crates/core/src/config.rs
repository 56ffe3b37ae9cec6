//! Training configuration and the named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::charmodel::CharacterModel;
use crate::curriculum::CurriculumConfig;
use crate::env::{EnvConfig, RewardConfig};
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;
use crate::policy::{PolicyConfig, LOG_STD_MAX, LOG_STD_MIN};

/// Character that ships with the crate.
pub const BUILTIN_BIPED: &str = "builtin:biped9";

/// Everything a training run needs besides the seed.
///
/// The milestone constants live in `curriculum`; [`TrainConfig::env_config`]
/// copies them into the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// `builtin:biped9` or a path to a character file. Presets for
    /// characters without a bundled model leave this empty.
    #[serde(default)]
    pub character: Option<String>,
    pub reward: RewardConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
}

#[allow(clippy::too_many_arguments)]
fn reward(v: f64, w_v: f64, w_ux: f64, w_uy: f64, w_uz: f64, w_l: f64, e_a: f64, w_e: f64) -> RewardConfig {
    RewardConfig {
        v_hat_final: v,
        w_v,
        w_ux,
        w_uy,
        w_uz,
        w_l,
        e_a,
        w_e,
    }
}

/// Preset names with their target velocity.
pub const PRESETS: [(&str, f64); 9] = [
    ("biped-walk", 1.0),
    ("biped-run", 5.0),
    ("quadruped-trot", 2.0),
    ("quadruped-gallop", 7.0),
    ("hexapod-walk", 2.0),
    ("hexapod-run", 4.0),
    ("humanoid-walk", 1.5),
    ("humanoid-run", 5.0),
    ("humanoid-backward", -1.5),
];

impl TrainConfig {
    pub fn with_reward(reward: RewardConfig, character: Option<&str>) -> Self {
        Self {
            character: character.map(String::from),
            reward,
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            learner: LearnerConfig::default(),
            curriculum: CurriculumConfig::default(),
        }
    }

    /// A named preset, or `None` for an unknown name.
    pub fn preset(name: &str) -> Option<Self> {
        let biped = Some(BUILTIN_BIPED);
        let cfg = match name {
            "biped-walk" => Self::with_reward(reward(1.0, 3.0, 1.0, 1.0, 1.0, 3.0, 4.0, 0.4), biped),
            "biped-run" => Self::with_reward(reward(5.0, 3.0, 1.0, 1.0, 1.0, 3.0, 7.0, 0.3), biped),
            "quadruped-trot" => Self::with_reward(reward(2.0, 4.0, 0.5, 0.5, 1.0, 3.0, 4.0, 0.2), None),
            "quadruped-gallop" => Self::with_reward(reward(7.0, 4.0, 0.5, 0.5, 1.0, 3.0, 11.0, 0.35), None),
            "hexapod-walk" => Self::with_reward(reward(2.0, 3.0, 1.0, 1.0, 1.0, 3.0, 4.0, 0.2), None),
            "hexapod-run" => Self::with_reward(reward(4.0, 3.0, 1.0, 1.0, 1.0, 3.0, 7.0, 0.2), None),
            "humanoid-walk" => Self::with_reward(reward(1.5, 3.0, 1.0, 1.5, 1.0, 3.0, 6.0, 0.3), None),
            "humanoid-run" => Self::with_reward(reward(5.0, 3.0, 1.0, 1.5, 1.0, 3.0, 9.0, 0.15), None),
            "humanoid-backward" => Self::with_reward(reward(-1.5, 3.0, 1.0, 1.5, 1.0, 3.0, 6.0, 0.3), None),
            _ => return None,
        };
        Some(cfg)
    }

    /// Parses a JSON document; errors name the offending field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                field: if path == "." { "config".into() } else { path },
                message: e.inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.curriculum.validate()?;
        self.env_config().validate()?;
        self.learner.validate()?;
        let p = &self.policy;
        if p.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config {
                field: "policy.hidden".into(),
                message: "layer widths must be positive".into(),
            });
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&p.init_log_std) {
            return Err(Error::Config {
                field: "policy.init_log_std".into(),
                message: format!("must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]"),
            });
        }
        Ok(())
    }

    /// Environment settings with the milestone constants of the curriculum.
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            milestone_k: self.curriculum.k,
            milestone_p: self.curriculum.p,
            ..self.env.clone()
        }
    }

    /// Loads the configured character.
    pub fn load_character(&self) -> Result<CharacterModel> {
        match self.character.as_deref() {
            None => Err(Error::Config {
                field: "character".into(),
                message: "no bundled model for this preset; pass a character file".into(),
            }),
            Some(BUILTIN_BIPED) => Ok(CharacterModel::biped9()),
            Some(path) => CharacterModel::from_path(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for (name, v) in PRESETS {
            let cfg = TrainConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.reward.v_hat_final, v);
        }
        assert!(TrainConfig::preset("biped-crawl").is_none());
    }

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig::preset("humanoid-run").unwrap();
        assert_eq!(TrainConfig::from_json_str(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = r#"{"reward": {"v_hat_final": 1, "w_v": 3, "w_ux": 1, "w_uy": 1, "w_uz": 1, "w_l": 3, "e_a": 4, "w_e": 0.4},
                      "learner": {"gamma": "high"}}"#;
        match TrainConfig::from_json_str(bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "learner.gamma"),
            other => panic!("{other:?}"),
        }
        let mut cfg = TrainConfig::preset("biped-walk").unwrap();
        cfg.curriculum.k = 0.0;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "curriculum.k"),
            other => panic!("{other:?}"),
        }
    }
}
