//! Flat `key = value` experiment configuration files.
//!
//! One assignment per line, `#` comments, unknown keys rejected. Every
//! field of [`ExperimentConfig`] has a documented key; anything not set
//! keeps its default.
//!
//! ```text
//! # condition
//! seed = 11
//! n = 200
//! dim = 64
//! noise = 0.1
//! attack = mixed
//! intensity = plusplus
//! component = all
//! poison_rate = 0.35
//! stealth_eps = 0.15
//! target_answer = No
//! attacker_queries = 8
//! retrieval.theta = 0.2
//! retrieval.m = 10
//! retrieval.w_img = 0.5
//! rerank.k = 5
//! rerank.seed = 24301
//! attack.iters = 300
//! attack.alpha = 0.05
//! attack.beta = 0.05
//! attack.eps_ball = 0.1
//! attack.lambda1 = 1.0
//! attack.lambda2 = 1.0
//! attack.stealth_fit = true
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::experiment::{AttackKind, ExperimentConfig, Intensity, TargetComponent};

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Precondition(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Precondition(format!(
            "bad boolean '{value}' for key '{key}'"
        ))),
    }
}

/// Apply `key = value` assignments from `text` on top of `base`.
pub fn apply_config_text(text: &str, mut base: ExperimentConfig) -> Result<ExperimentConfig> {
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Precondition(format!("config line {} is not 'key = value': {raw:?}", idx + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "seed" => base.seed = parse_num(key, value)?,
            "n" => base.n = parse_num(key, value)?,
            "dim" => base.dim = parse_num(key, value)?,
            "noise" | "noise_level" => base.noise_level = parse_num(key, value)?,
            "poison_rate" => base.poison_rate = parse_num(key, value)?,
            "attack" | "attack_kind" => base.attack_kind = AttackKind::parse(value)?,
            "intensity" => base.intensity = Intensity::parse(value)?,
            "component" | "target_component" => {
                base.target_component = TargetComponent::parse(value)?
            }
            "stealth_eps" => base.stealth_eps = parse_num(key, value)?,
            "target_answer" => base.target_answer = value.to_string(),
            "attacker_queries" => base.attacker_queries = parse_num(key, value)?,
            "retrieval.theta" => base.pipeline.retrieval.theta = parse_num(key, value)?,
            "retrieval.m" => base.pipeline.retrieval.m = parse_num(key, value)?,
            "retrieval.w_img" => base.pipeline.retrieval.w_img = parse_num(key, value)?,
            "rerank.k" => base.pipeline.rerank.k = parse_num(key, value)?,
            "rerank.seed" => base.pipeline.rerank.seed = parse_num(key, value)?,
            "attack.iters" => base.attack.iters = parse_num(key, value)?,
            "attack.alpha" => base.attack.alpha = parse_num(key, value)?,
            "attack.beta" | "attack.beta_step" => base.attack.beta_step = parse_num(key, value)?,
            "attack.eps_ball" => base.attack.eps_ball = parse_num(key, value)?,
            "attack.lambda1" => base.attack.lambda1 = parse_num(key, value)?,
            "attack.lambda2" => base.attack.lambda2 = parse_num(key, value)?,
            "attack.stealth_fit" => base.attack.stealth_fit = parse_bool(key, value)?,
            other => {
                return Err(Error::Precondition(format!(
                    "unknown config key '{other}' (line {})",
                    idx + 1
                )))
            }
        }
    }
    base.pipeline.retrieval.validate()?;
    Ok(base)
}

/// Load a config file on top of the defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    apply_config_text(&text, ExperimentConfig::default())
}
