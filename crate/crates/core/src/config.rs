//! Plain-text run configuration: dotted `section.key = value` lines with
//! `#` comments, parsed over built-in defaults. Unknown keys and malformed
//! values are hard errors that name the offending key, so typos can never
//! silently fall back to defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::controller::{DqnConfig, RewardMode};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::events::SegmenterConfig;
use crate::harness::RunConfig;
use crate::perception::PerceptionConfig;

/// Every tunable of a run, grouped by subsystem.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FullConfig {
    pub env: EnvConfig,
    pub perception: PerceptionConfig,
    pub dqn: DqnConfig,
    pub segmenter: SegmenterConfig,
    pub run: RunConfig,
}

impl FullConfig {
    /// Validates every section.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.perception.validate()?;
        self.dqn.validate()?;
        self.segmenter.validate()?;
        self.run.validate()
    }

    /// Parses config text over the defaults. Later lines override earlier
    /// ones. The result is NOT validated here (callers validate once all
    /// overrides, including command-line ones, are in).
    pub fn parse(text: &str) -> Result<FullConfig> {
        let mut cfg = FullConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Data(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    idx + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<FullConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FullConfig::parse(&text)
    }

    /// Applies one `section.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env.world_size" => self.env.world_size = num(key, value)?,
            "env.frame_px" => self.env.frame_px = num(key, value)?,
            "env.agent_step" => self.env.agent_step = num(key, value)?,
            "env.agent_turn" => self.env.agent_turn = num(key, value)?,
            "env.fov" => self.env.fov = num(key, value)?,
            "env.target_speed" => self.env.target_speed = num(key, value)?,
            "env.event_dwell_min" => self.env.event_dwell.0 = num(key, value)?,
            "env.event_dwell_max" => self.env.event_dwell.1 = num(key, value)?,
            "env.nominal_dist" => self.env.nominal_dist = num(key, value)?,
            "env.target_enabled" => self.env.target_enabled = num(key, value)?,
            "env.seed" => self.env.seed = num(key, value)?,
            "perception.feat_h" => self.perception.feat_h = num(key, value)?,
            "perception.feat_w" => self.perception.feat_w = num(key, value)?,
            "perception.feat_d" => self.perception.feat_d = num(key, value)?,
            "perception.tau" => self.perception.tau = num(key, value)?,
            "perception.learn_rate" => self.perception.learn_rate = num(key, value)?,
            "perception.hidden_dim" => self.perception.hidden_dim = num(key, value)?,
            "perception.encoder_seed" => self.perception.encoder_seed = num(key, value)?,
            "dqn.gamma" => self.dqn.gamma = num(key, value)?,
            "dqn.batch_size" => self.dqn.batch_size = num(key, value)?,
            "dqn.buffer_capacity" => self.dqn.buffer_capacity = num(key, value)?,
            "dqn.learn_rate" => self.dqn.learn_rate = num(key, value)?,
            "dqn.eps_start" => self.dqn.eps_start = num(key, value)?,
            "dqn.eps_final" => self.dqn.eps_final = num(key, value)?,
            "dqn.eps_decay_steps" => self.dqn.eps_decay_steps = num(key, value)?,
            "dqn.target_sync_every" => self.dqn.target_sync_every = num(key, value)?,
            "dqn.reward_mode" => self.dqn.reward_mode = RewardMode::parse(value)?,
            "dqn.reward_mix" => self.dqn.reward_mix = num(key, value)?,
            "segmenter.window_n" => self.segmenter.window_n = num(key, value)?,
            "segmenter.nms_radius" => self.segmenter.nms_radius = num(key, value)?,
            "segmenter.min_prominence" => self.segmenter.min_prominence = num(key, value)?,
            "run.total_steps" => self.run.total_steps = num(key, value)?,
            "run.phase1_steps" => self.run.phase1_steps = num(key, value)?,
            "run.episode_horizon" => self.run.horizon = num(key, value)?,
            "run.eval_episodes" => self.run.eval_episodes = num(key, value)?,
            "run.out_dir" => self.run.out_dir = PathBuf::from(value),
            "run.master_seed" => self.run.master_seed = num(key, value)?,
            other => {
                return Err(Error::config(other, "unknown configuration key"));
            }
        }
        Ok(())
    }
}

fn num<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| {
        Error::Config { field: key.to_string(), reason: format!("cannot parse `{value}`: {e}") }
    })
}
