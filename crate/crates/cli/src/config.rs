//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use idm_core::diffusion::TrainConfig;
use idm_core::iunet::IUNetConfig;
use idm_core::revgraph::Mode;

use crate::CliError;

/// Keys a config file must set.
pub const REQUIRED_KEYS: &[&str] = &["data_dir"];

/// Everything `idm train` needs: model shape, optimizer, data location and
/// backprop mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: IUNetConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: IUNetConfig::default(),
            train: TrainConfig::default(),
            data_dir: None,
            mode: Mode::InvertibleRecompute,
        }
    }
}

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{}`", value.trim())))
}

fn split_line(line: &str) -> Result<(&str, &str), CliError> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected `key = value`, got `{line}`")))?;
    Ok((k.trim(), v.trim()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "lr" => t.lr = num(key, value)?,
            "lambda_r" => t.lambda_r = num(key, value)?,
            "lambda_l2" => t.lambda_l2 = num(key, value)?,
            "batch" => t.batch = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "mode" => self.mode = value.parse()?,
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a config file body, then applies `overrides` (`key=value`).
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        let lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .chain(overrides.iter().map(|s| s.trim()));
        for line in lines {
            let (k, v) = split_line(line)?;
            cfg.set(k, v)?;
            seen.push(k.to_string());
        }
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(CliError::Config(format!("missing required config key `{missing}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` gives back the same config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = self.model.to_text();
        let _ = writeln!(s, "adam_eps={}", t.adam_eps);
        let _ = writeln!(s, "batch={}", t.batch);
        let _ = writeln!(s, "beta1={}", t.beta1);
        let _ = writeln!(s, "beta2={}", t.beta2);
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir={}", d.display());
        }
        let _ = writeln!(s, "lambda_l2={}", t.lambda_l2);
        let _ = writeln!(s, "lambda_r={}", t.lambda_r);
        let _ = writeln!(s, "lr={}", t.lr);
        let _ = writeln!(s, "mode={}", self.mode.name());
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "steps={}", t.steps);
        let mut lines: Vec<&str> = s.lines().collect();
        lines.sort_unstable();
        lines.join("\n") + "\n"
    }
}

/// Model config for `levels` downsamplings at edge `edge`: channels double
/// per level from 8 and attention sits on the two deepest levels.
pub fn scaled_model(edge: usize, levels: usize, blocks: usize) -> IUNetConfig {
    let channel_schedule: Vec<usize> = (0..levels).map(|i| 8 << i).collect();
    IUNetConfig {
        base_channels: 8,
        levels,
        blocks_per_level: blocks,
        attn_levels: (levels.saturating_sub(2)..levels).collect(),
        channel_schedule,
        volume_edge: edge,
        ..IUNetConfig::default()
    }
}
