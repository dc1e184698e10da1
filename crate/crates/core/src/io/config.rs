//! `key=value` run configuration, one pair per line, `#` starts a comment.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::read_file;
use crate::error::{Error, Result};
use crate::mask::MaskRole;
use crate::pipeline::{block_frames_from_ms, role_name, PipelineConfig};

/// Mask files named by a configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPaths {
    pub target: Option<PathBuf>,
    pub interference: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    /// Enhancement (speech vs. noise) mask.
    pub speech: Option<PathBuf>,
}

impl MaskPaths {
    pub fn get(&self, role: MaskRole) -> Option<&Path> {
        match role {
            MaskRole::Target => self.target.as_deref(),
            MaskRole::Interference => self.interference.as_deref(),
            MaskRole::Noise => self.noise.as_deref(),
            MaskRole::Enhancement => self.speech.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub masks: MaskPaths,
}

impl RunConfig {
    /// Pipeline invariants plus a mask path for every mask the pipeline
    /// consumes.
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        for role in self.pipeline.required_masks() {
            if self.masks.get(role).is_none() {
                return Err(Error::Config(format!(
                    "beamformer={} with this configuration needs a {} mask ({}_mask)",
                    self.pipeline.beamformer,
                    role_name(role),
                    config_key(role)
                )));
            }
        }
        Ok(())
    }
}

fn config_key(role: MaskRole) -> &'static str {
    match role {
        MaskRole::Enhancement => "se",
        r => role_name(r),
    }
}

/// Splits `key=value` lines, dropping blanks and comments. Duplicate keys
/// are errors.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::ConfigParse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if let Some((first, _, _)) = pairs.iter().find(|(_, k, _)| k == key) {
            return Err(err(format!("duplicate key '{key}' (first set on line {first})")));
        }
        pairs.push((line, key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Renders pairs in the format read by [`parse_key_values`].
pub fn format_key_values<K: AsRef<str>, V: std::fmt::Display>(pairs: &[(K, V)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{}={v}\n", k.as_ref()))
        .collect()
}

fn parse_value<T: FromStr>(value: &str, what: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("bad {what} '{value}': {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{value}'")),
    }
}

/// Parses configuration text without validating it. Relative mask paths
/// are resolved against `base_dir`.
pub fn parse_config(text: &str, path: &Path, base_dir: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut block_ms: Option<(usize, f64)> = None;
    let mut block_frames_line: Option<usize> = None;
    for (line, key, value) in parse_key_values(text, path)? {
        let p = &mut cfg.pipeline;
        let mask_path = || Some(base_dir.join(&value));
        let result: std::result::Result<(), String> = (|| {
            match key.as_str() {
                "beamformer" => p.beamformer = parse_value(&value, "beamformer")?,
                "prior" => p.prior = parse_bool(&value)?,
                "early_se" => p.early_se = parse_bool(&value)?,
                "early_ss" => p.early_ss = parse_bool(&value)?,
                "later_ss" => p.later_ss = parse_value(&value, "later_ss")?,
                "block_frames" => {
                    p.block_frames = parse_value(&value, "block_frames")?;
                    block_frames_line = Some(line);
                }
                "block_ms" => block_ms = Some((line, parse_value(&value, "block_ms")?)),
                "iterations" => p.iterations = parse_value(&value, "iterations")?,
                "loading" => p.loading = parse_value(&value, "loading")?,
                "reference_channel" => p.reference_channel = parse_value(&value, "reference_channel")?,
                "channel_reduce" => p.channel_reduce = parse_value(&value, "channel_reduce")?,
                "steer_mask" => p.steer_mask = parse_value(&value, "steer_mask")?,
                "window_ms" => p.stft.window_ms = parse_value(&value, "window_ms")?,
                "hop_ms" => p.stft.hop_ms = parse_value(&value, "hop_ms")?,
                "target_mask" => cfg.masks.target = mask_path(),
                "interference_mask" => cfg.masks.interference = mask_path(),
                "noise_mask" => cfg.masks.noise = mask_path(),
                "se_mask" => cfg.masks.speech = mask_path(),
                _ => return Err(format!("unknown key '{key}'")),
            }
            Ok(())
        })();
        result.map_err(|message| Error::ConfigParse {
            path: path.to_path_buf(),
            line,
            message,
        })?;
    }
    if let Some((line, ms)) = block_ms {
        if let Some(other) = block_frames_line {
            return Err(Error::ConfigParse {
                path: path.to_path_buf(),
                line: line.max(other),
                message: "block_ms and block_frames are mutually exclusive".into(),
            });
        }
        cfg.pipeline.block_frames =
            block_frames_from_ms(ms, &cfg.pipeline.stft).map_err(|e| Error::ConfigParse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
    }
    Ok(cfg)
}

/// Reads a configuration file without validating it.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::ConfigParse {
            path: path.to_path_buf(),
            line,
            message: "invalid UTF-8".into(),
        }
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(text, path, base)
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = read_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}
