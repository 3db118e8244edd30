//! `key = value` configuration files and their merge with command-line flags.

use std::path::Path;
use std::str::FromStr;

use neural_mrf::{EnergyConfig, SynthesisJob, Tensor};

use crate::args::EnergyArgs;
use crate::UsageError;

/// Energy configuration plus the optimizer knobs that share its file.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub energy: EnergyConfig,
    pub iterations: usize,
    pub lbfgs_memory: usize,
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        let job = SynthesisJob::new(Tensor::zeros(3, 1, 1), None, EnergyConfig::default());
        Settings {
            energy: job.config,
            iterations: job.iterations_per_level,
            lbfgs_memory: job.lbfgs_memory,
            seed: job.seed,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, UsageError>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .parse()
        .map_err(|e| UsageError(format!("{key}: cannot parse {raw:?}: {e}")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, UsageError>
where
    T::Err: std::fmt::Display,
{
    raw.split(',').map(|v| value(key, v)).collect()
}

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// keys are the long flag names, with `_` accepted for `-`.
pub fn parse_config(text: &str) -> Result<EnergyArgs, UsageError> {
    let mut out = EnergyArgs::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("config line {}: expected key = value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        match k {
            "alpha-content" => out.alpha_content = Some(value(k, raw)?),
            "alpha-tv" => out.alpha_tv = Some(value(k, raw)?),
            "mrf-layers" => out.mrf_layers = Some(list(k, raw)?),
            "mrf-weights" => out.mrf_weights = Some(list(k, raw)?),
            "content-layer" => out.content_layer = Some(value(k, raw)?),
            "patch-size" => out.patch_size = Some(value(k, raw)?),
            "stride" => out.stride = Some(value(k, raw)?),
            "scales" => out.scales = Some(list(k, raw)?),
            "rotation-angles" => out.rotation_angles = Some(list(k, raw)?),
            "rotations" => out.rotations = Some(value(k, raw)?),
            "normalize" => out.normalize = Some(value(k, raw)?),
            "iterations" => out.iterations = Some(value(k, raw)?),
            "lbfgs-memory" => out.lbfgs_memory = Some(value(k, raw)?),
            "seed" => out.seed = Some(value(k, raw)?),
            _ => {
                return Err(UsageError(format!(
                    "config line {}: unknown key {key:?}",
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Defaults, overridden by the config file, overridden by flags.
pub fn resolve(flags: &EnergyArgs) -> Result<Settings, UsageError> {
    let file = match &flags.config {
        Some(path) => read_config(path)?,
        None => EnergyArgs::default(),
    };
    let mut s = Settings::default();
    for layer in [&file, flags] {
        apply(&mut s, layer);
    }
    s.energy.validate().map_err(|e| UsageError(e.to_string()))?;
    if s.iterations == 0 {
        return Err(UsageError("iterations must be at least 1".into()));
    }
    Ok(s)
}

fn read_config(path: &Path) -> Result<EnergyArgs, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)))
}

fn apply(s: &mut Settings, a: &EnergyArgs) {
    let e = &mut s.energy;
    if let Some(v) = a.alpha_content {
        e.alpha_content = v;
    }
    if let Some(v) = a.alpha_tv {
        e.alpha_tv = v;
    }
    if let Some(v) = &a.mrf_layers {
        e.mrf_layers = v.clone();
        // layer weights follow the layer list unless given explicitly
        if a.mrf_weights.is_none() {
            e.mrf_layer_weights = vec![1.0; v.len()];
        }
    }
    if let Some(v) = &a.mrf_weights {
        e.mrf_layer_weights = v.clone();
    }
    if let Some(v) = &a.content_layer {
        e.content_layer = v.clone();
    }
    if let Some(v) = a.patch_size {
        e.patch_size = v;
    }
    if let Some(v) = a.stride {
        e.stride = v;
    }
    if let Some(v) = &a.scales {
        e.augmentation.scales = v.clone();
    }
    if let Some(v) = &a.rotation_angles {
        e.augmentation.rotations = v.clone();
    }
    if let Some(v) = a.rotations {
        e.augmentation.enabled_rotations = v;
    }
    if let Some(v) = a.normalize {
        e.normalize = v;
    }
    if let Some(v) = a.iterations {
        s.iterations = v;
    }
    if let Some(v) = a.lbfgs_memory {
        s.lbfgs_memory = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
}
