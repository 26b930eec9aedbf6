//! Profile and override resolution.
//!
//! A run's configuration is a nested `{model, train}` tree. It starts from
//! the desk defaults, then absorbs flat dotted-key maps in order: the named
//! profile (built-in `desk`/`paper` or a JSON file path), an optional
//! `--config` file, and finally each `--set key=value`. Unknown leaf keys are
//! rejected when the tree deserializes back into the typed configs.

use std::fs;
use std::path::Path;

use prose_fd::model::ModelConfig;
use prose_fd::train::TrainConfig;
use serde_json::{Map, Value};

use crate::errors::CliError;

const DESK_PROFILE: &str = include_str!("../profiles/desk.json");
const PAPER_PROFILE: &str = include_str!("../profiles/paper.json");

#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Sets `tree[key]` where `key` is dotted. Intermediate components must
/// already exist as objects (there is no way to invent a new config section);
/// the leaf may be new so map-valued fields like `train.family_weights.swe`
/// stay reachable.
fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed config key `{key}`")));
    }
    let mut cur = tree;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(*part))
            .ok_or_else(|| CliError::Config(format!("unknown config section `{part}` in `{key}`")))?;
    }
    let leaf = parts[parts.len() - 1];
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("`{key}` does not address an object field")))?;
    obj.insert(leaf.to_string(), value);
    Ok(())
}

fn apply_flat_map(tree: &mut Value, flat: &Map<String, Value>) -> Result<(), CliError> {
    for (key, value) in flat {
        set_dotted(tree, key, value.clone())?;
    }
    Ok(())
}

fn parse_flat(text: &str, origin: &str) -> Result<Map<String, Value>, CliError> {
    serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("{origin} is not a flat JSON object: {e}")))
}

/// `--set` values are parsed as JSON when possible (numbers, booleans,
/// null), otherwise taken as strings.
fn parse_set(pair: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{pair}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

pub fn resolve(
    profile: &str,
    config_file: Option<&Path>,
    sets: &[String],
) -> Result<Resolved, CliError> {
    let mut tree = serde_json::json!({
        "model": serde_json::to_value(ModelConfig::desk())
            .map_err(|e| CliError::Config(e.to_string()))?,
        "train": serde_json::to_value(TrainConfig::desk())
            .map_err(|e| CliError::Config(e.to_string()))?,
    });

    let profile_text = match profile {
        "desk" => DESK_PROFILE.to_string(),
        "paper" => PAPER_PROFILE.to_string(),
        path => fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read profile `{path}`: {e}")))?,
    };
    apply_flat_map(&mut tree, &parse_flat(&profile_text, &format!("profile `{profile}`"))?)?;

    if let Some(path) = config_file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config `{}`: {e}", path.display())))?;
        apply_flat_map(&mut tree, &parse_flat(&text, &format!("config `{}`", path.display()))?)?;
    }

    for pair in sets {
        let (key, value) = parse_set(pair)?;
        set_dotted(&mut tree, &key, value)?;
    }

    let model: ModelConfig = serde_json::from_value(tree["model"].take())
        .map_err(|e| CliError::Config(format!("invalid model config: {e}")))?;
    let train: TrainConfig = serde_json::from_value(tree["train"].take())
        .map_err(|e| CliError::Config(format!("invalid train config: {e}")))?;
    model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Resolved { model, train })
}
