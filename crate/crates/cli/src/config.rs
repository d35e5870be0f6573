//! Layered JSON configuration: embedded defaults, then a config file, then
//! `--set` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use voxdepth::pipeline::PipelineConfig;
use voxdepth::synth::{NoiseSpec, SceneConfig};

use crate::CliError;

const DEFAULT_SCENE: &str = include_str!("../../../scenes/plane_box.json");

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub scene: SceneConfig,
    pub noise: NoiseSpec,
    pub pipeline: PipelineConfig,
}

#[derive(Deserialize)]
struct BundledScene {
    scene: SceneConfig,
}

pub fn defaults() -> AppConfig {
    let bundled: BundledScene = serde_json::from_str(DEFAULT_SCENE).expect("bundled scene parses");
    AppConfig {
        scene: bundled.scene,
        noise: NoiseSpec::default(),
        pipeline: PipelineConfig::default(),
    }
}

/// Resolves the effective config. `seed` replaces every seed in it.
pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<AppConfig, CliError> {
    let mut value = serde_json::to_value(defaults()).expect("defaults serialize");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, file, "")?;
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
        set_path(&mut value, key, parse_scalar(raw))?;
    }
    if let Some(seed) = seed {
        value["scene"]["seed"] = seed.into();
        value["noise"]["seed"] = seed.into();
        value["pipeline"]["registration"]["ransac_seed"] = seed.into();
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Deep-merges `over` into `base`. Objects merge key by key and every key
/// must already exist; tagged objects whose `type` changes, arrays and
/// scalars are replaced whole.
fn merge(base: &mut Value, over: Value, at: &str) -> Result<(), CliError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !retagged(b, &o) => {
            for (k, v) in o {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| CliError::Config(format!("unknown config key `{here}`")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn retagged(base: &Map<String, Value>, over: &Map<String, Value>) -> bool {
    matches!((base.get("type"), over.get("type")), (Some(a), Some(b)) if a != b)
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let unknown = || CliError::Config(format!("unknown config key `{key}`"));
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(part).ok_or_else(unknown)?,
            Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| unknown())?;
                a.get_mut(i).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
    }
    *cur = v;
    Ok(())
}
