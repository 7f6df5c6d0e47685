//! Run configuration: one TOML file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// The α values run by `--grid.alpha`.
pub const ALPHA_GRID: [f64; 3] = [0.1, 0.25, 0.5];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

/// Everything `treg train` needs. Every field has a default except the
/// training data path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    /// Starting checkpoint; also frozen as reference and evaluator. When
    /// absent the policy is freshly initialised from `model`.
    pub init: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Reward cache directory; defaults to `$TREG_CACHE_DIR` or `.treg-cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            init: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/latest"),
            cache_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.train.is_none() {
            return Err(CliError::Usage("data.train: a training dataset path is required".into()));
        }
        self.loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.init.is_none() {
            self.model.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
        }
        Ok(())
    }
}

/// Parses the value of an override as a TOML literal, falling back to a
/// bare string (so `--data.train foo.jsonl` needs no quotes).
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `key` (dotted path) in `root`, creating tables on the way.
pub fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Overrides parsed from `--a.b value` / `--a.b=value` arguments, plus the
/// `--grid.alpha` flag.
#[derive(Debug, Default, PartialEq)]
pub struct Overrides {
    pub pairs: Vec<(String, String)>,
    pub grid_alpha: bool,
}

pub fn parse_overrides(args: &[String]) -> Result<Overrides, CliError> {
    let mut out = Overrides::default();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument `{a}`; overrides look like --section.key value")))?;
        if key == "grid.alpha" {
            out.grid_alpha = true;
            i += 1;
            continue;
        }
        if let Some((k, v)) = key.split_once('=') {
            out.pairs.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let v = args
                .get(i + 1)
                .ok_or_else(|| CliError::Usage(format!("override --{key} needs a value")))?;
            out.pairs.push((key.to_string(), v.clone()));
            i += 2;
        }
    }
    Ok(out)
}

/// Reads `path` (if any), applies overrides and deserializes.
pub fn load_run_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        set_dotted(&mut table, k, parse_value(v))?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message().trim())))?;
    // Relative paths in a config file are relative to the file.
    Ok(match path.and_then(Path::parent).filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => resolve_paths(cfg, dir),
        None => cfg,
    })
}

fn resolve_paths(mut cfg: RunConfig, dir: &Path) -> RunConfig {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    };
    cfg.data.train.as_mut().map(fix);
    cfg.data.eval.as_mut().map(fix);
    cfg.init.as_mut().map(fix);
    fix(&mut cfg.out_dir);
    cfg.cache_dir.as_mut().map(fix);
    cfg
}
