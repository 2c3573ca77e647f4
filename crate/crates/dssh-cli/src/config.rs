//! Run configuration: a JSON document with `model`, `train`, `forecast`,
//! `data` and `seed` sections. Unknown keys are rejected; dotted-path flags
//! (`--train.learning_rate 1e-4`) override individual fields before
//! validation, and the fully-resolved document is written next to every
//! run's outputs.

use std::path::Path;

use dssh::data::CovariateSpec;
use dssh::error::{Error, Result};
use dssh::forecasting::ForecastConfig;
use dssh::model::ModelConfig;
use dssh::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Conditioning window length for training windows.
    pub context_len: usize,
    /// Target horizon for training windows and evaluation.
    pub horizon: usize,
    /// Window stride over each series.
    pub stride: usize,
    /// Seasonal period for the persistence baseline (`null` = last-value).
    pub period: Option<usize>,
    pub covariates: CovariatesConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            context_len: 80,
            horizon: 20,
            stride: 20,
            period: None,
            covariates: CovariatesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovariatesConfig {
    pub hour_of_day: bool,
    pub day_of_week: bool,
    pub gap_flag: bool,
    pub columns: Vec<String>,
}

impl Default for CovariatesConfig {
    fn default() -> Self {
        CovariatesConfig {
            hour_of_day: false,
            day_of_week: false,
            gap_flag: false,
            columns: vec!["u0".into()],
        }
    }
}

impl CovariatesConfig {
    pub fn to_spec(&self) -> CovariateSpec {
        CovariateSpec {
            hour_of_day: self.hour_of_day,
            day_of_week: self.day_of_week,
            gap_flag: self.gap_flag,
            columns: self.columns.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. When set (or when `DSSH_SEED` is in the environment) it
    /// overrides the `train` and `forecast` section seeds.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub forecast: ForecastConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            forecast: ForecastConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads, applies overrides and the `DSSH_SEED` environment variable,
    /// propagates the master seed, and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut value: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|_| Error::MissingArtifact(format!("config {}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config schema: {e}")))?;
        if let Ok(seed) = std::env::var("DSSH_SEED") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("DSSH_SEED must be an integer, got '{seed}'")))?;
            cfg.seed = Some(seed);
        }
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
            cfg.forecast.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.forecast.validate()?;
        if self.data.context_len == 0 || self.data.horizon == 0 || self.data.stride == 0 {
            return Err(Error::Config("data dims and stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Writes the fully-resolved config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let json = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Reads a resolved config back (used to recover the model section that
    /// matches a checkpoint).
    pub fn load_resolved(dir: &Path) -> Result<RunConfig> {
        let path = dir.join("config.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact(format!("resolved config {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Sets `key` (a dotted path like `train.learning_rate`) to `raw`, parsed as
/// JSON when possible and as a string otherwise.
fn apply_override(value: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(Error::Config(format!("override path '{key}': '{part}' is not an object")));
        }
        cursor = cursor
            .as_object_mut()
            .expect("checked")
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let last = parts.last().expect("nonempty key");
    cursor
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path '{key}' does not address an object")))?
        .insert(last.to_string(), parsed);
    Ok(())
}

/// Splits argv into dotted-path config overrides and everything else.
/// `--a.b value`, `--a.b=value` and `--set a.b=value` are all accepted.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        if arg == "--set" {
            let Some(pair) = it.next() else {
                return Err(Error::Config("--set needs key=value".into()));
            };
            let Some((k, v)) = pair.split_once('=') else {
                return Err(Error::Config(format!("--set '{pair}' must be key=value")));
            };
            overrides.push((k.to_string(), v.to_string()));
        } else if let Some(body) = arg.strip_prefix("--") {
            if body.contains('.') && !body.starts_with('.') {
                if let Some((k, v)) = body.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let Some(v) = it.next() else {
                        return Err(Error::Config(format!("override --{body} needs a value")));
                    };
                    overrides.push((body.to_string(), v));
                }
            } else {
                rest.push(arg);
            }
        } else {
            rest.push(arg);
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.model.latent_dim, 8);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn overrides_apply_and_propagate_seed() {
        let overrides = vec![
            ("train.learning_rate".to_string(), "1e-4".to_string()),
            ("model.latent_dim".to_string(), "4".to_string()),
            ("seed".to_string(), "77".to_string()),
        ];
        let cfg = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.model.latent_dim, 4);
        assert_eq!(cfg.train.seed, 77);
        assert_eq!(cfg.forecast.seed, 77);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let overrides = vec![("model.not_a_field".to_string(), "3".to_string())];
        let err = RunConfig::load(None, &overrides).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn extract_override_forms() {
        let args: Vec<String> = [
            "train", "--config", "c.json", "--train.num_steps", "5",
            "--model.latent_dim=4", "--set", "data.horizon=6",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let (rest, overrides) = extract_overrides(args).unwrap();
        assert_eq!(rest, ["train", "--config", "c.json"]);
        assert_eq!(
            overrides,
            [
                ("train.num_steps".to_string(), "5".to_string()),
                ("model.latent_dim".to_string(), "4".to_string()),
                ("data.horizon".to_string(), "6".to_string()),
            ]
        );
    }
}
