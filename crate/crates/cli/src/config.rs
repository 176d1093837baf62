//! Run configuration, layered as defaults < TOML file < command-line flags
//! < `DEFERRAL_*` environment variables.

use std::path::{Path, PathBuf};

use clap::Args;
use deferral_core::artifacts::ArtifactConfig;
use deferral_core::gatekeeper::{Alpha, DEFAULT_COVERAGE_FLOOR};
use deferral_core::router::RouterConfig;
use deferral_core::surrogate::{Family, PoolConfig, TrainConfig};
use deferral_core::trace_store::SplitFractions;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "DEFERRAL_";

/// Optional settings from one source. Later layers win field by field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigLayer {
    /// Minimum teacher agreement on handled traffic.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Minimum shadow coverage for promotion.
    #[arg(long, global = true)]
    pub floor: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Train, validation, calibration and shadow fractions.
    #[arg(long, global = true, value_delimiter = ',', num_args = 4, value_name = "A,B,C,D")]
    pub splits: Option<Vec<f64>>,
    /// Trace file whose labels answer teacher calls by id.
    #[arg(long, global = true, value_name = "FILE")]
    pub teacher_oracle: Option<PathBuf>,
    /// HTTP endpoint answering teacher calls.
    #[arg(long, global = true, value_name = "URL")]
    pub teacher_url: Option<String>,
    /// Surrogate families to train: lr, mlp, centroid.
    #[arg(long, global = true, value_delimiter = ',', value_name = "FAMILIES")]
    #[serde(deserialize_with = "families")]
    pub pool: Option<Vec<Family>>,
    /// Working directory for the buffer, state, reports and run log.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Accepts the same family names as the `--pool` flag.
fn families<'de, D: serde::Deserializer<'de>>(deserializer: D) -> Result<Option<Vec<Family>>, D::Error> {
    Option::<Vec<String>>::deserialize(deserializer)?
        .map(|names| names.iter().map(|n| n.parse().map_err(serde::de::Error::custom)).collect())
        .transpose()
}

impl ConfigLayer {
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Reads `DEFERRAL_<FIELD>` variables through `get`.
    pub fn from_env(get: impl Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        let var = |name: &str| get(&format!("{ENV_PREFIX}{name}")).filter(|v| !v.trim().is_empty());
        let parse = |name: &str, raw: String| -> Result<f64, CliError> {
            raw.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_PREFIX}{name}: `{raw}` is not a number")))
        };
        Ok(Self {
            alpha: var("ALPHA").map(|v| parse("ALPHA", v)).transpose()?,
            floor: var("FLOOR").map(|v| parse("FLOOR", v)).transpose()?,
            seed: var("SEED")
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("{ENV_PREFIX}SEED: `{v}` is not an unsigned integer")))
                })
                .transpose()?,
            splits: var("SPLITS")
                .map(|v| v.split(',').map(|s| parse("SPLITS", s.to_owned())).collect::<Result<Vec<_>, _>>())
                .transpose()?,
            teacher_oracle: var("TEACHER_ORACLE").map(PathBuf::from),
            teacher_url: var("TEACHER_URL"),
            pool: var("POOL")
                .map(|v| {
                    v.split(',')
                        .map(|s| s.parse::<Family>().map_err(|e| CliError::Config(format!("{ENV_PREFIX}POOL: {e}"))))
                        .collect::<Result<Vec<_>, _>>()
                })
                .transpose()?,
            out: var("OUT").map(PathBuf::from),
        })
    }

    pub fn overlay(self, top: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            alpha: top.alpha.or(self.alpha),
            floor: top.floor.or(self.floor),
            seed: top.seed.or(self.seed),
            splits: top.splits.or(self.splits),
            teacher_oracle: top.teacher_oracle.or(self.teacher_oracle),
            teacher_url: top.teacher_url.or(self.teacher_url),
            pool: top.pool.or(self.pool),
            out: top.out.or(self.out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TeacherMode {
    None,
    Oracle { path: PathBuf },
    Remote { url: String },
}

/// Validated configuration shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: Alpha,
    pub floor: f64,
    pub splits: SplitFractions,
    pub seed: u64,
    pub pool: Vec<Family>,
    pub teacher: TeacherMode,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn resolve(layer: ConfigLayer) -> Result<Self, CliError> {
        let alpha = Alpha::new(layer.alpha.unwrap_or(0.95)).map_err(|e| CliError::Config(e.to_string()))?;
        let floor = layer.floor.unwrap_or(DEFAULT_COVERAGE_FLOOR);
        if !(0.0..=1.0).contains(&floor) {
            return Err(CliError::Config(format!("floor must lie in [0, 1], got {floor}")));
        }
        let splits = match layer.splits.as_deref() {
            None => SplitFractions::default(),
            Some(&[a, b, c, d]) => SplitFractions::new(a, b, c, d).map_err(|e| CliError::Config(e.to_string()))?,
            Some(other) => return Err(CliError::Config(format!("splits needs 4 fractions, got {}", other.len()))),
        };
        let pool = layer.pool.unwrap_or_else(|| PoolConfig::default().families());
        if pool.is_empty() {
            return Err(CliError::Config("pool must name at least one family".into()));
        }
        let teacher = match (layer.teacher_oracle, layer.teacher_url) {
            (Some(_), Some(_)) => return Err(CliError::Config("set either teacher_oracle or teacher_url, not both".into())),
            (Some(path), None) => TeacherMode::Oracle { path },
            (None, Some(url)) => TeacherMode::Remote { url },
            (None, None) => TeacherMode::None,
        };
        Ok(Self {
            alpha,
            floor,
            splits,
            seed: layer.seed.unwrap_or(42),
            pool,
            teacher,
            out: layer.out.unwrap_or_else(|| PathBuf::from("deferral-out")),
        })
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            alpha: self.alpha,
            floor: self.floor,
            fractions: self.splits,
            train: TrainConfig {
                seed: self.seed,
                pool: PoolConfig::only(&self.pool),
                ..TrainConfig::default()
            },
            artifacts: ArtifactConfig::default(),
        }
    }
}
