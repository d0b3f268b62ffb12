use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fairtrain::{EvalConfig, FairTrainConfig, LossKind, TrainMode};
use crate::fingerprint::fingerprint;
use crate::nn::Architecture;

/// Data source of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum Scenario {
    /// Binary label, Gaussian sensitive attribute, `sin s` bias.
    Toy,
    /// Label driven by `s²` through an `atan(s²)` feature.
    Arctan,
    /// A CSV file read with the `[csv]` schema.
    Csv(PathBuf),
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Toy => f.write_str("toy"),
            Scenario::Arctan => f.write_str("arctan"),
            Scenario::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Scenario::Toy),
            "arctan" => Ok(Scenario::Arctan),
            _ => match s.strip_prefix("csv:") {
                Some(p) if !p.is_empty() => Ok(Scenario::Csv(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "unknown scenario {s:?} (expected toy, arctan or csv:<path>)"
                ))),
            },
        }
    }
}

impl Serialize for Scenario {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Training hyperparameters shared by every run of an experiment; `λ`, the
/// seed and the mode come from the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub lr_f: f64,
    pub lr_g: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub encoder_arch: Architecture,
    pub predictor_arch: Architecture,
    pub adversary_f_arch: Architecture,
    pub adversary_g_arch: Architecture,
    pub epsilon: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let c = FairTrainConfig::default();
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            loss: c.loss,
            lr_f: c.lr_f,
            lr_g: c.lr_g,
            lr_phi: c.lr_phi,
            lr_psi: c.lr_psi,
            encoder_arch: c.encoder_arch,
            predictor_arch: c.predictor_arch,
            adversary_f_arch: c.adversary_f_arch,
            adversary_g_arch: c.adversary_g_arch,
            epsilon: c.epsilon,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, mode: TrainMode, lambda: f64, seed: u64) -> FairTrainConfig {
        FairTrainConfig {
            lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            loss: self.loss,
            lr_f: self.lr_f,
            lr_g: self.lr_g,
            lr_phi: self.lr_phi,
            lr_psi: self.lr_psi,
            seed,
            adversary_seed: None,
            mode,
            encoder_arch: self.encoder_arch.clone(),
            predictor_arch: self.predictor_arch.clone(),
            adversary_f_arch: self.adversary_f_arch.clone(),
            adversary_g_arch: self.adversary_g_arch.clone(),
            epsilon: self.epsilon,
        }
    }
}

/// Column mapping for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub x_cols: Vec<String>,
    pub s_cols: Vec<String>,
    pub y_col: String,
    /// Mean-normalize `y` on ingestion.
    #[serde(default)]
    pub regression: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub scenario: Scenario,
    /// Sample count for synthetic scenarios.
    pub n: usize,
    pub test_fraction: f64,
    pub mode: TrainMode,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSchema>,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            scenario: Scenario::Toy,
            n: 20_000,
            test_fraction: 0.2,
            mode: TrainMode::HgrRepresentation,
            lambdas: vec![],
            seeds: vec![],
            output_dir: None,
            csv: None,
            train: TrainSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 2] = ["toy-biased", "toy-unbiased"];

fn preset_table(name: &str) -> Result<toml::Table> {
    let text = match name {
        "toy-biased" => "scenario = \"toy\"\nlambdas = [0.0]\n",
        "toy-unbiased" => "scenario = \"toy\"\nlambdas = [13.0]\n",
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(text.parse().expect("valid preset"))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn strict<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{origin}: key `{path}`: {}", e.into_inner()))
    })
}

impl ExperimentConfig {
    /// Parses a TOML config. Keys missing from the file come from the named
    /// preset, if any, then from the built-in defaults.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        // Strict pass over the file alone so errors point at its lines.
        let _: ExperimentConfig = strict(text, origin)?;

        let preset = file.get("preset").and_then(|v| v.as_str()).map(str::to_owned);
        let mut missing = Vec::new();
        if preset.is_none() {
            for key in ["scenario", "lambdas"] {
                if !file.contains_key(key) {
                    missing.push(if key == "scenario" { "scenario (or preset)" } else { key });
                }
            }
        }
        if !file.contains_key("seeds") {
            missing.push("seeds");
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "{origin}: missing required keys: {}",
                missing.join(", ")
            )));
        }

        let mut table = match &preset {
            Some(name) => preset_table(name)?,
            None => toml::Table::new(),
        };
        merge(&mut table, file);
        let merged = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: ExperimentConfig = strict(&merged, origin)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Config("lambdas must list at least one value".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("lambdas must be ≥ 0, got {l}")));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        match &self.scenario {
            Scenario::Csv(path) => {
                if !path.is_file() {
                    return Err(Error::Config(format!("csv file {} does not exist", path.display())));
                }
                if self.csv.is_none() {
                    return Err(Error::Config("scenario csv:<path> needs a [csv] schema table".into()));
                }
            }
            _ if self.n < 10 => return Err(Error::Config(format!("n must be ≥ 10, got {}", self.n))),
            _ => {}
        }
        self.train.to_config(self.mode, self.lambdas[0], self.seeds[0]).validate()
    }

    /// Stable hash of every field that affects results (not the output
    /// directory or the preset name).
    pub fn fingerprint(&self) -> String {
        let semantic = ExperimentConfig {
            preset: None,
            output_dir: None,
            ..self.clone()
        };
        fingerprint(&semantic)
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text, &path.display().to_string())
}
