//! Resolved run configuration: defaults, then `HYPERPHM_DATA_ROOT`, then a
//! TOML key/value file, then `--set` pairs, then named flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hyperphm::data::CifarVariant;
use hyperphm::models::{ArchitectureSpec, Backend};
use hyperphm::training::{Schedule, TrainConfig};
use hyperphm::verify::GRADCHECK_MENU;
use hyperphm::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const DATA_ROOT_ENV: &str = "HYPERPHM_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl Dataset {
    pub fn cifar(self) -> Option<CifarVariant> {
        match self {
            Dataset::Cifar10 => Some(CifarVariant::C10),
            Dataset::Cifar100 => Some(CifarVariant::C100),
            Dataset::Synthetic => None,
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Cifar10 => "cifar10",
            Dataset::Cifar100 => "cifar100",
            Dataset::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cifar10" => Ok(Dataset::Cifar10),
            "cifar100" => Ok(Dataset::Cifar100),
            "synthetic" => Ok(Dataset::Synthetic),
            other => Err(format!(
                "unknown dataset `{other}`; expected cifar10, cifar100 or synthetic"
            )),
        }
    }
}

/// Every setting any subcommand reads. Field order is the order of the
/// echoed file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,

    pub arch: String,
    pub classes: Option<usize>,
    pub widen: usize,
    /// Divide every stage width by this, rounding up to the algebra dimension.
    pub narrow: usize,
    /// Force a PHM backend of this dimension instead of the preset's.
    pub phm_n: Option<usize>,
    pub trainable_signs: bool,

    pub dataset: Dataset,
    pub data_root: Option<PathBuf>,
    pub synthetic_per_class: usize,
    pub synthetic_size: usize,
    /// Seed of the synthetic images, independent of the training seed.
    pub synthetic_seed: u64,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub warmup: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub eval_every: usize,
    pub augment: bool,
    pub shuffle: bool,
    pub deterministic: bool,
    pub run_dir: Option<PathBuf>,

    pub checkpoint: Option<PathBuf>,

    /// Depth (`18`) or comma-separated preset names.
    pub compare: Option<String>,
    /// Timed forward passes; 0 skips the latency measurement.
    pub latency_reps: usize,
    pub per_layer: bool,

    pub targets: Vec<String>,
    pub eps: f64,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            command: String::new(),
            arch: "qphm18".to_string(),
            classes: None,
            widen: 1,
            narrow: 1,
            phm_n: None,
            trainable_signs: false,
            dataset: Dataset::Cifar10,
            data_root: None,
            synthetic_per_class: 20,
            synthetic_size: 32,
            synthetic_seed: 0,
            epochs: t.epochs,
            batch: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            nesterov: t.nesterov,
            weight_decay: t.weight_decay,
            warmup: t.warmup_epochs,
            schedule: t.schedule,
            seed: t.seed,
            eval_every: t.eval_every,
            augment: t.augment,
            shuffle: t.shuffle,
            deterministic: t.deterministic,
            run_dir: None,
            checkpoint: None,
            compare: None,
            latency_reps: 0,
            per_layer: false,
            targets: GRADCHECK_MENU.iter().map(|s| s.to_string()).collect(),
            eps: 1e-5,
            threshold: 1e-5,
        }
    }
}

/// Layers merged over the defaults, lowest precedence first.
#[derive(Debug, Default)]
pub struct Overrides {
    pub file: Option<PathBuf>,
    pub set: Vec<String>,
    pub flags: Table,
}

fn toml_err(e: impl fmt::Display) -> Error {
    Error::config("config", e.to_string().trim_end().replace('\n', " "))
}

/// Parses `key=value`, reading the value as TOML and falling back to a
/// bare string.
pub fn parse_assignment(pair: &str) -> Result<(String, Value)> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("`{pair}` is not of the form key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        base.insert(k, v);
    }
}

impl RunConfig {
    pub fn resolve(command: &str, overrides: Overrides) -> Result<Self> {
        let mut table = Table::try_from(RunConfig::default()).map_err(toml_err)?;
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                table.insert("data_root".into(), Value::String(root));
            }
        }
        if let Some(path) = &overrides.file {
            let text =
                fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
            merge(&mut table, toml::from_str::<Table>(&text).map_err(toml_err)?);
        }
        for pair in &overrides.set {
            let (k, v) = parse_assignment(pair)?;
            table.insert(k, v);
        }
        merge(&mut table, overrides.flags);
        table.insert("command".into(), Value::String(command.to_string()));
        let mut cfg: RunConfig = table.try_into().map_err(toml_err)?;
        cfg.validate()?;
        if command != "eval" {
            cfg.classes = Some(cfg.resolved_classes());
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("widen", self.widen),
            ("narrow", self.narrow),
            ("synthetic_per_class", self.synthetic_per_class),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.phm_n == Some(0) {
            return Err(Error::config("phm_n", "must be at least 1"));
        }
        if let Some(bad) = self.targets.iter().find(|t| !GRADCHECK_MENU.contains(&t.as_str())) {
            return Err(Error::config(
                "targets",
                format!("unknown target `{bad}`; expected a subset of {GRADCHECK_MENU:?}"),
            ));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::config("threshold", "must be positive"));
        }
        self.train_config().validate()
    }

    /// Classes implied by the dataset unless set explicitly.
    pub fn resolved_classes(&self) -> usize {
        self.classes.unwrap_or(match self.dataset.cifar() {
            Some(v) => v.classes(),
            None => 10,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup,
            schedule: self.schedule,
            seed: self.seed,
            eval_every: self.eval_every,
            augment: self.augment,
            shuffle: self.shuffle,
            deterministic: self.deterministic,
        }
    }

    /// Architecture for `arch` with the model overrides applied.
    pub fn architecture(&self, arch: &str) -> Result<ArchitectureSpec> {
        let mut spec = ArchitectureSpec::preset(arch, self.resolved_classes())?.narrowed(self.narrow);
        spec.widen = self.widen;
        spec.trainable_signs = self.trainable_signs;
        if let Some(n) = self.phm_n {
            spec.backend = Backend::Phm(n);
        }
        if self.dataset == Dataset::Synthetic {
            spec.input_size = self.synthetic_size;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(toml_err)
    }

    pub fn default_run_dir(&self) -> PathBuf {
        self.run_dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(format!("{}-{}-seed{}", self.arch, self.dataset, self.seed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, Value)]) -> Table {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn echo_round_trips_byte_identically() {
        let cfg = RunConfig::resolve(
            "train",
            Overrides {
                flags: flags(&[("lr", Value::Float(0.05)), ("data_root", Value::String("/data".into()))]),
                ..Overrides::default()
            },
        )
        .unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 7\nlr = 0.2\narch = \"vphm18\"\n").unwrap();
        let cfg = RunConfig::resolve(
            "train",
            Overrides {
                file: Some(path),
                set: vec!["batch=32".into()],
                flags: flags(&[("lr", Value::Float(0.3))]),
            },
        )
        .unwrap();
        assert_eq!((cfg.epochs, cfg.lr, cfg.batch), (7, 0.3, 32));
        assert_eq!(cfg.arch, "vphm18");
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_config_errors() {
        for pair in ["epoch=3", "epochs=\"many\""] {
            let err = RunConfig::resolve(
                "train",
                Overrides {
                    set: vec![pair.into()],
                    ..Overrides::default()
                },
            )
            .unwrap_err();
            assert!(matches!(err, Error::Config { .. }), "{err}");
        }
    }

    #[test]
    fn bare_strings_are_accepted() {
        assert_eq!(
            parse_assignment("arch=quat50").unwrap().1,
            Value::String("quat50".into())
        );
        assert_eq!(parse_assignment("epochs = 3").unwrap().1, Value::Integer(3));
    }
}
