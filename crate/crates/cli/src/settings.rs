//! `key = value` configuration files. Flags override file values.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mobilex_core::data::AugmentConfig;
use mobilex_core::engine::TrainConfig;
use mobilex_core::loss::{LossConfig, LossKind};
use mobilex_core::metrics::{MetricsAccumulator, RelDenominator};
use mobilex_core::model::{ArchitectureConfig, Variant};

use crate::error::{CliError, Result};

pub const KEYS: &[&str] = &[
    "augment",
    "augment_seed",
    "batch_size",
    "berhu_fraction",
    "cap",
    "checkpoint",
    "epochs",
    "height",
    "loss",
    "lr0",
    "lr_decay_every",
    "lr_decay_factor",
    "manifest",
    "min_depth",
    "momentum",
    "out",
    "pretrained",
    "rel_denominator",
    "schedule",
    "seed",
    "val_manifest",
    "variant",
    "weight_decay",
    "width",
    "width_divisor",
];

/// Keys holding paths. In a file they resolve against the file's folder.
const PATH_KEYS: &[&str] = &["checkpoint", "manifest", "out", "pretrained", "val_manifest"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::config(format!("line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            let value = if PATH_KEYS.contains(&key) {
                base.join(value).to_string_lossy().into_owned()
            } else {
                value.to_string()
            };
            if values.insert(key.to_string(), value).is_some() {
                return Err(err(format!("`{key}` set twice")));
            }
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Settings::parse(&text, path.parent().unwrap_or(Path::new("")))
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Overrides `key` when `value` is present.
    pub fn set(&mut self, key: &str, value: Option<impl Display>) {
        debug_assert!(KEYS.contains(&key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::config(format!("bad value `{v}` for `{key}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing `{key}` (flag --{} or config key)",
                key.replace('_', "-")
            ))
        })
    }

    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        self.get(key)
    }

    /// `cap`; `none` disables the cap.
    pub fn cap(&self) -> Result<Option<f64>> {
        match self.values.get("cap").map(String::as_str) {
            None | Some("none") => Ok(None),
            Some(_) => {
                let c: f64 = self.require("cap")?;
                if !(c > 0.0 && c.is_finite()) {
                    return Err(CliError::config(format!(
                        "cap must be a positive number of meters, got {c}"
                    )));
                }
                Ok(Some(c))
            }
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        self.get_or("variant", Variant::Base)
    }

    pub fn architecture(&self, default_hw: (usize, usize)) -> Result<ArchitectureConfig> {
        let h = self.get_or("height", default_hw.0)?;
        let w = self.get_or("width", default_hw.1)?;
        let divisor = self.get_or("width_divisor", 1usize)?;
        if divisor == 0 {
            return Err(CliError::config("width_divisor must be at least 1"));
        }
        let cfg = ArchitectureConfig::new(self.variant()?)
            .with_input(h, w)
            .with_width_divisor(divisor);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn accumulator(&self) -> Result<MetricsAccumulator> {
        let mut acc = MetricsAccumulator::new(self.cap()?);
        if let Some(m) = self.get::<f64>("min_depth")? {
            if !(m > 0.0 && m.is_finite()) {
                return Err(CliError::config("min_depth must be positive"));
            }
            acc = acc.with_min_depth(m);
        }
        if let Some(r) = self.get::<RelDenominator>("rel_denominator")? {
            acc = acc.with_rel_denominator(r);
        }
        Ok(acc)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let base = match self.values.get("schedule").map(String::as_str) {
            None | Some("default") => TrainConfig::default(),
            Some("long") => TrainConfig::long_schedule(),
            Some(other) => return Err(CliError::config(format!("unknown schedule `{other}` (default, long)"))),
        };
        let loss = LossConfig {
            kind: self.get_or("loss", LossKind::Hybrid)?,
            berhu_fraction: self.get_or("berhu_fraction", base.loss.berhu_fraction)?,
        };
        let augment = if self.get_or("augment", false)? {
            Some(AugmentConfig {
                seed: self.get_or("augment_seed", 0)?,
                ..AugmentConfig::default()
            })
        } else {
            None
        };
        let cfg = TrainConfig {
            lr0: self.get_or("lr0", base.lr0)?,
            lr_decay_factor: self.get_or("lr_decay_factor", base.lr_decay_factor)?,
            lr_decay_every: self.get_or("lr_decay_every", base.lr_decay_every)?,
            epochs: self.get_or("epochs", base.epochs)?,
            batch_size: self.get_or("batch_size", base.batch_size)?,
            momentum: self.get_or("momentum", base.momentum)?,
            weight_decay: self.get_or("weight_decay", base.weight_decay)?,
            loss,
            seed: self.get_or("seed", base.seed)?,
            augment,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_paths() {
        let s = Settings::parse(
            "# run\nepochs = 3  # short\nmanifest = data/m.tsv\n\n",
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(s.path("manifest").unwrap(), Some(PathBuf::from("/cfg/data/m.tsv")));
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        let e = Settings::parse("epoch = 3\n", Path::new("")).unwrap_err();
        assert!(
            e.to_string().contains("line 1") && e.to_string().contains("epoch"),
            "{e}"
        );
        assert!(Settings::parse("seed = 1\nseed = 2\n", Path::new("")).is_err());
        assert!(Settings::parse("seed 1\n", Path::new("")).is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut s = Settings::parse("epochs = 3\nlr0 = 0.5\n", Path::new("")).unwrap();
        s.set("epochs", Some(7));
        s.set("lr0", None::<f64>);
        let cfg = s.train_config().unwrap();
        assert_eq!((cfg.epochs, cfg.lr0), (7, 0.5));
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn long_schedule_and_bad_values() {
        let s = Settings::parse("schedule = long\n", Path::new("")).unwrap();
        let cfg = s.train_config().unwrap();
        assert_eq!((cfg.epochs, cfg.lr_decay_every), (100, 40));
        let s = Settings::parse("momentum = fast\n", Path::new("")).unwrap();
        assert!(matches!(s.train_config(), Err(CliError::Config(_))));
        let s = Settings::parse("cap = -4\n", Path::new("")).unwrap();
        assert!(s.cap().is_err());
        let s = Settings::parse("cap = none\n", Path::new("")).unwrap();
        assert_eq!(s.cap().unwrap(), None);
    }
}
