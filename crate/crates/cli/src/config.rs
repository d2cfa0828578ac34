//! Flat `key = value` run configuration with command-line overrides.

use std::path::Path;

use gapa::backbone::{parse_layer_specs, TrainConfig};
use gapa::calibrate::VariationalConfig;
use gapa::dataio::SplitSpec;
use gapa::gpact::GapaConfig;
use gapa::metrics::DEFAULT_CQM_GRID;
use gapa::propagate::CovarianceMode;
use gapa::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub spec: String,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub backbone_epochs: usize,
    pub backbone_learning_rate: f64,
    pub backbone_batch_size: usize,
    pub inducing: usize,
    pub subsample: usize,
    pub noise: f64,
    pub mode: CovarianceMode,
    pub calibration: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub metric_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitSpec::default();
        let train = TrainConfig::default();
        let gapa = GapaConfig::default();
        let var = VariationalConfig::default();
        Self {
            seed: 0,
            spec: "1-32-32-1:tanh".into(),
            train_fraction: split.train_fraction,
            val_fraction: split.val_fraction,
            test_fraction: split.test_fraction,
            backbone_epochs: train.epochs,
            backbone_learning_rate: train.learning_rate,
            backbone_batch_size: train.batch_size,
            inducing: gapa.inducing,
            subsample: gapa.subsample,
            noise: gapa.noise,
            mode: CovarianceMode::default(),
            calibration: "free".into(),
            epochs: var.epochs,
            learning_rate: var.learning_rate,
            batch_size: var.batch_size,
            metric_grid: DEFAULT_CQM_GRID,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` (`key=value`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "spec" => self.spec = value.to_owned(),
            "train_fraction" => self.train_fraction = parse_value(key, value)?,
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            "test_fraction" => self.test_fraction = parse_value(key, value)?,
            "backbone_epochs" => self.backbone_epochs = parse_value(key, value)?,
            "backbone_learning_rate" => self.backbone_learning_rate = parse_value(key, value)?,
            "backbone_batch_size" => self.backbone_batch_size = parse_value(key, value)?,
            "inducing" => self.inducing = parse_value(key, value)?,
            "subsample" => self.subsample = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "mode" => self.mode = CovarianceMode::parse(value)?,
            "calibration" => self.calibration = value.to_owned(),
            "epochs" => self.epochs = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "metric_grid" => self.metric_grid = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        parse_layer_specs(&self.spec)?;
        self.split().validate()?;
        if !matches!(self.calibration.as_str(), "free" | "variational") {
            return Err(Error::Config(format!(
                "calibration must be 'free' or 'variational', got '{}'",
                self.calibration
            )));
        }
        let positive = [
            ("backbone_batch_size", self.backbone_batch_size),
            ("batch_size", self.batch_size),
            ("subsample", self.subsample),
            ("metric_grid", self.metric_grid),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("'{k}' must be positive")));
        }
        if self.inducing < 2 {
            return Err(Error::Config("'inducing' must be at least 2".into()));
        }
        let rates = [self.backbone_learning_rate, self.learning_rate];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("'noise' must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.backbone_epochs,
            learning_rate: self.backbone_learning_rate,
            batch_size: self.backbone_batch_size,
            seed: self.seed,
        }
    }

    /// GP layer settings; the subsample is capped at the training size.
    pub fn gapa_config(&self, n_train: usize) -> GapaConfig {
        GapaConfig {
            inducing: self.inducing,
            subsample: self.subsample.min(n_train),
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn variational_config(&self) -> VariationalConfig {
        VariationalConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    /// Every setting as `key=value` lines in a fixed order.
    pub fn canonical(&self) -> String {
        let r = |v: f64| format!("{v:?}");
        [
            ("seed", self.seed.to_string()),
            ("spec", self.spec.clone()),
            ("train_fraction", r(self.train_fraction)),
            ("val_fraction", r(self.val_fraction)),
            ("test_fraction", r(self.test_fraction)),
            ("backbone_epochs", self.backbone_epochs.to_string()),
            ("backbone_learning_rate", r(self.backbone_learning_rate)),
            ("backbone_batch_size", self.backbone_batch_size.to_string()),
            ("inducing", self.inducing.to_string()),
            ("subsample", self.subsample.to_string()),
            ("noise", r(self.noise)),
            ("mode", self.mode.as_str().to_owned()),
            ("calibration", self.calibration.clone()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", r(self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("metric_grid", self.metric_grid.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
    }

    /// SHA-256 (hex) of the canonical settings plus command-specific extras.
    pub fn digest(&self, extras: &[(&str, String)]) -> String {
        let mut text = self.canonical();
        for (k, v) in extras {
            text.push_str(&format!("{k}={v}\n"));
        }
        hex_sha256(text.as_bytes())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nseed = 5\nmode = diag  # trailing\n\nspec=2-8-1:relu\n")
            .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.mode, CovarianceMode::Diag);
        assert_eq!(cfg.spec, "2-8-1:relu");
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("seed = 1\nbogus = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(cfg.apply_text("seed = x").is_err());
        assert!(cfg.apply_text("no equals sign").is_err());
    }

    #[test]
    fn digest_tracks_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(&[]), b.digest(&[]));
        b.noise = 1e-5;
        assert_ne!(a.digest(&[]), b.digest(&[]));
        assert_ne!(a.digest(&[]), a.digest(&[("n", "3".into())]));
        assert_eq!(a.digest(&[]).len(), 64);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            hex_sha256(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn validation() {
        let bad = [
            RunConfig {
                calibration: "bayes".into(),
                ..Default::default()
            },
            RunConfig {
                train_fraction: 0.9,
                ..Default::default()
            },
            RunConfig {
                spec: "1-x-1".into(),
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
