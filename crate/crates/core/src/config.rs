//! Flat `key = value` experiment configuration.
//!
//! Settings are applied in order (file first, then command-line overrides),
//! so a later value for the same key wins. `#` starts a comment line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{Mode, ModelConfig};
use crate::training::TrainConfig;
use crate::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub d: usize,
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    /// Defaults to `2d`.
    pub d_h: Option<usize>,
    /// Diffusion steps; defaults to `n`.
    pub steps: Option<usize>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gamma: f64,
    pub dropout: f64,
    /// Defaults to `2d`.
    pub diffusion_hidden: Option<usize>,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_seed: u64,
    pub eval_average: usize,
    pub min_interactions: usize,
    /// Directory written by `prepare`.
    pub data: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::new(Mode::Vae, 1);
        let t = TrainConfig::default();
        ExperimentConfig {
            mode: m.mode,
            d: m.d,
            n: m.n,
            layers: m.layers,
            heads: m.heads,
            d_h: None,
            steps: None,
            beta_start: m.beta_start,
            beta_end: m.beta_end,
            gamma: m.gamma,
            dropout: m.dropout,
            diffusion_hidden: None,
            seed: m.seed,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            eval_seed: t.eval_seed,
            eval_average: t.eval_average,
            min_interactions: 10,
            data: None,
            interactions: None,
            categories: None,
            out: None,
        }
    }
}

/// Every accepted key, in the order of the resolved file.
pub const KEYS: &[&str] = &[
    "mode",
    "d",
    "n",
    "layers",
    "heads",
    "d_h",
    "steps",
    "beta_start",
    "beta_end",
    "gamma",
    "dropout",
    "diffusion_hidden",
    "seed",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "eval_seed",
    "eval_average",
    "min_interactions",
    "data",
    "interactions",
    "categories",
    "out",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ExperimentConfig {
    /// Applies one setting. `T` is accepted as an alias of `steps`, and
    /// dashes in keys are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "mode" => self.mode = value.parse()?,
            "d" => self.d = parse(&key, value)?,
            "n" => self.n = parse(&key, value)?,
            "layers" => self.layers = parse(&key, value)?,
            "heads" => self.heads = parse(&key, value)?,
            "d_h" => self.d_h = Some(parse(&key, value)?),
            "steps" | "T" => self.steps = Some(parse(&key, value)?),
            "beta_start" => self.beta_start = parse(&key, value)?,
            "beta_end" => self.beta_end = parse(&key, value)?,
            "gamma" => self.gamma = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "diffusion_hidden" => self.diffusion_hidden = Some(parse(&key, value)?),
            "seed" => self.seed = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "max_epochs" => self.max_epochs = parse(&key, value)?,
            "patience" => self.patience = parse(&key, value)?,
            "eval_seed" => self.eval_seed = parse(&key, value)?,
            "eval_average" => self.eval_average = parse(&key, value)?,
            "min_interactions" => self.min_interactions = parse(&key, value)?,
            "data" => self.data = Some(value.into()),
            "interactions" => self.interactions = Some(value.into()),
            "categories" => self.categories = Some(value.into()),
            "out" => self.out = Some(value.into()),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; errors name the source and line.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{source}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            num_items,
            d: self.d,
            n: self.n,
            layers: self.layers,
            heads: self.heads,
            d_h: self.d_h.unwrap_or(2 * self.d),
            steps: self.steps.unwrap_or(self.n),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            gamma: self.gamma,
            dropout: self.dropout,
            diffusion_hidden: self.diffusion_hidden.unwrap_or(2 * self.d),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_seed: self.eval_seed,
            eval_average: self.eval_average,
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.model_config(1).validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("eval_average", self.eval_average),
            ("min_interactions", self.min_interactions),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Every key with its effective value, defaults filled in.
    pub fn resolved(&self) -> String {
        let m = self.model_config(1);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            m.mode.to_string(),
            m.d.to_string(),
            m.n.to_string(),
            m.layers.to_string(),
            m.heads.to_string(),
            m.d_h.to_string(),
            m.steps.to_string(),
            m.beta_start.to_string(),
            m.beta_end.to_string(),
            m.gamma.to_string(),
            m.dropout.to_string(),
            m.diffusion_hidden.to_string(),
            m.seed.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.eval_seed.to_string(),
            self.eval_average.to_string(),
            self.min_interactions.to_string(),
            path(&self.data),
            path(&self.interactions),
            path(&self.categories),
            path(&self.out),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            if !v.is_empty() {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.resolved()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# grid cell\nmode = diffusion\nd = 32\nT = 7\n\nlr=0.01\n", "cfg")
            .unwrap();
        c.apply_overrides(&["d=16", "beta-start=0.001"]).unwrap();
        assert_eq!(c.mode, Mode::Diffusion);
        assert_eq!(c.d, 16);
        assert_eq!(c.steps, Some(7));
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.beta_start, 0.001);
        let m = c.model_config(10);
        assert_eq!((m.d_h, m.diffusion_hidden, m.steps), (32, 32, 7));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        let e = c.apply_text("mode = vae\nlearning_rate = 1\n", "cfg").unwrap_err();
        assert!(e.to_string().contains("cfg:2"), "{e}");
        assert!(c.set("d", "sixty").is_err());
        assert!(c.set("mode", "gan").is_err());
        assert!(c.apply_overrides(&["d"]).is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["mode=deterministic", "n=20", "out=/tmp/x", "gamma=0"])
            .unwrap();
        let text = c.resolved();
        assert!(text.contains("steps = 20\n"));
        assert!(text.contains("d_h = 128\n"));
        let mut back = ExperimentConfig::default();
        back.apply_text(&text, "resolved").unwrap();
        assert_eq!(back.resolved(), text);
        assert_eq!(back.model_config(5), c.model_config(5));
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        c.set("dropout", "1.5").unwrap();
        assert!(c.validate().is_err());
    }
}
