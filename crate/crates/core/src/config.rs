//! Flat `section.key = value` run configuration.
//!
//! Files may use bare `section.key = value` lines or `[section]` headers
//! followed by `key = value`. `#` and `;` start comments. Every key is typed
//! and unknown keys are rejected by name.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::augment::{AugmentPolicy, Method};
use crate::contrastive::{LossConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, ModelConfig};
use crate::signals::SynthConfig;
use crate::spectral::StftConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: (0.6, 0.2, 0.2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub ema_lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            ema_lambda: 0.99,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Architecture knobs that do not depend on the data shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub widths: [usize; 4],
    pub latent_dim: usize,
    pub projection_dim: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::for_features(1, 1, 1);
        ModelSettings {
            widths: m.widths,
            latent_dim: m.latent_dim,
            projection_dim: m.projection_dim,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, in_channels: usize, bins: usize, frames: usize) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            latent_dim: self.latent_dim,
            projection_dim: self.projection_dim,
            ..ModelConfig::for_features(in_channels, bins, frames)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1.0,
            max_iter: 500,
            standardize: true,
        }
    }
}

/// Every setting of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub split: SplitConfig,
    pub augment: AugmentPolicy,
    pub stft: StftConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub model: ModelSettings,
    pub probe: ProbeConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got '{value}'"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_pairs<T: FromStr>(key: &str, value: &str) -> Result<Vec<(T, T)>> {
    list(value)
        .map(|item| {
            let (a, b) = item
                .split_once('-')
                .ok_or_else(|| Error::config(key, format!("expected 'a-b', got '{item}'")))?;
            Ok((parse(key, a)?, parse(key, b)?))
        })
        .collect()
}

fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        let v = value.trim();
        match k {
            "synth.subjects" => self.synth.n_subjects = parse(k, v)?,
            "synth.epochs_per_subject" => self.synth.epochs_per_subject = parse(k, v)?,
            "synth.channels" => self.synth.channels = parse(k, v)?,
            "synth.samples" => self.synth.samples = parse(k, v)?,
            "synth.sample_rate_hz" => self.synth.sample_rate_hz = parse(k, v)?,
            "synth.signal_amplitude" => self.synth.signal_amplitude = parse(k, v)?,
            "synth.noise_std" => self.synth.noise_std = parse(k, v)?,
            "synth.clip_bound" => self.synth.clip_bound = parse(k, v)?,
            "synth.seed" => self.synth.seed = parse(k, v)?,

            "split.ratios" => {
                let r: Vec<f64> = list(v).map(|s| parse(k, s)).collect::<Result<_>>()?;
                match r[..] {
                    [a, b, c] => self.split.ratios = (a, b, c),
                    _ => return Err(Error::config(k, "expected three comma-separated ratios")),
                }
            }
            "split.seed" => self.split.seed = parse(k, v)?,

            "augment.enabled" => {
                self.augment.enabled = list(v).map(|s| parse(k, s)).collect::<Result<Vec<Method>>>()?
            }
            "augment.bands" => self.augment.bandpass_bands = parse_pairs(k, v)?,
            "augment.noise_degree" => self.augment.noise_degree = parse(k, v)?,
            "augment.flip_pairs" => self.augment.flip_pairs = parse_pairs(k, v)?,
            "augment.clip_bound" => self.augment.clip_bound = parse(k, v)?,

            "stft.window" => self.stft.window = parse(k, v)?,
            "stft.hop" => self.stft.hop = parse(k, v)?,
            "stft.log_amplitude" => self.stft.log_amplitude = parse_bool(k, v)?,

            "loss.variant" => self.loss.variant = v.parse::<Variant>().map_err(|e| Error::config(k, e.to_string()))?,
            "loss.sigma" => self.loss.sigma = parse(k, v)?,
            "loss.delta" => self.loss.delta = parse(k, v)?,
            "loss.temperature" => self.loss.temperature = parse(k, v)?,
            "loss.include_self" => self.loss.include_self = parse_bool(k, v)?,
            "loss.world_grad" => self.loss.world_grad = parse_bool(k, v)?,

            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.ema_lambda" => self.train.ema_lambda = parse(k, v)?,
            "train.lr" => self.train.lr = parse(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,

            "model.widths" => {
                let w: Vec<usize> = list(v).map(|s| parse(k, s)).collect::<Result<_>>()?;
                self.model.widths = w
                    .try_into()
                    .map_err(|_| Error::config(k, "expected four comma-separated widths"))?;
            }
            "model.latent_dim" => self.model.latent_dim = parse(k, v)?,
            "model.projection_dim" => self.model.projection_dim = parse(k, v)?,

            "probe.l2" => self.probe.l2 = parse(k, v)?,
            "probe.max_iter" => self.probe.max_iter = parse(k, v)?,
            "probe.standardize" => self.probe.standardize = parse_bool(k, v)?,

            _ => return Err(Error::config(k, "unknown configuration key")),
        }
        Ok(())
    }

    /// All settings in a stable order, as `(key, value)` strings.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let a = &self.augment;
        let l = &self.loss;
        let t = &self.train;
        vec![
            ("synth.subjects", s.n_subjects.to_string()),
            ("synth.epochs_per_subject", s.epochs_per_subject.to_string()),
            ("synth.channels", s.channels.to_string()),
            ("synth.samples", s.samples.to_string()),
            ("synth.sample_rate_hz", s.sample_rate_hz.to_string()),
            ("synth.signal_amplitude", s.signal_amplitude.to_string()),
            ("synth.noise_std", s.noise_std.to_string()),
            ("synth.clip_bound", s.clip_bound.to_string()),
            ("synth.seed", s.seed.to_string()),
            (
                "split.ratios",
                join([self.split.ratios.0, self.split.ratios.1, self.split.ratios.2]),
            ),
            ("split.seed", self.split.seed.to_string()),
            ("augment.enabled", join(a.enabled.iter().map(|m| m.as_str()))),
            (
                "augment.bands",
                join(a.bandpass_bands.iter().map(|(lo, hi)| format!("{lo}-{hi}"))),
            ),
            ("augment.noise_degree", a.noise_degree.to_string()),
            (
                "augment.flip_pairs",
                join(a.flip_pairs.iter().map(|(x, y)| format!("{x}-{y}"))),
            ),
            ("augment.clip_bound", a.clip_bound.to_string()),
            ("stft.window", self.stft.window.to_string()),
            ("stft.hop", self.stft.hop.to_string()),
            ("stft.log_amplitude", self.stft.log_amplitude.to_string()),
            ("loss.variant", l.variant.to_string()),
            ("loss.sigma", l.sigma.to_string()),
            ("loss.delta", l.delta.to_string()),
            ("loss.temperature", l.temperature.to_string()),
            ("loss.include_self", l.include_self.to_string()),
            ("loss.world_grad", l.world_grad.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.ema_lambda", t.ema_lambda.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("model.widths", join(self.model.widths)),
            ("model.latent_dim", self.model.latent_dim.to_string()),
            ("model.projection_dim", self.model.projection_dim.to_string()),
            ("probe.l2", self.probe.l2.to_string()),
            ("probe.max_iter", self.probe.max_iter.to_string()),
            ("probe.standardize", self.probe.standardize.to_string()),
        ]
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Applies every setting in `text` on top of `self`.
    pub fn merge_ini(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected 'key = value', got '{line}'"))
            })?;
            let k = k.trim();
            if section.is_empty() || k.contains('.') {
                self.set(k, v)?;
            } else {
                self.set(&format!("{section}.{k}"), v)?;
            }
        }
        Ok(())
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.merge_ini(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini(&text)
    }

    /// Checks every section that does not need the data to be known.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| r.map_err(|e| Error::config(key, e.to_string()));
        wrap("stft", self.stft.validate())?;
        wrap("loss", self.loss.validate())?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if t.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&t.ema_lambda) {
            return Err(Error::config("train.ema_lambda", "must lie in [0, 1]"));
        }
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return Err(Error::config("train.lr", "rates must be nonnegative"));
        }
        if t.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        let (a, b, c) = self.split.ratios;
        if ((a + b + c) - 1.0).abs() > 1e-9 || [a, b, c].iter().any(|r| *r < 0.0) {
            return Err(Error::config("split.ratios", "must be nonnegative and sum to 1"));
        }
        if !(self.probe.l2 >= 0.0) || self.probe.max_iter == 0 {
            return Err(Error::config("probe", "l2 must be nonnegative and max_iter positive"));
        }
        if self.model.latent_dim == 0 || self.model.projection_dim == 0 {
            return Err(Error::config("model", "dimensions must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_ini(&c.to_ini()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn modified_round_trip() {
        let mut c = RunConfig::default();
        c.set("loss.variant", "nce").unwrap();
        c.set("augment.bands", "0.5-3, 20-40").unwrap();
        c.set("augment.enabled", "bandpass,shifting").unwrap();
        c.set("train.lr", "0.000123456789").unwrap();
        c.set("model.widths", "4,8,16,32").unwrap();
        let back = RunConfig::from_ini(&c.to_ini()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.augment.enabled, vec![Method::Bandpass, Method::Rotation]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_ini("train.epoch = 3").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.epoch"));
        let err = RunConfig::from_ini("[loss]\nsigmaa = 2").unwrap_err();
        assert!(err.to_string().contains("loss.sigmaa"));
    }

    #[test]
    fn sections_and_comments() {
        let c = RunConfig::from_ini("# run\n[train]\nepochs = 7 ; short\n\nloss.sigma = 3\n").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.loss.sigma, 3.0);
    }

    #[test]
    fn bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("train.epochs", "ten").is_err());
        assert!(c.set("split.ratios", "0.5,0.5").is_err());
        c.set("loss.delta", "0.5").unwrap();
        assert!(c.validate().is_err());
    }
}
