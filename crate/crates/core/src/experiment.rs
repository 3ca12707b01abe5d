//! End-to-end pipeline cells: split, optional pretext training, probe.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::time::Instant;

use crate::config::RunConfig;
use crate::contrastive::{margin_bound, Variant};
use crate::error::{Error, Result};
use crate::nn::Encoder;
use crate::probe::{embed, evaluate, fit_logistic, Evaluation};
use crate::signals::{split_subjects, Dataset, Split};
use crate::spectral::Stft;
use crate::training::{run_pretext, DualNetworkState};

/// What produces the encoder that gets probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    Untrained,
    Pretext(Variant),
}

impl Arm {
    pub const TABLE: [Arm; 4] = [
        Arm::Untrained,
        Arm::Pretext(Variant::Nce),
        Arm::Pretext(Variant::Contrawr),
        Arm::Pretext(Variant::ContrawrPlus),
    ];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Untrained => f.write_str("untrained"),
            Arm::Pretext(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub arm: Arm,
    pub seed: u64,
    pub evaluation: Evaluation,
    pub wall_seconds: f64,
}

/// Applies `seed` to every seeded stage of a run.
pub fn seeded(config: &RunConfig, seed: u64) -> RunConfig {
    let mut c = config.clone();
    c.split.seed = seed;
    c.train.seed = seed;
    c
}

/// Fits the probe on `split.training` and scores it on `split.test`.
pub fn probe_encoder(encoder: &Encoder<f32>, split: &Split, config: &RunConfig) -> Result<Evaluation> {
    if split.training.is_empty() || split.test.is_empty() {
        return Err(Error::config("split.ratios", "training and test groups must be nonempty"));
    }
    let stft = Stft::new(config.stft)?;
    let train = embed(encoder, split.training.epochs(), &stft)?;
    let test = embed(encoder, split.test.epochs(), &stft)?;
    let p = &config.probe;
    let model = fit_logistic(&train, p.max_iter, p.l2, p.standardize)?;
    evaluate(&model, &test)
}

/// Freshly initialised encoder, identical to the one pretext training starts from.
pub fn untrained_encoder(split: &Split, config: &RunConfig) -> Result<Encoder<f32>> {
    let (channels, n) = split
        .training
        .epoch_shape()
        .ok_or_else(|| Error::config("split.ratios", "the training group is empty"))?;
    let (c, f, t) = config.stft.feature_shape(channels, n)?;
    let model = config.model.model_config(c, f, t);
    Ok(DualNetworkState::new(&model, config.train.seed, config.train.ema_lambda)?
        .online
        .encoder)
}

pub fn run_cell(dataset: &Dataset, config: &RunConfig, arm: Arm, seed: u64) -> Result<CellResult> {
    let start = Instant::now();
    let mut cfg = seeded(config, seed);
    let split = split_subjects(dataset, cfg.split.ratios, cfg.split.seed)?;
    let encoder = match arm {
        Arm::Untrained => untrained_encoder(&split, &cfg)?,
        Arm::Pretext(v) => {
            cfg.loss.variant = v;
            run_pretext(&split, &cfg, None, None)?.state.online.encoder
        }
    };
    let evaluation = probe_encoder(&encoder, &split, &cfg)?;
    Ok(CellResult {
        arm,
        seed,
        evaluation,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub accuracies: Vec<f64>,
    pub wall_seconds: f64,
}

impl CompareRow {
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.accuracies)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub title: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn row(&self, label: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.title);
        writeln!(out, "| method | accuracy (%) mean ± std | seeds | wall (s) |").unwrap();
        writeln!(out, "|---|---|---|---|").unwrap();
        for r in &self.rows {
            let (m, s) = r.mean_std();
            writeln!(
                out,
                "| {} | {:.2} ± {:.2} | {} | {:.1} |",
                r.label,
                100.0 * m,
                100.0 * s,
                r.accuracies.len(),
                r.wall_seconds
            )
            .unwrap();
        }
        out
    }
}

/// Every arm over every seed. `progress` sees each finished cell.
pub fn compare(
    dataset: &Dataset,
    config: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    mut progress: impl FnMut(&CellResult),
) -> Result<CompareTable> {
    if seeds.is_empty() {
        return Err(Error::param("compare needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &arm in arms {
        let mut row = CompareRow {
            label: arm.to_string(),
            accuracies: Vec::new(),
            wall_seconds: 0.0,
        };
        for &seed in seeds {
            let cell = run_cell(dataset, config, arm, seed)?;
            progress(&cell);
            row.accuracies.push(cell.evaluation.accuracy);
            row.wall_seconds += cell.wall_seconds;
        }
        rows.push(row);
    }
    Ok(CompareTable {
        title: "Linear-probe test accuracy".into(),
        seeds: seeds.to_vec(),
        rows,
    })
}

/// A hyperparameter swept one at a time around the defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    /// Config key, e.g. `loss.sigma`.
    pub key: String,
    pub values: Vec<String>,
}

impl Sweep {
    pub fn new(key: &str, values: &[&str]) -> Self {
        Sweep {
            key: key.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    /// Named sweeps: `sigma`, `temperature`, `delta`, `batch`.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "sigma" => Sweep::new("loss.sigma", &["0.5", "2", "10"]),
            "temperature" | "t" => Sweep::new("loss.temperature", &["0.5", "2", "10"]),
            "delta" => Sweep::new("loss.delta", &["0.1", "0.2", "0.3", "0.39"]),
            "batch" | "batch_size" => Sweep::new("train.batch_size", &["16", "32", "64", "128"]),
            other => return Err(Error::config("ablate", format!("unknown sweep '{other}'"))),
        })
    }
}

/// A wider kernel shrinks the achievable similarity gap. When a swept sigma
/// leaves the base margin infeasible, the margin keeps its fraction of the gap.
fn rescaled_margin(base: &RunConfig, swept: &RunConfig) -> Option<f64> {
    let (b, s) = (&base.loss, &swept.loss);
    if s.sigma == b.sigma || s.delta != b.delta || s.delta < margin_bound(s.sigma) {
        return None;
    }
    Some(b.delta / margin_bound(b.sigma) * margin_bound(s.sigma))
}

/// ContraWR+ probe accuracy with each sweep value applied on its own.
pub fn ablate(
    dataset: &Dataset,
    config: &RunConfig,
    sweeps: &[Sweep],
    seeds: &[u64],
    mut progress: impl FnMut(&str, &CellResult),
) -> Result<CompareTable> {
    if seeds.is_empty() {
        return Err(Error::param("ablation needs at least one seed"));
    }
    // Sweeps share the default point; each distinct config is trained once.
    let mut done: HashMap<String, CompareRow> = HashMap::new();
    let mut rows = Vec::new();
    for sweep in sweeps {
        for value in &sweep.values {
            let mut cfg = config.clone();
            cfg.set(&sweep.key, value)?;
            let mut label = format!("{}={value}", sweep.key);
            if let Some(delta) = rescaled_margin(config, &cfg) {
                cfg.loss.delta = delta;
                label.push_str(&format!(" (loss.delta={delta:.4})"));
            }
            cfg.validate()?;
            if let Some(prev) = done.get(&cfg.to_ini()) {
                rows.push(CompareRow {
                    label,
                    ..prev.clone()
                });
                continue;
            }
            let mut row = CompareRow {
                label: label.clone(),
                accuracies: Vec::new(),
                wall_seconds: 0.0,
            };
            for &seed in seeds {
                let cell = run_cell(dataset, &cfg, Arm::Pretext(Variant::ContrawrPlus), seed)?;
                progress(&label, &cell);
                row.accuracies.push(cell.evaluation.accuracy);
                row.wall_seconds += cell.wall_seconds;
            }
            done.insert(cfg.to_ini(), row.clone());
            rows.push(row);
        }
    }
    Ok(CompareTable {
        title: "ContraWR+ hyperparameter ablation".into(),
        seeds: seeds.to_vec(),
        rows,
    })
}
