//! Dual-network pretext training.
//!
//! View 1 of every epoch goes through the online network (anchor), view 2
//! through the target network (positive). Only the online network sees
//! gradients; the target follows it by EMA and copies its batchnorm running
//! statistics.
//!
//! All randomness is derived from `(train.seed, epoch, step)`, so a run
//! resumed at an epoch boundary draws exactly what the uninterrupted run
//! would have drawn.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::random_augment;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::contrastive::batch_loss;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, Mode, ModelConfig, Network, Real, Tensor};
use crate::signals::{Dataset, Epoch, Split};
use crate::spectral::Stft;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;

/// Independent ChaCha stream for a `(seed, tag, a, b)` tuple.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_mut(8).zip([seed, tag, a, b]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// `phi <- lambda * phi + (1 - lambda) * theta`, elementwise.
pub fn ema_update_tensors<T: Real>(theta: &[&Tensor<T>], phi: &mut [&mut Tensor<T>], lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("EMA lambda {lambda} outside [0, 1]")));
    }
    if theta.len() != phi.len() {
        return Err(Error::Contract(format!(
            "EMA over {} online and {} target arrays",
            theta.len(),
            phi.len()
        )));
    }
    let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
    for (t, p) in theta.iter().zip(phi.iter_mut()) {
        if t.shape() != p.shape() {
            return Err(Error::Contract(format!(
                "EMA shape mismatch {:?} vs {:?}",
                t.shape(),
                p.shape()
            )));
        }
        for (pv, &tv) in p.data_mut().iter_mut().zip(t.data()) {
            *pv = l * *pv + r * tv;
        }
    }
    Ok(())
}

/// EMA over all parameters; running statistics are copied from `theta`.
pub fn ema_update<T: Real>(theta: &Network<T>, phi: &mut Network<T>, lambda: f64) -> Result<()> {
    ema_update_tensors(&theta.params(), &mut phi.params_mut(), lambda)?;
    for (src, dst) in theta.buffers().into_iter().zip(phi.buffers_mut()) {
        if src.shape() != dst.shape() {
            return Err(Error::Contract("EMA buffer shape mismatch".into()));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

/// Online and target networks with the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct DualNetworkState {
    pub online: Network<f32>,
    pub target: Network<f32>,
    pub adam: AdamState<f32>,
    pub ema_lambda: f64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl DualNetworkState {
    /// Fresh online network; the target starts as an exact copy.
    pub fn new(model: &ModelConfig, seed: u64, ema_lambda: f64) -> Result<Self> {
        let online = Network::new(model, &mut stream_rng(seed, TAG_INIT, 0, 0))?;
        let adam = AdamState::new(&online.params());
        Ok(DualNetworkState {
            target: online.clone(),
            online,
            adam,
            ema_lambda,
            step: 0,
        })
    }
}

/// Stacks the features of `epochs` into `[B, 2C, F, T]`.
pub fn features_batch(stft: &Stft, epochs: &[Epoch]) -> Result<Tensor<f32>> {
    let first = epochs
        .first()
        .ok_or_else(|| Error::param("cannot build features for an empty batch"))?;
    let (c, f, t) = stft.config().feature_shape(first.channels(), first.len())?;
    let mut data = Vec::with_capacity(epochs.len() * c * f * t);
    for e in epochs {
        let ft = stft.features(e)?;
        if ft.shape() != (c, f, t) {
            return Err(Error::shape("features", "epochs in a batch differ in shape"));
        }
        data.extend_from_slice(&ft.values);
    }
    Tensor::new(&[epochs.len(), c, f, t], data)
}

/// One optimizer step on `batch`. Returns the loss before the update.
pub fn pretext_step(
    batch: &[Epoch],
    state: &mut DualNetworkState,
    config: &RunConfig,
    stft: &Stft,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::param("a pretext batch needs at least two epochs"));
    }
    let mut view1 = Vec::with_capacity(batch.len());
    let mut view2 = Vec::with_capacity(batch.len());
    for e in batch {
        view1.push(random_augment(e, &config.augment, rng)?);
        view2.push(random_augment(e, &config.augment, rng)?);
    }
    let x1 = features_batch(stft, &view1)?;
    let x2 = features_batch(stft, &view2)?;

    let positives = {
        let mut g = Graph::no_grad();
        let x = g.constant(x2);
        let out = state.target.forward(&mut g, x, Mode::Train)?;
        g.value(out.projection).clone()
    };

    let mut g = Graph::new();
    let x = g.constant(x1);
    let out = state.online.forward(&mut g, x, Mode::Train)?;
    let pos = g.constant(positives);
    let loss = batch_loss(&mut g, out.projection, pos, &config.loss)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value} at step {}", state.step)));
    }
    let grads = g.backward(loss)?.params(&g);
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
    }
    adam_step(&mut state.online.params_mut(), &grads, &mut state.adam, &config.train.adam())?;
    ema_update(&state.online, &mut state.target, state.ema_lambda)?;
    state.step += 1;
    Ok(value)
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
    pub step_losses: Vec<f64>,
}

/// Owns the state of one pretext run.
pub struct Trainer {
    pub config: RunConfig,
    pub state: DualNetworkState,
    pub feature_shape: (usize, usize, usize),
    pub epochs_done: usize,
    stft: Stft,
}

impl Trainer {
    pub fn new(config: &RunConfig, pretext: &Dataset) -> Result<Self> {
        config.validate()?;
        let (channels, n) = pretext
            .epoch_shape()
            .ok_or_else(|| Error::config("split.ratios", "the pretext group is empty"))?;
        let fs = pretext.sample_rate_hz().unwrap_or_default() as f64;
        config
            .augment
            .validate(channels, fs)
            .map_err(|e| Error::config("augment", e.to_string()))?;
        let feature_shape = config.stft.feature_shape(channels, n)?;
        let (c, f, t) = feature_shape;
        let model = config.model.model_config(c, f, t);
        model.validate().map_err(|e| Error::config("model", e.to_string()))?;
        Ok(Trainer {
            state: DualNetworkState::new(&model, config.train.seed, config.train.ema_lambda)?,
            stft: Stft::new(config.stft)?,
            config: config.clone(),
            feature_shape,
            epochs_done: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        Ok(Trainer {
            stft: Stft::new(ckpt.config.stft)?,
            config: ckpt.config,
            state: ckpt.state,
            feature_shape: ckpt.feature_shape,
            epochs_done: ckpt.epochs_done,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            feature_shape: self.feature_shape,
            epochs_done: self.epochs_done,
            state: self.state.clone(),
        }
    }

    /// Runs the next epoch over `data`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochLog> {
        let start = Instant::now();
        let epoch = self.epochs_done;
        let seed = self.config.train.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(seed, TAG_SHUFFLE, epoch as u64, 0));
        let mut step_losses = Vec::new();
        for (b, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Epoch> = chunk.iter().map(|&i| data.epochs()[i].clone()).collect();
            let mut rng = stream_rng(seed, TAG_AUGMENT, epoch as u64, b as u64);
            step_losses.push(pretext_step(&batch, &mut self.state, &self.config, &self.stft, &mut rng)?);
        }
        if step_losses.is_empty() {
            return Err(Error::config("train.batch_size", "the pretext group yields no batch of two"));
        }
        self.epochs_done += 1;
        Ok(EpochLog {
            epoch: self.epochs_done,
            mean_loss: step_losses.iter().sum::<f64>() / step_losses.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
            step_losses,
        })
    }
}

/// Where [`run_pretext`] put its outputs.
#[derive(Debug, Clone)]
pub struct PretextOutcome {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub log: Vec<EpochLog>,
    pub state: DualNetworkState,
}

pub const METRICS_HEADER: &str = "epoch,mean_loss,wall_seconds";

fn write_metrics_row(path: &Path, row: &EpochLog) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{},{:.17e},{:.3}", row.epoch, row.mean_loss, row.wall_seconds).map_err(|e| Error::io(path, e))
}

/// Trains on `split.pretext` until `train.epochs` epochs are done.
///
/// With `out_dir`, writes `metrics.csv` and `checkpoint.bin` there (the
/// checkpoint every `train.checkpoint_every` epochs and at the end). A
/// `resume` checkpoint continues from its epoch count, appending metrics.
pub fn run_pretext(
    split: &Split,
    config: &RunConfig,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<PretextOutcome> {
    let mut trainer = match resume {
        Some(ckpt) => {
            ckpt.check_compatible(config)?;
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.config.train.epochs = config.train.epochs;
            t
        }
        None => Trainer::new(config, &split.pretext)?,
    };
    if split.pretext.is_empty() {
        return Err(Error::config("split.ratios", "the pretext group is empty"));
    }
    let paths = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let metrics = dir.join("metrics.csv");
            if trainer.epochs_done == 0 || !metrics.exists() {
                fs::write(&metrics, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics, e))?;
            }
            Some((metrics, dir.join("checkpoint.bin")))
        }
        None => None,
    };
    let total = trainer.config.train.epochs;
    let every = trainer.config.train.checkpoint_every;
    let mut log = Vec::new();
    while trainer.epochs_done < total {
        let row = trainer.run_epoch(&split.pretext)?;
        if let Some((metrics, ckpt)) = &paths {
            write_metrics_row(metrics, &row)?;
            if trainer.epochs_done % every == 0 || trainer.epochs_done == total {
                trainer.checkpoint().save(ckpt)?;
            }
        }
        log.push(row);
    }
    Ok(PretextOutcome {
        checkpoint: paths.as_ref().map(|p| p.1.clone()),
        metrics: paths.map(|p| p.0),
        log,
        state: trainer.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_examples() {
        let t = Tensor::new(&[2], vec![1.0f64, 1.0]).unwrap();
        let mut p = Tensor::new(&[2], vec![0.0f64, 0.0]).unwrap();
        ema_update_tensors(&[&t], &mut [&mut p], 0.5).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        ema_update_tensors(&[&t], &mut [&mut p], 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        ema_update_tensors(&[&t], &mut [&mut p], 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert!(ema_update_tensors(&[&t], &mut [&mut p], 1.5).is_err());
        let mut q = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(
            ema_update_tensors(&[&t], &mut [&mut q], 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn streams_differ() {
        use rand::Rng;
        let a: u64 = stream_rng(1, 2, 3, 4).random();
        let b: u64 = stream_rng(1, 2, 3, 5).random();
        let c: u64 = stream_rng(1, 2, 3, 4).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
