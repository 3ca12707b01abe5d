//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, the config snapshot as
//! length-prefixed INI text, feature shape, counters, then six tensor groups
//! (online params, online buffers, target params, target buffers, Adam first
//! and second moments). Each tensor is `u32` rank, `u64` dims, `f32` data.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Network, Tensor};
use crate::training::{stream_rng, DualNetworkState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CWRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// `(2C, F, T)` the networks were built for.
    pub feature_shape: (usize, usize, usize),
    pub epochs_done: usize,
    pub state: DualNetworkState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensors<'a>(&mut self, group: impl IntoIterator<Item = &'a Tensor<f32>>) {
        let group: Vec<_> = group.into_iter().collect();
        self.u32(group.len() as u32);
        for t in group {
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for v in t.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format_at(
                format!("byte offset {}", self.pos),
                format!("checkpoint truncated, needed {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads a tensor group into `dst`, requiring identical shapes.
    fn tensors_into(&mut self, what: &str, dst: Vec<&mut Tensor<f32>>) -> Result<()> {
        let count = self.u32()? as usize;
        if count != dst.len() {
            return Err(Error::Compatibility(format!(
                "{what}: checkpoint has {count} arrays, model expects {}",
                dst.len()
            )));
        }
        for (i, t) in dst.into_iter().enumerate() {
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(Error::format_at(format!("byte offset {}", self.pos - 4), "implausible tensor rank"));
            }
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != t.shape() {
                return Err(Error::Compatibility(format!(
                    "{what}[{i}]: checkpoint shape {shape:?}, model shape {:?}",
                    t.shape()
                )));
            }
            let raw = self.take(4 * t.len())?;
            for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
        w.u32(CHECKPOINT_VERSION);
        let text = self.config.to_ini();
        w.u64(text.len() as u64);
        w.0.extend_from_slice(text.as_bytes());
        let (c, f, t) = self.feature_shape;
        for v in [c, f, t, self.epochs_done] {
            w.u64(v as u64);
        }
        let s = &self.state;
        w.u64(s.step);
        w.u64(s.adam.step);
        w.0.extend_from_slice(&s.ema_lambda.to_le_bytes());
        w.tensors(s.online.params());
        w.tensors(s.online.buffers());
        w.tensors(s.target.params());
        w.tensors(s.target.buffers());
        w.tensors(&s.adam.m);
        w.tensors(&s.adam.v);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format_at("byte offset 0", "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format_at(format!("byte offset {at}"), "config snapshot is not UTF-8"))?;
        let config = RunConfig::from_ini(text)?;
        let c = r.u64()? as usize;
        let f = r.u64()? as usize;
        let t = r.u64()? as usize;
        let epochs_done = r.u64()? as usize;
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let ema_lambda = f64::from_le_bytes(r.take(8)?.try_into().unwrap());

        let model = config.model.model_config(c, f, t);
        let mut online: Network<f32> = Network::new(&model, &mut stream_rng(0, 0, 0, 0))
            .map_err(|e| Error::Compatibility(e.to_string()))?;
        r.tensors_into("online params", online.params_mut())?;
        r.tensors_into("online buffers", online.buffers_mut())?;
        let mut target = online.clone();
        r.tensors_into("target params", target.params_mut())?;
        r.tensors_into("target buffers", target.buffers_mut())?;
        let mut adam = AdamState::new(&online.params());
        adam.step = adam_step;
        r.tensors_into("adam m", adam.m.iter_mut().collect())?;
        r.tensors_into("adam v", adam.v.iter_mut().collect())?;
        if r.pos != bytes.len() {
            return Err(Error::format_at(format!("byte offset {}", r.pos), "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            feature_shape: (c, f, t),
            epochs_done,
            state: DualNetworkState {
                online,
                target,
                adam,
                ema_lambda,
                step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects a run config whose STFT or architecture differs from the
    /// checkpoint's.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        if config.stft != self.config.stft {
            return Err(Error::Compatibility(format!(
                "checkpoint STFT {:?} differs from configured {:?}",
                self.config.stft, config.stft
            )));
        }
        if config.model != self.config.model {
            return Err(Error::Compatibility(format!(
                "checkpoint model {:?} differs from configured {:?}",
                self.config.model, config.model
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.model.latent_dim = 64;
        config.model.projection_dim = 8;
        let model = config.model.model_config(4, 33, 12);
        let mut state = DualNetworkState::new(&model, 3, 0.9).unwrap();
        state.step = 17;
        state.adam.step = 17;
        state.target.params_mut()[0].data_mut()[0] = 0.123;
        state.adam.v[2].data_mut()[1] = 4.5;
        Checkpoint {
            config,
            feature_shape: (4, 33, 12),
            epochs_done: 2,
            state,
        }
    }

    #[test]
    fn round_trip_is_bit_stable() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Compatibility(_))));
    }

    #[test]
    fn stft_mismatch_is_incompatible() {
        let c = sample();
        let mut other = c.config.clone();
        other.stft.hop = 32;
        assert!(matches!(c.check_compatible(&other), Err(Error::Compatibility(_))));
        c.check_compatible(&c.config).unwrap();
    }
}
