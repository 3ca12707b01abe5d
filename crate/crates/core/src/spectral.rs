//! STFT features: per input channel, an amplitude map and a phase map,
//! stacked as `[amp_1..amp_C, phase_1..phase_C]`.
//!
//! Frames use a periodic Hann window and cover only full windows (no
//! boundary padding), so `F = window/2 + 1` and
//! `T = floor((N - window)/hop) + 1`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::signals::Epoch;

/// STFT settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
    /// Use `ln(1 + |X|)` instead of `|X|` for the amplitude channels.
    pub log_amplitude: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window: 256,
            hop: 64,
            log_amplitude: false,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.window % 2 != 0 {
            return Err(Error::param(format!("STFT window {} must be even and >= 2", self.window)));
        }
        if self.hop == 0 {
            return Err(Error::param("STFT hop must be positive"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn frames(&self, n: usize) -> Result<usize> {
        if n < self.window {
            return Err(Error::param(format!(
                "signal of {n} samples is shorter than the STFT window {}",
                self.window
            )));
        }
        Ok((n - self.window) / self.hop + 1)
    }

    /// `(2C, F, T)` for an epoch of `channels x n` samples.
    pub fn feature_shape(&self, channels: usize, n: usize) -> Result<(usize, usize, usize)> {
        Ok((2 * channels, self.bins(), self.frames(n)?))
    }
}

/// Encoder input: `[2C x F x T]` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Vec<f32>,
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    pub window: usize,
    pub hop: usize,
}

impl FeatureTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.bins, self.frames)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let sz = self.bins * self.frames;
        &self.values[c * sz..(c + 1) * sz]
    }
}

/// Reusable STFT plan: window coefficients and FFT kernel for one size.
pub struct Stft {
    config: StftConfig,
    hann: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let w = config.window;
        let hann = (0..w)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / w as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(w);
        Ok(Stft { config, hann, fft })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Complex one-sided spectrum, `F` rows by `T` columns.
    pub fn transform(&self, signal: &[f64]) -> Result<Vec<Complex<f64>>> {
        let frames = self.config.frames(signal.len())?;
        let (w, hop, bins) = (self.config.window, self.config.hop, self.config.bins());
        let mut out = vec![Complex::new(0.0, 0.0); bins * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); w];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(signal[start + i] * self.hann[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..bins {
                out[f * frames + t] = buf[f];
            }
        }
        Ok(out)
    }

    pub fn features(&self, epoch: &Epoch) -> Result<FeatureTensor> {
        let c = epoch.channels();
        let (_, bins, frames) = self.config.feature_shape(c, epoch.len())?;
        let plane = bins * frames;
        let mut values = vec![0f32; 2 * c * plane];
        let mut signal = vec![0f64; epoch.len()];
        for ch in 0..c {
            for (s, &x) in signal.iter_mut().zip(epoch.channel(ch)) {
                *s = x as f64;
            }
            let spec = self.transform(&signal)?;
            let (amp, rest) = values.split_at_mut(c * plane);
            let amp = &mut amp[ch * plane..(ch + 1) * plane];
            let phase = &mut rest[ch * plane..(ch + 1) * plane];
            for (i, z) in spec.iter().enumerate() {
                let mag = z.norm();
                amp[i] = if self.config.log_amplitude {
                    mag.ln_1p() as f32
                } else {
                    mag as f32
                };
                phase[i] = if mag == 0.0 { 0.0 } else { z.arg() as f32 };
            }
        }
        Ok(FeatureTensor {
            values,
            channels: 2 * c,
            bins,
            frames,
            window: self.config.window,
            hop: self.config.hop,
        })
    }
}

/// One-shot STFT of a single channel.
pub fn stft(signal: &[f64], window: usize, hop: usize) -> Result<Vec<Complex<f64>>> {
    Stft::new(StftConfig {
        window,
        hop,
        log_amplitude: false,
    })?
    .transform(signal)
}

/// One-shot feature extraction for an epoch.
pub fn epoch_to_features(epoch: &Epoch, config: StftConfig) -> Result<FeatureTensor> {
    Stft::new(config)?.features(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::Stage;

    #[test]
    fn frame_count_for_default_epoch() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frames(3000).unwrap(), 43);
        assert_eq!(cfg.bins(), 129);
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(stft(&[0.0; 100], 256, 64).is_err());
        assert!(stft(&[0.0; 300], 255, 64).is_err());
        assert!(stft(&[0.0; 300], 256, 0).is_err());
    }

    #[test]
    fn zero_signal_gives_zero_spectrum() {
        let z = stft(&[0.0; 600], 256, 64).unwrap();
        assert!(z.iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn zero_epoch_features() {
        let e = Epoch::new(vec![0.0; 2 * 600], 2, 100.0, "s", Some(Stage::N2)).unwrap();
        let f = epoch_to_features(&e, StftConfig::default()).unwrap();
        assert_eq!(f.shape(), (4, 129, 6));
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amplitude_matches_complex_modulus() {
        let samples: Vec<f32> = (0..2 * 700).map(|i| ((i * 37) % 101) as f32 * 0.1 - 5.0).collect();
        let e = Epoch::new(samples, 2, 100.0, "s", None).unwrap();
        let f = epoch_to_features(&e, StftConfig::default()).unwrap();
        for ch in 0..2 {
            let sig: Vec<f64> = e.channel(ch).iter().map(|&v| v as f64).collect();
            let z = stft(&sig, 256, 64).unwrap();
            for (a, c) in f.plane(ch).iter().zip(&z) {
                let expect = (c.re * c.re + c.im * c.im).sqrt();
                assert!((*a as f64 - expect).abs() <= 1e-5 * expect.max(1.0));
            }
            for p in f.plane(2 + ch) {
                assert!(p.abs() <= std::f32::consts::PI);
            }
        }
    }

    #[test]
    fn log_amplitude_toggle() {
        let samples: Vec<f32> = (0..700).map(|i| (i as f32 * 0.3).sin()).collect();
        let e = Epoch::new(samples, 1, 100.0, "s", None).unwrap();
        let raw = epoch_to_features(&e, StftConfig::default()).unwrap();
        let log = epoch_to_features(
            &e,
            StftConfig {
                log_amplitude: true,
                ..StftConfig::default()
            },
        )
        .unwrap();
        for (r, l) in raw.plane(0).iter().zip(log.plane(0)) {
            assert!((r.ln_1p() - l).abs() < 1e-5);
        }
        assert_eq!(raw.plane(1), log.plane(1));
    }
}
