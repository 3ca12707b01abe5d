//! Stochastic signal augmentations: bandpass filtering, noising, channel
//! flipping and rotation, plus the uniform selector that produces one
//! augmented view per call.
//!
//! Every augmentation preserves the `(C, N)` shape of its input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::signals::{clip_amplitude, Epoch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Bandpass,
    Noising,
    Flipping,
    Rotation,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Bandpass,
        Method::Noising,
        Method::Flipping,
        Method::Rotation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bandpass => "bandpass",
            Method::Noising => "noising",
            Method::Flipping => "flipping",
            Method::Rotation => "rotation",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bandpass" => Ok(Method::Bandpass),
            "noising" | "noise" => Ok(Method::Noising),
            "flipping" | "flip" => Ok(Method::Flipping),
            // The shift augmentation is a cyclic rotation.
            "rotation" | "rotate" | "shifting" => Ok(Method::Rotation),
            other => Err(Error::param(format!("unknown augmentation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    High,
    Low,
    Both,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [NoiseMode::High, NoiseMode::Low, NoiseMode::Both];
}

/// Which augmentations may be drawn and how each is parameterised.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub enabled: Vec<Method>,
    pub bandpass_bands: Vec<(f64, f64)>,
    pub noise_degree: f64,
    pub flip_pairs: Vec<(usize, usize)>,
    pub clip_bound: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: Method::ALL.to_vec(),
            bandpass_bands: vec![(1.0, 5.0), (30.0, 49.0)],
            noise_degree: 0.05,
            flip_pairs: vec![(0, 1)],
            clip_bound: 50.0,
        }
    }
}

impl AugmentPolicy {
    /// Checks the policy against the shape and rate of the epochs it will see.
    pub fn validate(&self, channels: usize, sample_rate_hz: f64) -> Result<()> {
        if self.enabled.is_empty() {
            return Err(Error::param("augment policy enables nothing"));
        }
        if self.enabled.iter().all(|m| *m == Method::Flipping) {
            return Err(Error::param("flipping cannot be the only augmentation"));
        }
        if self.enabled.contains(&Method::Bandpass) {
            if self.bandpass_bands.is_empty() {
                return Err(Error::param("bandpass enabled without bands"));
            }
            for &(lo, hi) in &self.bandpass_bands {
                check_band(lo, hi, sample_rate_hz)?;
            }
        }
        if !(self.noise_degree >= 0.0 && self.noise_degree.is_finite()) {
            return Err(Error::param(format!(
                "noise degree {} must be nonnegative",
                self.noise_degree
            )));
        }
        if self.enabled.contains(&Method::Flipping) {
            check_pairs(&self.flip_pairs, channels)?;
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(Error::param("clip bound must be positive"));
        }
        Ok(())
    }
}

fn check_band(lo: f64, hi: f64, fs: f64) -> Result<()> {
    if !(lo >= 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::param(format!(
            "band ({lo}, {hi}) Hz must satisfy 0 <= low < high < {} (Nyquist)",
            fs / 2.0
        )));
    }
    Ok(())
}

fn check_pairs(pairs: &[(usize, usize)], channels: usize) -> Result<()> {
    let mut seen = vec![false; channels];
    for &(i, j) in pairs {
        if i >= channels || j >= channels {
            return Err(Error::param(format!(
                "flip pair ({i}, {j}) out of range for {channels} channels"
            )));
        }
        if i == j {
            return Err(Error::param(format!("flip pair ({i}, {j}) swaps a channel with itself")));
        }
        for k in [i, j] {
            if seen[k] {
                return Err(Error::param(format!("channel {k} appears in two flip pairs")));
            }
            seen[k] = true;
        }
    }
    Ok(())
}

/// First-order IIR section `y[n] = b0 x[n] + b1 x[n-1] - a1 y[n-1]`.
#[derive(Debug, Clone, Copy)]
struct FirstOrder {
    b0: f64,
    b1: f64,
    a1: f64,
}

impl FirstOrder {
    // Bilinear transform with the cutoff prewarped.
    fn lowpass(cutoff_hz: f64, fs: f64) -> Self {
        let k = (std::f64::consts::PI * cutoff_hz / fs).tan();
        let norm = 1.0 / (1.0 + k);
        FirstOrder {
            b0: k * norm,
            b1: k * norm,
            a1: (k - 1.0) * norm,
        }
    }

    fn highpass(cutoff_hz: f64, fs: f64) -> Self {
        let k = (std::f64::consts::PI * cutoff_hz / fs).tan();
        let norm = 1.0 / (1.0 + k);
        FirstOrder {
            b0: norm,
            b1: -norm,
            a1: (k - 1.0) * norm,
        }
    }

    fn run(&self, signal: &mut [f64]) {
        let (mut x1, mut y1) = (0.0, 0.0);
        for v in signal.iter_mut() {
            let x = *v;
            let y = self.b0 * x + self.b1 * x1 - self.a1 * y1;
            x1 = x;
            y1 = y;
            *v = y;
        }
    }
}

/// Causal order-1 Butterworth bandpass: a high-pass section at `low_hz`
/// followed by a low-pass section at `high_hz`. `low_hz = 0` skips the
/// high-pass section.
pub fn bandpass(epoch: &Epoch, low_hz: f64, high_hz: f64) -> Result<Epoch> {
    let fs = epoch.sample_rate_hz as f64;
    check_band(low_hz, high_hz, fs)?;
    let hp = (low_hz > 0.0).then(|| FirstOrder::highpass(low_hz, fs));
    let lp = FirstOrder::lowpass(high_hz, fs);

    let mut out = Vec::with_capacity(epoch.samples().len());
    let mut buf = vec![0f64; epoch.len()];
    for c in 0..epoch.channels() {
        for (b, &x) in buf.iter_mut().zip(epoch.channel(c)) {
            *b = x as f64;
        }
        if let Some(hp) = &hp {
            hp.run(&mut buf);
        }
        lp.run(&mut buf);
        out.extend(buf.iter().map(|&v| v as f32));
    }
    Ok(epoch.with_samples(out))
}

/// Half the peak-to-peak range of one channel.
pub fn amplitude_range(channel: &[f32]) -> f64 {
    let (lo, hi) = channel
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    ((hi - lo) as f64 / 2.0).max(0.0)
}

fn uniform_seq<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect()
}

/// Piecewise-linear resampling of evenly spaced knots onto `len` points.
fn interpolate(knots: &[f64], len: usize) -> Vec<f64> {
    if knots.len() == 1 || len == 1 {
        return vec![knots[0]; len];
    }
    let span = (knots.len() - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|t| {
            let pos = t as f64 * span;
            let i = (pos.floor() as usize).min(knots.len() - 2);
            let frac = pos - i as f64;
            knots[i] * (1.0 - frac) + knots[i + 1] * frac
        })
        .collect()
}

/// The additive noise `add_noise` would apply, before clipping. Channel-major,
/// same length as the epoch's samples.
pub fn noise_sequence<R: Rng + ?Sized>(
    epoch: &Epoch,
    degree: f64,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(degree >= 0.0 && degree.is_finite()) {
        return Err(Error::param(format!("noise degree {degree} must be nonnegative")));
    }
    let n = epoch.len();
    let knots = (n / 100).max(2);
    let mut noise = Vec::with_capacity(epoch.samples().len());
    for c in 0..epoch.channels() {
        let scale = degree * amplitude_range(epoch.channel(c));
        let mut seq = vec![0.0; n];
        if matches!(mode, NoiseMode::High | NoiseMode::Both) {
            for (s, u) in seq.iter_mut().zip(uniform_seq(n, scale, rng)) {
                *s += u;
            }
        }
        if matches!(mode, NoiseMode::Low | NoiseMode::Both) {
            let low = interpolate(&uniform_seq(knots, scale, rng), n);
            for (s, u) in seq.iter_mut().zip(low) {
                *s += u;
            }
        }
        noise.extend(seq);
    }
    Ok(noise)
}

/// Adds uniform noise scaled by `degree` times each channel's amplitude range,
/// then clips to `clip_bound`. `mode = None` draws high/low/both uniformly.
pub fn add_noise<R: Rng + ?Sized>(
    epoch: &Epoch,
    degree: f64,
    mode: Option<NoiseMode>,
    clip_bound: f32,
    rng: &mut R,
) -> Result<Epoch> {
    let mode = match mode {
        Some(m) => m,
        None => NoiseMode::ALL[rng.random_range(0..NoiseMode::ALL.len())],
    };
    let noise = noise_sequence(epoch, degree, mode, rng)?;
    let samples = epoch
        .samples()
        .iter()
        .zip(noise)
        .map(|(&x, z)| (x as f64 + z) as f32)
        .collect();
    clip_amplitude(&epoch.with_samples(samples), clip_bound)
}

/// Swaps each listed channel pair.
pub fn flip_channels(epoch: &Epoch, pairs: &[(usize, usize)]) -> Result<Epoch> {
    check_pairs(pairs, epoch.channels())?;
    let mut out = epoch.clone();
    let n = epoch.len();
    for &(i, j) in pairs {
        out.channel_mut(i).copy_from_slice(epoch.channel(j));
        out.channel_mut(j).copy_from_slice(epoch.channel(i));
    }
    debug_assert_eq!(out.samples().len(), epoch.channels() * n);
    Ok(out)
}

/// Cyclic rotation: each channel becomes `x[split..] ++ x[..split]`.
pub fn rotate(epoch: &Epoch, split_index: usize) -> Result<Epoch> {
    let n = epoch.len();
    if split_index > n {
        return Err(Error::param(format!(
            "rotation split {split_index} outside 0..={n}"
        )));
    }
    let mut out = epoch.clone();
    for c in 0..epoch.channels() {
        out.channel_mut(c).rotate_left(split_index % n.max(1));
    }
    Ok(out)
}

/// Record of what `random_augment` applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Applied {
    pub drawn: Method,
    /// The method composed with flipping, when flipping was drawn.
    pub companion: Option<Method>,
}

/// Applies `method` alone, without clipping.
pub fn apply_method<R: Rng + ?Sized>(
    epoch: &Epoch,
    method: Method,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Epoch> {
    match method {
        Method::Bandpass => {
            let (lo, hi) = policy.bandpass_bands[rng.random_range(0..policy.bandpass_bands.len())];
            bandpass(epoch, lo, hi)
        }
        Method::Noising => add_noise(epoch, policy.noise_degree, None, policy.clip_bound, rng),
        Method::Flipping => flip_channels(epoch, &policy.flip_pairs),
        Method::Rotation => rotate(epoch, rng.random_range(0..epoch.len())),
    }
}

/// Applies one uniformly drawn enabled augmentation and clips the result.
pub fn random_augment_traced<R: Rng + ?Sized>(
    epoch: &Epoch,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Epoch, Applied)> {
    policy.validate(epoch.channels(), epoch.sample_rate_hz as f64)?;
    let drawn = policy.enabled[rng.random_range(0..policy.enabled.len())];
    let (out, companion) = if drawn == Method::Flipping {
        let others: Vec<Method> = policy
            .enabled
            .iter()
            .copied()
            .filter(|m| *m != Method::Flipping)
            .collect();
        let other = others[rng.random_range(0..others.len())];
        let flipped = flip_channels(epoch, &policy.flip_pairs)?;
        (apply_method(&flipped, other, policy, rng)?, Some(other))
    } else {
        (apply_method(epoch, drawn, policy, rng)?, None)
    };
    Ok((clip_amplitude(&out, policy.clip_bound)?, Applied { drawn, companion }))
}

pub fn random_augment<R: Rng + ?Sized>(
    epoch: &Epoch,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Epoch> {
    random_augment_traced(epoch, policy, rng).map(|(e, _)| e)
}
