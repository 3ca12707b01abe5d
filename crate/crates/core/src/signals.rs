//! Epoch data model, EPOC1/CSV ingestion, synthetic recordings and
//! subject-level splitting.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Shortest epoch accepted anywhere in the pipeline.
pub const MIN_SAMPLES: usize = 512;

/// Sleep stage label, indexed `W=0, N1=1, N2=2, N3=3, R=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    W,
    N1,
    N2,
    N3,
    R,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::R];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Stage::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::R => "R",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "W" => Ok(Stage::W),
            "N1" => Ok(Stage::N1),
            "N2" => Ok(Stage::N2),
            "N3" => Ok(Stage::N3),
            "R" => Ok(Stage::R),
            other => Err(Error::param(format!("unknown stage label {other:?}"))),
        }
    }
}

/// One C-channel, N-sample signal segment. Samples are stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    samples: Vec<f32>,
    channels: usize,
    len: usize,
    pub sample_rate_hz: f32,
    pub subject_id: String,
    pub label: Option<Stage>,
}

impl Epoch {
    pub fn new(
        samples: Vec<f32>,
        channels: usize,
        sample_rate_hz: f32,
        subject_id: impl Into<String>,
        label: Option<Stage>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("epoch needs at least one channel"));
        }
        if samples.len() % channels != 0 {
            return Err(Error::param(format!(
                "{} samples do not divide into {channels} channels",
                samples.len()
            )));
        }
        let len = samples.len() / channels;
        if len < MIN_SAMPLES {
            return Err(Error::param(format!(
                "epoch has {len} samples per channel, need at least {MIN_SAMPLES}"
            )));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::param(format!("sample rate {sample_rate_hz} must be positive")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "non-finite sample at channel {}, index {}",
                i / len,
                i % len
            )));
        }
        Ok(Epoch {
            samples,
            channels,
            len,
            sample_rate_hz,
            subject_id: subject_id.into(),
            label,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.len)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.samples[c * self.len..(c + 1) * self.len]
    }

    /// Copy of this epoch with the samples replaced. The caller keeps the shape.
    pub(crate) fn with_samples(&self, samples: Vec<f32>) -> Epoch {
        debug_assert_eq!(samples.len(), self.samples.len());
        Epoch {
            samples,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Epoch {
        Epoch {
            samples: Vec::new(),
            channels: self.channels,
            len: self.len,
            sample_rate_hz: self.sample_rate_hz,
            subject_id: self.subject_id.clone(),
            label: self.label,
        }
    }
}

/// A labelled collection of epochs sharing one shape and sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    epochs: Vec<Epoch>,
    subjects: BTreeSet<String>,
    pub clip_bound: f32,
}

impl Dataset {
    pub fn new(epochs: Vec<Epoch>, clip_bound: f32) -> Result<Self> {
        if !(clip_bound.is_finite() && clip_bound > 0.0) {
            return Err(Error::param(format!("clip bound {clip_bound} must be positive")));
        }
        if let Some(first) = epochs.first() {
            for (i, e) in epochs.iter().enumerate() {
                if e.shape() != first.shape() || e.sample_rate_hz != first.sample_rate_hz {
                    return Err(Error::param(format!(
                        "epoch {i} has shape {:?} at {} Hz, expected {:?} at {} Hz",
                        e.shape(),
                        e.sample_rate_hz,
                        first.shape(),
                        first.sample_rate_hz
                    )));
                }
            }
        }
        let subjects = epochs.iter().map(|e| e.subject_id.clone()).collect();
        Ok(Dataset {
            epochs,
            subjects,
            clip_bound,
        })
    }

    pub fn epochs(&self) -> &[Epoch] {
        &self.epochs
    }

    pub fn subjects(&self) -> &BTreeSet<String> {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `(channels, samples)` of every epoch, if any.
    pub fn epoch_shape(&self) -> Option<(usize, usize)> {
        self.epochs.first().map(Epoch::shape)
    }

    pub fn sample_rate_hz(&self) -> Option<f32> {
        self.epochs.first().map(|e| e.sample_rate_hz)
    }

    fn subset(&self, keep: &BTreeSet<String>, strip_labels: bool) -> Dataset {
        let epochs = self
            .epochs
            .iter()
            .filter(|e| keep.contains(&e.subject_id))
            .map(|e| {
                let mut e = e.clone();
                if strip_labels {
                    e.label = None;
                }
                e
            })
            .collect();
        Dataset {
            epochs,
            subjects: keep.clone(),
            clip_bound: self.clip_bound,
        }
    }
}

/// Subject-disjoint pretext/training/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub pretext: Dataset,
    pub training: Dataset,
    pub test: Dataset,
}

/// Frequency band (Hz) that dominates each synthetic class, indexed by stage.
pub const CLASS_BANDS: [(f64, f64); 5] = [
    (0.5, 4.0),
    (4.0, 7.0),
    (8.0, 12.0),
    (12.0, 16.0),
    (16.0, 25.0),
];

/// Parameters of the synthetic recording generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
    /// Amplitude of each dominant-band sinusoid. The default keeps STFT
    /// amplitudes on the same order as the phase channels, as with EEG
    /// recorded in physical units.
    pub signal_amplitude: f64,
    /// Standard deviation of the additive white noise.
    pub noise_std: f64,
    pub clip_bound: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 20,
            epochs_per_subject: 50,
            channels: 2,
            samples: 3000,
            sample_rate_hz: 100.0,
            seed: 0,
            signal_amplitude: 0.08,
            noise_std: 0.04,
            clip_bound: 50.0,
        }
    }
}

const TONES_PER_CHANNEL: usize = 3;

/// Builds a dataset whose five classes differ by which frequency band carries
/// most of the power. Each subject has its own gain; each epoch adds white
/// noise and a weaker off-class tone. Deterministic in `config.seed`.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<Dataset> {
    if config.n_subjects < 3 {
        return Err(Error::param("synthetic dataset needs at least 3 subjects"));
    }
    if config.epochs_per_subject == 0 || config.channels == 0 {
        return Err(Error::param("epochs_per_subject and channels must be positive"));
    }
    if config.samples < MIN_SAMPLES {
        return Err(Error::param(format!(
            "synthetic epochs need at least {MIN_SAMPLES} samples"
        )));
    }
    let fs = config.sample_rate_hz;
    if !(fs.is_finite() && fs > 0.0) || CLASS_BANDS[4].1 >= fs / 2.0 {
        return Err(Error::param(format!(
            "sample rate {fs} Hz cannot represent the class bands"
        )));
    }
    if config.signal_amplitude < 0.0 || config.noise_std < 0.0 {
        return Err(Error::param("amplitudes must be nonnegative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::param(e.to_string()))?;
    let n = config.samples;
    let mut epochs = Vec::with_capacity(config.n_subjects * config.epochs_per_subject);

    for s in 0..config.n_subjects {
        let subject_id = format!("S{s:03}");
        let gain = (rng.random_range(-0.4f64..0.4)).exp();
        for _ in 0..config.epochs_per_subject {
            let class = rng.random_range(0..Stage::COUNT);
            let (lo, hi) = CLASS_BANDS[class];
            let distractor = (class + rng.random_range(1..Stage::COUNT)) % Stage::COUNT;
            let (dlo, dhi) = CLASS_BANDS[distractor];

            let freqs: Vec<f64> = (0..TONES_PER_CHANNEL)
                .map(|_| rng.random_range(lo..hi))
                .collect();
            let dfreq = rng.random_range(dlo..dhi);

            let mut samples = vec![0f32; config.channels * n];
            for c in 0..config.channels {
                let channel_gain = gain * rng.random_range(0.8..1.2);
                let phases: Vec<f64> = (0..TONES_PER_CHANNEL)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                let amps: Vec<f64> = (0..TONES_PER_CHANNEL)
                    .map(|_| config.signal_amplitude * rng.random_range(0.6..1.0))
                    .collect();
                let dphase = rng.random_range(0.0..std::f64::consts::TAU);
                let damp = config.signal_amplitude * rng.random_range(0.1..0.3);
                let row = &mut samples[c * n..(c + 1) * n];
                for (t, out) in row.iter_mut().enumerate() {
                    let time = t as f64 / fs;
                    let mut v = 0.0;
                    for k in 0..TONES_PER_CHANNEL {
                        v += amps[k] * (std::f64::consts::TAU * freqs[k] * time + phases[k]).sin();
                    }
                    v += damp * (std::f64::consts::TAU * dfreq * time + dphase).sin();
                    if config.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    let v = channel_gain * v;
                    *out = v.clamp(-config.clip_bound as f64, config.clip_bound as f64) as f32;
                }
            }
            epochs.push(Epoch::new(
                samples,
                config.channels,
                fs as f32,
                subject_id.clone(),
                Stage::from_index(class),
            )?);
        }
    }
    Dataset::new(epochs, config.clip_bound)
}

/// Partitions subjects into pretext/training/test groups. Group sizes follow
/// the ratios by largest remainder; every group with a positive ratio gets at
/// least one subject. Pretext labels are removed.
pub fn split_subjects(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::param(format!("split ratios {r:?} must be nonnegative")));
    }
    let total: f64 = r.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split ratios sum to {total}, expected 1")));
    }
    let nonempty = r.iter().filter(|p| **p > 0.0).count();
    let mut subjects: Vec<String> = dataset.subjects().iter().cloned().collect();
    let n = subjects.len();
    if n < nonempty {
        return Err(Error::Split(format!(
            "{n} subjects cannot fill {nonempty} nonempty groups"
        )));
    }

    let mut counts = [0usize; 3];
    let mut remainders = [(0.0f64, 0usize); 3];
    for (g, p) in r.iter().enumerate() {
        let exact = p * n as f64;
        counts[g] = exact.floor() as usize;
        remainders[g] = (exact - exact.floor(), g);
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = n - counts.iter().sum::<usize>();
    for &(_, g) in remainders.iter().cycle() {
        if left == 0 {
            break;
        }
        if r[g] > 0.0 {
            counts[g] += 1;
            left -= 1;
        }
    }
    for g in 0..3 {
        if r[g] > 0.0 && counts[g] == 0 {
            let donor = (0..3).max_by_key(|&d| counts[d]).expect("three groups");
            counts[donor] -= 1;
            counts[g] = 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut groups: [BTreeSet<String>; 3] = Default::default();
    let mut it = subjects.into_iter();
    for g in 0..3 {
        groups[g] = it.by_ref().take(counts[g]).collect();
    }

    Ok(Split {
        pretext: dataset.subset(&groups[0], true),
        training: dataset.subset(&groups[1], false),
        test: dataset.subset(&groups[2], false),
    })
}

/// Clamps every sample into `[-bound, bound]`.
pub fn clip_amplitude(epoch: &Epoch, bound: f32) -> Result<Epoch> {
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::param(format!("clip bound {bound} must be positive")));
    }
    Ok(epoch.with_samples(epoch.samples.iter().map(|v| v.clamp(-bound, bound)).collect()))
}

// EPOC1 binary layout.
pub const EPOC1_MAGIC: &[u8; 6] = b"EPOC1\0";
pub const EPOC1_VERSION: u16 = 1;
const SUBJECT_ID_BYTES: usize = 32;
const UNLABELED: u8 = 255;
/// Size of the fixed EPOC1 header in bytes.
pub const EPOC1_HEADER_LEN: usize = 6 + 2 + 4 + 4 + 4 + 1 + SUBJECT_ID_BYTES;

pub fn encode_epoc1(epoch: &Epoch) -> Result<Vec<u8>> {
    let id = epoch.subject_id.as_bytes();
    if id.len() > SUBJECT_ID_BYTES {
        return Err(Error::param(format!(
            "subject id {:?} exceeds {SUBJECT_ID_BYTES} bytes",
            epoch.subject_id
        )));
    }
    let mut out = Vec::with_capacity(EPOC1_HEADER_LEN + 4 * epoch.samples.len());
    out.extend_from_slice(EPOC1_MAGIC);
    out.extend_from_slice(&EPOC1_VERSION.to_le_bytes());
    out.extend_from_slice(&(epoch.channels as u32).to_le_bytes());
    out.extend_from_slice(&(epoch.len as u32).to_le_bytes());
    out.extend_from_slice(&epoch.sample_rate_hz.to_le_bytes());
    out.push(epoch.label.map_or(UNLABELED, |s| s.index() as u8));
    let mut padded = [0u8; SUBJECT_ID_BYTES];
    padded[..id.len()].copy_from_slice(id);
    out.extend_from_slice(&padded);
    for v in &epoch.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_epoc1(bytes: &[u8]) -> Result<Epoch> {
    let at = |off: usize, msg: &str| Error::format_at(format!("byte offset {off}"), msg);
    if bytes.len() < EPOC1_HEADER_LEN {
        return Err(at(bytes.len(), "truncated header"));
    }
    if &bytes[..6] != EPOC1_MAGIC {
        return Err(at(0, "bad magic, expected \"EPOC1\\0\""));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != EPOC1_VERSION {
        return Err(at(6, &format!("unsupported version {version}")));
    }
    let channels = u32_at(8) as usize;
    let len = u32_at(12) as usize;
    let fs = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let label = match bytes[20] {
        UNLABELED => None,
        b => Some(Stage::from_index(b as usize).ok_or_else(|| at(20, &format!("bad label {b}")))?),
    };
    let id_raw = &bytes[21..21 + SUBJECT_ID_BYTES];
    let id_end = id_raw.iter().position(|&b| b == 0).unwrap_or(SUBJECT_ID_BYTES);
    let subject_id = std::str::from_utf8(&id_raw[..id_end])
        .map_err(|_| at(21, "subject id is not UTF-8"))?
        .to_string();

    let count = channels
        .checked_mul(len)
        .ok_or_else(|| at(8, "sample count overflows"))?;
    let expected = EPOC1_HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(at(
            bytes.len(),
            &format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(at(expected, "trailing bytes after payload"));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let off = EPOC1_HEADER_LEN + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(at(off, "non-finite sample"));
        }
        samples.push(v);
    }
    Epoch::new(samples, channels, fs, subject_id, label)
        .map_err(|e| Error::format_at("header", e.to_string()))
}

pub fn save_epoch_file(epoch: &Epoch, path: &Path) -> Result<()> {
    let bytes = encode_epoc1(epoch)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the CSV form: optional `#key=value` metadata lines, a
/// `channel,t0,t1,...` header, then one row per channel.
pub fn save_epoch_csv(epoch: &Epoch, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("#sample_rate_hz={}\n", epoch.sample_rate_hz));
    out.push_str(&format!("#subject_id={}\n", epoch.subject_id));
    if let Some(l) = epoch.label {
        out.push_str(&format!("#label={l}\n"));
    }
    out.push_str("channel");
    for t in 0..epoch.len {
        out.push_str(&format!(",t{t}"));
    }
    out.push('\n');
    for c in 0..epoch.channels {
        out.push_str(&c.to_string());
        for v in epoch.channel(c) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Sample rate assumed for CSV files without a `#sample_rate_hz` line.
pub const CSV_DEFAULT_SAMPLE_RATE: f32 = 100.0;

pub fn parse_epoch_csv(text: &str, default_subject: &str) -> Result<Epoch> {
    let row_err = |row: usize, msg: String| Error::format_at(format!("row {row}"), msg);
    let mut fs_hz = CSV_DEFAULT_SAMPLE_RATE;
    let mut subject = default_subject.to_string();
    let mut label = None;
    let mut header_cols: Option<usize> = None;
    let mut samples = Vec::new();
    let mut channels = 0;

    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            let (k, v) = meta
                .split_once('=')
                .ok_or_else(|| row_err(row, "metadata line needs key=value".into()))?;
            match k.trim() {
                "sample_rate_hz" => {
                    fs_hz = v
                        .trim()
                        .parse()
                        .map_err(|_| row_err(row, format!("bad sample rate {v:?}")))?
                }
                "subject_id" => subject = v.trim().to_string(),
                "label" => label = Some(v.parse::<Stage>().map_err(|e| row_err(row, e.to_string()))?),
                other => return Err(row_err(row, format!("unknown metadata key {other:?}"))),
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match header_cols {
            None => {
                if fields[0].trim() != "channel" {
                    return Err(row_err(row, "expected header starting with `channel`".into()));
                }
                header_cols = Some(fields.len() - 1);
            }
            Some(cols) => {
                if fields.len() - 1 != cols {
                    return Err(row_err(
                        row,
                        format!("{} samples, header declares {cols}", fields.len() - 1),
                    ));
                }
                for (j, f) in fields[1..].iter().enumerate() {
                    let v: f32 = f
                        .trim()
                        .parse()
                        .map_err(|_| row_err(row, format!("column {}: bad number {f:?}", j + 1)))?;
                    if !v.is_finite() {
                        return Err(row_err(row, format!("column {}: non-finite sample", j + 1)));
                    }
                    samples.push(v);
                }
                channels += 1;
            }
        }
    }
    if header_cols.is_none() || channels == 0 {
        return Err(row_err(text.lines().count(), "no channel rows".into()));
    }
    Epoch::new(samples, channels, fs_hz, subject, label).map_err(|e| row_err(0, e.to_string()))
}

/// Loads an epoch from EPOC1 binary, or from CSV when the extension is `.csv`.
pub fn load_epoch_file(path: &Path) -> Result<Epoch> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown");
        parse_epoch_csv(&text, stem)
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_epoc1(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> SynthConfig {
        SynthConfig {
            n_subjects: 4,
            epochs_per_subject: 5,
            samples: 1000,
            seed,
            ..SynthConfig::default()
        }
    }

    fn tone_epoch(value: f32) -> Epoch {
        Epoch::new(vec![value; 2 * 600], 2, 100.0, "S0", Some(Stage::W)).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic_dataset(&small_config(7)).unwrap();
        let b = generate_synthetic_dataset(&small_config(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small_config(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_epochs_and_subjects() {
        let cfg = SynthConfig {
            n_subjects: 10,
            epochs_per_subject: 40,
            samples: 600,
            ..SynthConfig::default()
        };
        let d = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(d.len(), 400);
        assert_eq!(d.subjects().len(), 10);
        assert!(d.epochs().iter().all(|e| e.label.is_some()));
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut cfg = small_config(1);
        cfg.n_subjects = 2;
        assert!(matches!(generate_synthetic_dataset(&cfg), Err(Error::Parameter(_))));
        let mut cfg = small_config(1);
        cfg.samples = 100;
        assert!(matches!(generate_synthetic_dataset(&cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn shhs_style_split_keeps_every_group() {
        let d = generate_synthetic_dataset(&SynthConfig {
            n_subjects: 10,
            epochs_per_subject: 1,
            samples: 600,
            ..SynthConfig::default()
        })
        .unwrap();
        let s = split_subjects(&d, (0.98, 0.01, 0.01), 3).unwrap();
        assert_eq!(s.pretext.subjects().len(), 8);
        assert_eq!(s.training.subjects().len(), 1);
        assert_eq!(s.test.subjects().len(), 1);
        assert!(s.pretext.epochs().iter().all(|e| e.label.is_none()));
        assert!(s.test.epochs().iter().all(|e| e.label.is_some()));
    }

    #[test]
    fn split_errors() {
        let d = generate_synthetic_dataset(&small_config(1)).unwrap();
        assert!(split_subjects(&d, (0.5, 0.3, 0.1), 0).is_err());
        let three = Dataset::new(
            d.epochs()
                .iter()
                .filter(|e| e.subject_id != "S000" && e.subject_id != "S001")
                .cloned()
                .collect(),
            50.0,
        )
        .unwrap();
        assert!(matches!(
            split_subjects(&three, (0.4, 0.3, 0.3), 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn clip_examples() {
        let e = tone_epoch(1.0);
        assert_eq!(clip_amplitude(&e, 2.0).unwrap(), e);
        let c = clip_amplitude(&tone_epoch(3.0), 2.5e-4).unwrap();
        assert!(c.samples().iter().all(|&v| v == 2.5e-4));
        let c = clip_amplitude(&tone_epoch(-10.0), 5.0).unwrap();
        assert!(c.samples().iter().all(|&v| v == -5.0));
        assert!(clip_amplitude(&e, 0.0).is_err());
    }

    #[test]
    fn epoch_invariants() {
        assert!(Epoch::new(vec![0.0; 100], 1, 100.0, "x", None).is_err());
        let mut v = vec![0.0; 1024];
        v[700] = f32::NAN;
        assert!(Epoch::new(v, 2, 100.0, "x", None).is_err());
        assert!(Epoch::new(vec![0.0; 1024], 0, 100.0, "x", None).is_err());
    }

    #[test]
    fn epoc1_errors_name_offsets() {
        let e = tone_epoch(0.5);
        let bytes = encode_epoc1(&e).unwrap();
        assert_eq!(bytes.len(), EPOC1_HEADER_LEN + 4 * 1200);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let msg = decode_epoc1(&bad).unwrap_err().to_string();
        assert!(msg.contains("byte offset 0"), "{msg}");

        let msg = decode_epoc1(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(msg.contains("truncated payload"), "{msg}");

        let mut nan = bytes.clone();
        let off = EPOC1_HEADER_LEN + 4 * 10;
        nan[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let msg = decode_epoc1(&nan).unwrap_err().to_string();
        assert!(msg.contains(&format!("byte offset {off}")), "{msg}");
    }

    #[test]
    fn csv_rejects_nan_with_row() {
        let mut text = String::from("channel");
        for t in 0..600 {
            text.push_str(&format!(",t{t}"));
        }
        text.push('\n');
        for c in 0..2 {
            text.push_str(&c.to_string());
            for t in 0..600 {
                text.push_str(if c == 1 && t == 5 { ",NaN" } else { ",0.5" });
            }
            text.push('\n');
        }
        let msg = parse_epoch_csv(&text, "s").unwrap_err().to_string();
        assert!(msg.contains("row 3"), "{msg}");
    }
}
