//! Vibration-signal preprocessing: windowing, SNR-controlled noise, z-score
//! standardization and FFT magnitudes.
//!
//! Per segment the pipeline is
//! `z-score -> noise -> z-score -> |FFT| (bins 0..1024) -> z-score`.

pub mod fft;
pub mod io;
pub mod synth;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use synth::{gen_synthetic, ClassPreset, PRESETS};

/// Points per time-domain segment.
pub const SEGMENT_LEN: usize = 2048;
/// Retained one-sided FFT bins; the network input length.
pub const SPECTRUM_LEN: usize = SEGMENT_LEN / 2;
pub const DEFAULT_SAMPLE_RATE: f64 = 12_000.0;
/// Window hop used to resample a long record.
pub const DEFAULT_HOP: usize = 28;

const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub samples: Vec<f64>,
    pub label: usize,
    pub sample_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Labeled spectra with a train/val/test assignment per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Spectrum>,
    pub split: Vec<Split>,
    pub num_classes: usize,
}

impl SampleSet {
    pub fn subset(&self, which: Split) -> Vec<&Spectrum> {
        self.samples
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.split.iter().filter(|s| **s == which).count()
    }
}

/// SNR of injected noise. `Clean` skips noise injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl Snr {
    /// `+inf` maps to [`Snr::Clean`].
    pub fn from_db(db: f64) -> Self {
        if db == f64::INFINITY {
            Snr::Clean
        } else {
            Snr::Db(db)
        }
    }

    /// Short tag for file names: `clean`, `8db`, `m6db`.
    pub fn tag(self) -> String {
        match self {
            Snr::Clean => "clean".into(),
            Snr::Db(db) if db < 0.0 => format!("m{}db", -db),
            Snr::Db(db) => format!("{db}db"),
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "clean" || t == "inf" || t == "+inf" {
            return Ok(Snr::Clean);
        }
        let t = t.trim_end_matches("db");
        let t = t.strip_prefix('m').map(|r| format!("-{r}")).unwrap_or(t.to_string());
        t.parse::<f64>()
            .map(Snr::from_db)
            .map_err(|_| Error::InvalidArgument(format!("bad SNR `{s}`")))
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Clean => f.write_str("clean"),
            Snr::Db(db) => write!(f, "{db}"),
        }
    }
}

/// Start indices of `count` windows: a random anchor, then `hop` apart,
/// wrapping back to the start of the record.
pub fn window_starts<R: Rng + ?Sized>(
    len: usize,
    count: usize,
    hop: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if len < SEGMENT_LEN {
        return Err(Error::InvalidArgument(format!(
            "record of {len} points is shorter than one {SEGMENT_LEN}-point window"
        )));
    }
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be at least 1".into()));
    }
    let feasible = len - SEGMENT_LEN + 1;
    let anchor = rng.random_range(0..feasible);
    Ok((0..count).map(|i| (anchor + i * hop) % feasible).collect())
}

pub fn sample_windows<R: Rng + ?Sized>(
    record: &RawRecord,
    count: usize,
    hop: usize,
    rng: &mut R,
) -> Result<Vec<Segment>> {
    let starts = window_starts(record.samples.len(), count, hop, rng)?;
    Ok(starts
        .into_iter()
        .map(|s| Segment {
            x: record.samples[s..s + SEGMENT_LEN].to_vec(),
            label: record.label,
        })
        .collect())
}

/// Mean of squared samples.
pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Adds white Gaussian noise with power `P_s / 10^(snr/10)`.
pub fn add_noise<R: Rng + ?Sized>(seg: &Segment, snr: Snr, rng: &mut R) -> Result<Segment> {
    let Snr::Db(db) = snr else {
        return Ok(seg.clone());
    };
    let ps = power(&seg.x);
    if ps == 0.0 || seg.x.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot set an SNR for a zero-power segment".into(),
        ));
    }
    let sigma = (ps / 10f64.powf(db / 10.0)).sqrt();
    let x = seg
        .x
        .iter()
        .map(|&v| {
            let n: f64 = StandardNormal.sample(rng);
            v + sigma * n
        })
        .collect();
    Ok(Segment {
        x,
        label: seg.label,
    })
}

/// `(x - mean) / std` with the population standard deviation. Near-constant
/// input maps to zeros.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < SIGMA_FLOOR {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / sd).collect()
}

pub fn rfft_mag(seg: &Segment) -> Result<Spectrum> {
    Ok(Spectrum {
        x: fft::rfft_magnitude(&seg.x)?,
        label: seg.label,
    })
}

/// Windows a record and turns every window into a standardized spectrum.
pub fn preprocess<R: Rng + ?Sized>(
    record: &RawRecord,
    count: usize,
    hop: usize,
    snr: Snr,
    rng: &mut R,
) -> Result<Vec<Spectrum>> {
    let segments = sample_windows(record, count, hop, rng)?;
    segments
        .into_iter()
        .map(|seg| preprocess_segment(seg, snr, rng))
        .collect()
}

pub fn preprocess_segment<R: Rng + ?Sized>(
    seg: Segment,
    snr: Snr,
    rng: &mut R,
) -> Result<Spectrum> {
    let seg = Segment {
        x: zscore(&seg.x),
        label: seg.label,
    };
    let noisy = add_noise(&seg, snr, rng)?;
    let seg = Segment {
        x: zscore(&noisy.x),
        label: noisy.label,
    };
    let spec = rfft_mag(&seg)?;
    let x = zscore(&spec.x);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectrum"));
    }
    Ok(Spectrum { x, label: spec.label })
}

/// Stratified random 2:1:1 split. Per class of `n` samples, `n/4` go to
/// validation, `n/4` to test and the rest to training.
pub fn make_splits<R: Rng + ?Sized>(samples: Vec<Spectrum>, rng: &mut R) -> Result<SampleSet> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut split = vec![Split::Train; samples.len()];
    for (class, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, need at least 4",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        let quarter = idx.len() / 4;
        for &i in &idx[..quarter] {
            split[i] = Split::Val;
        }
        for &i in &idx[quarter..2 * quarter] {
            split[i] = Split::Test;
        }
    }
    Ok(SampleSet {
        samples,
        split,
        num_classes,
    })
}

/// Seconds of signal generated per synthetic class record.
pub const SYNTH_DURATION: f64 = 10.0;

/// `per_class` spectra from every record, split 2:1:1 per class.
pub fn dataset_from_records<R: Rng + ?Sized>(
    records: &[RawRecord],
    per_class: usize,
    hop: usize,
    snr: Snr,
    rng: &mut R,
) -> Result<SampleSet> {
    let mut samples = Vec::with_capacity(records.len() * per_class);
    for rec in records {
        samples.extend(preprocess(rec, per_class, hop, snr, rng)?);
    }
    make_splits(samples, rng)
}

/// One record per synthetic class preset.
pub fn synthetic_records<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<RawRecord>> {
    (0..PRESETS.len())
        .map(|c| gen_synthetic(c, SYNTH_DURATION, rng))
        .collect()
}
