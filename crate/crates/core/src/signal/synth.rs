//! Synthetic bearing vibration records.
//!
//! Each class is a shaft-harmonic background plus, for faulty bearings, a
//! train of exponentially decaying resonance bursts at the fault's impact
//! rate. Severity levels of one fault location share the impact rate and
//! differ in resonance, damping and amplitude, which keeps neighbouring
//! classes close together.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{RawRecord, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Shaft rotation at 1800 r/min.
const SHAFT_HZ: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPreset {
    pub name: &'static str,
    /// Impacts per second; zero for a healthy bearing.
    pub impact_hz: f64,
    pub resonance_hz: f64,
    /// Exponential decay rate of each burst, 1/s.
    pub damping: f64,
    pub impact_amp: f64,
    /// Amplitude modulation of the bursts (shaft or cage rate).
    pub modulation_hz: f64,
    pub modulation_depth: f64,
    /// Amplitudes of shaft harmonics 1x, 2x, 3x.
    pub harmonics: [f64; 3],
    pub noise_std: f64,
}

const fn preset(
    name: &'static str,
    impact_hz: f64,
    resonance_hz: f64,
    damping: f64,
    impact_amp: f64,
    modulation_hz: f64,
    modulation_depth: f64,
) -> ClassPreset {
    ClassPreset {
        name,
        impact_hz,
        resonance_hz,
        damping,
        impact_amp,
        modulation_hz,
        modulation_depth,
        harmonics: [0.5, 0.25, 0.1],
        noise_std: 0.3,
    }
}

/// Ten health states: healthy, then outer race, inner race and ball faults
/// at three severities each.
pub const PRESETS: [ClassPreset; 10] = [
    ClassPreset {
        name: "healthy",
        impact_hz: 0.0,
        resonance_hz: 0.0,
        damping: 0.0,
        impact_amp: 0.0,
        modulation_hz: 0.0,
        modulation_depth: 0.0,
        harmonics: [0.6, 0.3, 0.15],
        noise_std: 0.3,
    },
    preset("outer-minor", 107.0, 3100.0, 900.0, 0.8, 0.0, 0.0),
    preset("outer-moderate", 107.0, 2800.0, 700.0, 1.1, 0.0, 0.0),
    preset("outer-severe", 107.0, 2500.0, 500.0, 1.4, 0.0, 0.0),
    preset("inner-minor", 162.0, 3600.0, 1000.0, 0.8, SHAFT_HZ, 0.5),
    preset("inner-moderate", 162.0, 3300.0, 800.0, 1.1, SHAFT_HZ, 0.5),
    preset("inner-severe", 162.0, 3000.0, 600.0, 1.4, SHAFT_HZ, 0.5),
    preset("ball-minor", 141.0, 4300.0, 1100.0, 0.8, 12.0, 0.4),
    preset("ball-moderate", 141.0, 4000.0, 900.0, 1.1, 12.0, 0.4),
    preset("ball-severe", 141.0, 3700.0, 700.0, 1.4, 12.0, 0.4),
];

/// Generates `duration` seconds of the preset for `class_id` at 12 kHz.
pub fn gen_synthetic<R: Rng + ?Sized>(
    class_id: usize,
    duration: f64,
    rng: &mut R,
) -> Result<RawRecord> {
    let preset = PRESETS.get(class_id).ok_or_else(|| {
        Error::InvalidArgument(format!("class id {class_id} outside 0..{}", PRESETS.len()))
    })?;
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let fs = DEFAULT_SAMPLE_RATE;
    let n = (duration * fs).round() as usize;
    let mut x = vec![0.0; n];

    for (k, &amp) in preset.harmonics.iter().enumerate() {
        let phase = rng.random_range(0.0..2.0 * PI);
        let f = SHAFT_HZ * (k + 1) as f64;
        for (i, v) in x.iter_mut().enumerate() {
            *v += amp * (2.0 * PI * f * i as f64 / fs + phase).sin();
        }
    }

    if preset.impact_hz > 0.0 {
        let period = 1.0 / preset.impact_hz;
        // bursts are negligible after ~7 time constants
        let tail = ((7.0 / preset.damping) * fs).ceil() as usize;
        let mod_phase = rng.random_range(0.0..2.0 * PI);
        let mut t = rng.random_range(0.0..period);
        while t < duration {
            // slip of the rolling elements jitters impact times by ~1%
            let jitter: f64 = StandardNormal.sample(rng);
            let t_hit = t + 0.01 * period * jitter;
            let env = 1.0
                + preset.modulation_depth
                    * (2.0 * PI * preset.modulation_hz * t_hit + mod_phase).cos();
            let scatter: f64 = StandardNormal.sample(rng);
            let amp = preset.impact_amp * env * (1.0 + 0.1 * scatter);
            let start = (t_hit * fs).ceil().max(0.0) as usize;
            for i in start..(start + tail).min(n) {
                let dt = i as f64 / fs - t_hit;
                x[i] += amp * (-preset.damping * dt).exp() * (2.0 * PI * preset.resonance_hz * dt).sin();
            }
            t += period;
        }
    }

    for v in x.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += preset.noise_std * e;
    }

    Ok(RawRecord {
        samples: x,
        label: class_id,
        sample_rate: fs,
    })
}
