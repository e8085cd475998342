//! Run configuration: flat `key=value` files, `#` comments, later
//! assignments override earlier ones.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fxnet::accel::SimConfig;
use fxnet::distill::DistillConfig;
use fxnet::quantize::CalibrationOptions;
use fxnet::signal::{Snr, DEFAULT_HOP};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub source: Source,
    pub snrs: Vec<Snr>,
    pub per_class: usize,
    pub hop: usize,
    pub student: DistillConfig,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub calibration: usize,
    pub calib: CalibrationOptions,
    pub sim: SimConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: Source::Synthetic,
            snrs: vec![Snr::Clean, Snr::Db(8.0), Snr::Db(4.0), Snr::Db(0.0)],
            per_class: 1000,
            hop: DEFAULT_HOP,
            student: DistillConfig::default(),
            teacher_epochs: 30,
            teacher_lr: 0.03,
            calibration: 512,
            calib: CalibrationOptions::default(),
            sim: SimConfig::default(),
            out: PathBuf::from("run"),
        }
    }
}

pub const KEYS: [&str; 23] = [
    "seed",
    "source",
    "snr",
    "per_class",
    "hop",
    "temperature",
    "alpha",
    "beta",
    "gamma",
    "epochs",
    "batch_size",
    "lr",
    "teacher_epochs",
    "teacher_lr",
    "calibration",
    "margin_bits",
    "shared_fc_format",
    "clock_hz",
    "rf_select_cycles",
    "pool_cycles",
    "shift_cycles",
    "classify_cycles",
    "out",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().ok().with_context(|| format!("bad value `{v}` for `{key}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "source" => {
                self.source = if v == "synthetic" {
                    Source::Synthetic
                } else {
                    Source::Csv(PathBuf::from(v))
                }
            }
            "snr" => {
                self.snrs = v
                    .split(',')
                    .map(|s| s.parse::<Snr>())
                    .collect::<fxnet::Result<_>>()?;
            }
            "per_class" => self.per_class = num(key, v)?,
            "hop" => self.hop = num(key, v)?,
            "temperature" => self.student.temperature = num(key, v)?,
            "alpha" => self.student.alpha = num(key, v)?,
            "beta" => self.student.beta = num(key, v)?,
            "gamma" => self.student.gamma = num(key, v)?,
            "epochs" => self.student.epochs = num(key, v)?,
            "batch_size" => self.student.batch_size = num(key, v)?,
            "lr" => self.student.lr = num(key, v)?,
            "teacher_epochs" => self.teacher_epochs = num(key, v)?,
            "teacher_lr" => self.teacher_lr = num(key, v)?,
            "calibration" => self.calibration = num(key, v)?,
            "margin_bits" => self.calib.safety_margin_bits = num(key, v)?,
            "shared_fc_format" => self.calib.shared_fc_format = num(key, v)?,
            "clock_hz" => self.sim.clock_hz = num(key, v)?,
            "rf_select_cycles" => self.sim.rf_select_cycles = num(key, v)?,
            "pool_cycles" => self.sim.pool_cycles = num(key, v)?,
            "shift_cycles" => self.sim.shift_cycles = num(key, v)?,
            "classify_cycles" => self.sim.classify_cycles = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected key=value", i + 1))?;
            self.set(k, v).with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.teacher().validate()?;
        if self.snrs.is_empty() {
            bail!("empty SNR list");
        }
        if self.per_class < 4 {
            bail!("per_class must be at least 4 for a 2:1:1 split");
        }
        if self.hop == 0 || self.calibration == 0 || self.teacher_epochs == 0 || self.student.epochs == 0 {
            bail!("hop, calibration and epoch counts must be positive");
        }
        if !(self.sim.clock_hz > 0.0 && self.sim.clock_hz.is_finite()) {
            bail!("clock_hz must be positive");
        }
        Ok(())
    }

    pub fn teacher(&self) -> DistillConfig {
        DistillConfig {
            epochs: self.teacher_epochs,
            lr: self.teacher_lr,
            ..self.student
        }
    }

    /// Canonical `key=value` text, one line per key in `KEYS` order.
    pub fn to_kv(&self) -> String {
        let s = &self.student;
        let source = match &self.source {
            Source::Synthetic => "synthetic".to_string(),
            Source::Csv(p) => p.display().to_string(),
        };
        let snrs: Vec<String> = self.snrs.iter().map(|s| s.to_string()).collect();
        let values: [String; 23] = [
            self.seed.to_string(),
            source,
            snrs.join(","),
            self.per_class.to_string(),
            self.hop.to_string(),
            s.temperature.to_string(),
            s.alpha.to_string(),
            s.beta.to_string(),
            s.gamma.to_string(),
            s.epochs.to_string(),
            s.batch_size.to_string(),
            s.lr.to_string(),
            self.teacher_epochs.to_string(),
            self.teacher_lr.to_string(),
            self.calibration.to_string(),
            self.calib.safety_margin_bits.to_string(),
            self.calib.shared_fc_format.to_string(),
            self.sim.clock_hz.to_string(),
            self.sim.rf_select_cycles.to_string(),
            self.sim.pool_cycles.to_string(),
            self.sim.shift_cycles.to_string(),
            self.sim.classify_cycles.to_string(),
            self.out.display().to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// SHA-256 over the canonical text minus the output directory.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_kv()
            .lines()
            .filter(|l| !l.starts_with("out="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
