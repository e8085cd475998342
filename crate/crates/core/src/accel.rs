//! Cycle-counting model of the FPGA datapath.
//!
//! Stages run one after another: RF selector, conv MAC array (128 units,
//! one kernel per pass), fused ReLU/max-pool, shift, FC MAC bank (10 units
//! reused over 256 inputs) and argmax. Every arithmetic step goes through
//! the fixed-point primitives, so the output words equal those of the
//! quantized reference forward pass.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fixedpoint::{acc_add, acc_to_fixed, convert, fxp_mul, Fixed16, FixedFormat, WideAcc};
use crate::nn::model::NUM_CLASSES;
use crate::quantize::{
    quantize_input, QuantizedModel, RomImage, StageFormats, CONV_CHANNELS, CONV_LEN, FEATURES,
    KERNEL, PADDING, STRIDE,
};
use crate::signal::{Spectrum, SPECTRUM_LEN};

pub const CONV_UNITS: usize = CONV_LEN;
pub const FC_UNITS: usize = NUM_CLASSES;
pub const DEFAULT_CLOCK_HZ: f64 = 100e6;

/// Multiplier, adder and result register. One product per feed cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacUnit {
    acc: WideAcc,
    cycles: u64,
}

impl MacUnit {
    pub fn new(frac_bits: u8) -> Self {
        Self {
            acc: WideAcc::zero(frac_bits),
            cycles: 0,
        }
    }

    /// Clears the accumulator; the cycle counter keeps running.
    pub fn reset(&mut self, frac_bits: u8) {
        self.acc = WideAcc::zero(frac_bits);
    }

    pub fn feed(&mut self, p: Fixed16, q: Fixed16) -> Result<()> {
        self.acc = acc_add(self.acc, fxp_mul(p, q))?;
        self.cycles += 1;
        Ok(())
    }

    /// Adds a bias word aligned to the accumulator. Not a feed cycle.
    pub fn add_bias(&mut self, b: Fixed16) -> Result<()> {
        self.acc = acc_add(self.acc, WideAcc::from_fixed(b, self.acc.frac_bits()))?;
        Ok(())
    }

    pub fn acc(&self) -> WideAcc {
        self.acc
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }
}

/// Feeds `taps[i] * weights[i]` for every `i`, one per cycle.
pub fn mac_run(unit: &mut MacUnit, taps: &[Fixed16], weights: &[Fixed16]) -> Result<WideAcc> {
    if taps.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} taps against {} weights",
            taps.len(),
            weights.len()
        )));
    }
    for (&p, &q) in taps.iter().zip(weights) {
        unit.feed(p, q)?;
    }
    Ok(unit.acc())
}

/// The 64 input words one conv output sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub index: usize,
    pub taps: Vec<Fixed16>,
}

/// Slices the 1024-word input into 128 windows of 64 taps at stride 8, with
/// 28 zero words of padding on each side.
pub fn rf_select(input: &[Fixed16]) -> Result<Vec<Window>> {
    if input.len() != SPECTRUM_LEN {
        return Err(Error::Shape(format!("RF selector input of {} words", input.len())));
    }
    let zero = Fixed16::zero(input[0].format());
    Ok((0..CONV_LEN)
        .map(|i| Window {
            index: i,
            taps: (0..KERNEL)
                .map(|j| {
                    (i * STRIDE + j)
                        .checked_sub(PADDING)
                        .and_then(|k| input.get(k))
                        .copied()
                        .unwrap_or(zero)
                })
                .collect(),
        })
        .collect())
}

fn check_rom(rom: &RomImage) -> Result<()> {
    rom.check()
}

/// Conv outputs `[kernel][window]` in `conv_out` format, and the feed cycles
/// the array spent (lockstep, so the count of one unit).
pub fn conv_stage(rom: &RomImage, formats: &StageFormats, windows: &[Window]) -> Result<(Vec<Fixed16>, u64)> {
    check_rom(rom)?;
    if windows.len() != CONV_UNITS {
        return Err(Error::Shape(format!("{} windows for {CONV_UNITS} MAC units", windows.len())));
    }
    let frac = formats.input.frac_bits() + formats.conv_weight.frac_bits();
    let weights = rom.conv_weights(formats);
    let biases = rom.conv_biases(formats);
    let mut units = vec![MacUnit::new(frac); CONV_UNITS];
    let mut out = vec![Fixed16::zero(formats.conv_out); CONV_CHANNELS * CONV_LEN];
    for k in 0..CONV_CHANNELS {
        let w = &weights[k * KERNEL..(k + 1) * KERNEL];
        for (u, (unit, win)) in units.iter_mut().zip(windows).enumerate() {
            unit.reset(frac);
            mac_run(unit, &win.taps, w)?;
            unit.add_bias(biases[k])?;
            out[k * CONV_LEN + u] = acc_to_fixed(unit.acc(), formats.conv_out);
        }
    }
    let cycles = units[0].cycles();
    debug_assert!(units.iter().all(|u| u.cycles() == cycles));
    Ok((out, cycles))
}

/// `max(0, x1, x2)` decided on the sign bits first, then on the low 15 bits
/// when both operands are nonnegative.
pub fn fused_relu_maxpool(x1: Fixed16, x2: Fixed16) -> Fixed16 {
    let (w1, w2) = (x1.word(), x2.word());
    let neg1 = w1 >> 15 == 1;
    let neg2 = w2 >> 15 == 1;
    match (neg1, neg2) {
        (true, true) => Fixed16::zero(x1.format()),
        (false, true) => x1,
        (true, false) => x2,
        (false, false) => {
            if w1 & 0x7FFF >= w2 & 0x7FFF {
                x1
            } else {
                x2
            }
        }
    }
}

/// Pairs of adjacent conv outputs through the fused comparator, `[kernel][64]`.
pub fn pool_stage(conv_out: &[Fixed16]) -> Result<Vec<Fixed16>> {
    if conv_out.len() != CONV_CHANNELS * CONV_LEN {
        return Err(Error::Shape(format!("pool input of {} words", conv_out.len())));
    }
    Ok(conv_out
        .chunks_exact(2)
        .map(|p| fused_relu_maxpool(p[0], p[1]))
        .collect())
}

/// Re-expresses a pooled word in the FC input format.
pub fn shift_stage(x: Fixed16, fc_in: FixedFormat) -> Fixed16 {
    convert(x, fc_in)
}

/// FC outputs in `fc_out` format, and the feed cycles of the bank.
pub fn fc_stage(rom: &RomImage, formats: &StageFormats, acts: &[Fixed16]) -> Result<(Vec<Fixed16>, u64)> {
    check_rom(rom)?;
    if acts.len() != FEATURES {
        return Err(Error::Shape(format!("FC input of {} words", acts.len())));
    }
    let frac = formats.fc_in.frac_bits() + formats.fc_weight.frac_bits();
    let weights = rom.fc_weights(formats);
    let mut units = vec![MacUnit::new(frac); FC_UNITS];
    // one cycle: the ROM delivers the 10 weights of input i to the 10 units
    for (i, &a) in acts.iter().enumerate() {
        let row = &weights[i * FC_UNITS..(i + 1) * FC_UNITS];
        for (unit, &w) in units.iter_mut().zip(row) {
            unit.feed(a, w)?;
        }
    }
    let out = units
        .iter_mut()
        .zip(rom.fc_biases(formats))
        .map(|(u, b)| {
            u.add_bias(b)?;
            Ok(acc_to_fixed(u.acc(), formats.fc_out))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, units[0].cycles()))
}

/// Index of the largest logit word; the lowest index wins ties.
pub fn classify(logits: &[Fixed16]) -> usize {
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if l.raw() > logits[best].raw() {
            best = i;
        }
    }
    best
}

/// Control cycles spent outside the MAC arrays (FIFO hand-offs, stage
/// latching). Defaults sum to 65.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub clock_hz: f64,
    pub rf_select_cycles: u64,
    pub pool_cycles: u64,
    pub shift_cycles: u64,
    pub classify_cycles: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            clock_hz: DEFAULT_CLOCK_HZ,
            rf_select_cycles: 16,
            pool_cycles: 32,
            shift_cycles: 4,
            classify_cycles: 13,
        }
    }
}

impl SimConfig {
    pub fn overhead_cycles(&self) -> u64 {
        self.rf_select_cycles + self.pool_cycles + self.shift_cycles + self.classify_cycles
    }
}

/// Per-stage cycle counts of one inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleReport {
    pub rf_select: u64,
    pub conv: u64,
    pub pool: u64,
    pub shift: u64,
    pub fc: u64,
    pub classify: u64,
    pub clock_hz: f64,
}

impl CycleReport {
    pub const CSV_HEADER: &'static str = "rf_select,conv,pool,shift,fc,classify,total,clock_hz,latency_us";

    pub fn total(&self) -> u64 {
        self.rf_select + self.conv + self.pool + self.shift + self.fc + self.classify
    }

    pub fn latency_us(&self) -> f64 {
        self.total() as f64 / self.clock_hz * 1e6
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("rf_select", self.rf_select),
            ("conv", self.conv),
            ("pool", self.pool),
            ("shift", self.shift),
            ("fc", self.fc),
            ("classify", self.classify),
            ("total", self.total()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "clock_hz={}", self.clock_hz);
        let _ = writeln!(s, "latency_us={:.4}", self.latency_us());
        s
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.4}",
            self.rf_select,
            self.conv,
            self.pool,
            self.shift,
            self.fc,
            self.classify,
            self.total(),
            self.clock_hz,
            self.latency_us()
        )
    }
}

/// Result of one simulated inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub class: usize,
    pub logits: Vec<Fixed16>,
    pub report: CycleReport,
}

/// Full datapath on an already quantized input.
pub fn run_words(
    rom: &RomImage,
    formats: &StageFormats,
    input: &[Fixed16],
    config: &SimConfig,
) -> Result<Inference> {
    let windows = rf_select(input)?;
    let (conv_out, conv_cycles) = conv_stage(rom, formats, &windows)?;
    let pooled = pool_stage(&conv_out)?;
    let shifted: Vec<Fixed16> = pooled.iter().map(|&x| shift_stage(x, formats.fc_in)).collect();
    let (logits, fc_cycles) = fc_stage(rom, formats, &shifted)?;
    let class = classify(&logits);
    Ok(Inference {
        class,
        logits,
        report: CycleReport {
            rf_select: config.rf_select_cycles,
            conv: conv_cycles,
            pool: config.pool_cycles,
            shift: config.shift_cycles,
            fc: fc_cycles,
            classify: config.classify_cycles,
            clock_hz: config.clock_hz,
        },
    })
}

/// Quantizes a spectrum at the input format and runs the datapath.
pub fn run_inference(
    rom: &RomImage,
    formats: &StageFormats,
    input: &Spectrum,
    config: &SimConfig,
) -> Result<Inference> {
    run_words(rom, formats, &quantize_input(&input.x, formats.input)?, config)
}

/// ROM contents and formats of one deployed model.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulator {
    pub rom: RomImage,
    pub formats: StageFormats,
    pub config: SimConfig,
}

impl Simulator {
    pub fn new(qm: &QuantizedModel, config: SimConfig) -> Self {
        Self {
            rom: RomImage::from_model(qm),
            formats: qm.formats,
            config,
        }
    }

    pub fn run(&self, input: &Spectrum) -> Result<Inference> {
        run_inference(&self.rom, &self.formats, input, &self.config)
    }
}
