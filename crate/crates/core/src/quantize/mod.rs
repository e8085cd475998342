//! Post-training 16-bit quantization of the student network and its
//! integer-only reference forward pass.

mod bpgq;
mod rom;

pub use bpgq::{decode_model, encode_model, export_model, import_model, MAGIC, VERSION};
pub use rom::{export_rom, RomImage, BIAS_WORDS, CONV_WORDS, FC_WORDS};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fixedpoint::{
    acc_add, acc_to_fixed, convert, fit_max_abs, fxp_mul, quantize, FixedFormat, Fixed16, WideAcc,
};
use crate::nn::checkpoint::encode_student;
use crate::nn::model::{batch_input, StudentNet, NUM_CLASSES};
use crate::signal::{Spectrum, SPECTRUM_LEN};

pub const CONV_CHANNELS: usize = StudentNet::CONV_CHANNELS;
pub const KERNEL: usize = StudentNet::KERNEL;
pub const STRIDE: usize = StudentNet::STRIDE;
pub const PADDING: usize = StudentNet::PADDING;
pub const CONV_LEN: usize = StudentNet::CONV_LEN;
pub const POOLED_LEN: usize = StudentNet::POOLED_LEN;
pub const FEATURES: usize = StudentNet::FEATURES;

/// Datapath stages that carry their own format, with their file ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input = 0,
    ConvWeight = 1,
    ConvBias = 2,
    ConvOut = 3,
    FcIn = 4,
    FcWeight = 5,
    FcBias = 6,
    FcOut = 7,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Input,
        Stage::ConvWeight,
        Stage::ConvBias,
        Stage::ConvOut,
        Stage::FcIn,
        Stage::FcWeight,
        Stage::FcBias,
        Stage::FcOut,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::ConvWeight => "conv_weight",
            Stage::ConvBias => "conv_bias",
            Stage::ConvOut => "conv_out",
            Stage::FcIn => "fc_in",
            Stage::FcWeight => "fc_weight",
            Stage::FcBias => "fc_bias",
            Stage::FcOut => "fc_out",
        }
    }
}

/// One format per stage. The shift stage converts `conv_out` words (after
/// ReLU and pooling) into `fc_in` words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFormats {
    pub input: FixedFormat,
    pub conv_weight: FixedFormat,
    pub conv_bias: FixedFormat,
    pub conv_out: FixedFormat,
    pub fc_in: FixedFormat,
    pub fc_weight: FixedFormat,
    pub fc_bias: FixedFormat,
    pub fc_out: FixedFormat,
}

impl StageFormats {
    /// Every stage in the same format.
    pub fn uniform(fmt: FixedFormat) -> Self {
        Self {
            input: fmt,
            conv_weight: fmt,
            conv_bias: fmt,
            conv_out: fmt,
            fc_in: fmt,
            fc_weight: fmt,
            fc_bias: fmt,
            fc_out: fmt,
        }
    }

    pub fn get(&self, stage: Stage) -> FixedFormat {
        match stage {
            Stage::Input => self.input,
            Stage::ConvWeight => self.conv_weight,
            Stage::ConvBias => self.conv_bias,
            Stage::ConvOut => self.conv_out,
            Stage::FcIn => self.fc_in,
            Stage::FcWeight => self.fc_weight,
            Stage::FcBias => self.fc_bias,
            Stage::FcOut => self.fc_out,
        }
    }

    pub fn set(&mut self, stage: Stage, fmt: FixedFormat) {
        *match stage {
            Stage::Input => &mut self.input,
            Stage::ConvWeight => &mut self.conv_weight,
            Stage::ConvBias => &mut self.conv_bias,
            Stage::ConvOut => &mut self.conv_out,
            Stage::FcIn => &mut self.fc_in,
            Stage::FcWeight => &mut self.fc_weight,
            Stage::FcBias => &mut self.fc_bias,
            Stage::FcOut => &mut self.fc_out,
        } = fmt;
    }
}

impl std::fmt::Display for StageFormats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in Stage::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}={}", s.name(), self.get(*s))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CalibrationOptions {
    /// Extra integer bits on top of the observed range, for headroom.
    pub safety_margin_bits: u8,
    /// Use one format for the FC input and output activations, as in a
    /// datapath with a single FC-side word layout.
    pub shared_fc_format: bool,
}

/// Largest magnitude per activation stage over a calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActivationRanges {
    pub input: f64,
    pub conv_out: f64,
    pub pooled: f64,
    pub logits: f64,
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn activation_ranges(model: &StudentNet, calibration: &[&Spectrum]) -> Result<ActivationRanges> {
    if calibration.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut r = ActivationRanges::default();
    for chunk in calibration.chunks(256) {
        let x = batch_input(chunk)?;
        let (conv, pooled, logits) = model.trace(&x)?;
        for t in [&x, &conv, &pooled, &logits] {
            t.check_finite("calibration forward")?;
        }
        r.input = r.input.max(max_abs(x.data()));
        r.conv_out = r.conv_out.max(max_abs(conv.data()));
        r.pooled = r.pooled.max(max_abs(pooled.data()));
        r.logits = r.logits.max(max_abs(logits.data()));
    }
    Ok(r)
}

/// Per-stage formats from the parameter tensors and the activation ranges
/// seen on `calibration`.
pub fn calibrate(
    model: &StudentNet,
    calibration: &[&Spectrum],
    opts: CalibrationOptions,
) -> Result<StageFormats> {
    let r = activation_ranges(model, calibration)?;
    let fit = |m: f64| -> Result<FixedFormat> {
        let base = fit_max_abs(m)?;
        FixedFormat::with_int_bits((base.int_bits() + opts.safety_margin_bits).min(15))
    };
    let fc_in_range = if opts.shared_fc_format {
        r.pooled.max(r.logits)
    } else {
        r.pooled
    };
    let fc_out_range = if opts.shared_fc_format {
        fc_in_range
    } else {
        r.logits
    };
    Ok(StageFormats {
        input: fit(r.input)?,
        conv_weight: fit(max_abs(model.conv.weight.data()))?,
        conv_bias: fit(max_abs(model.conv.bias.data()))?,
        conv_out: fit(r.conv_out)?,
        fc_in: fit(fc_in_range)?,
        fc_weight: fit(max_abs(model.fc.weight.data()))?,
        fc_bias: fit(max_abs(model.fc.bias.data()))?,
        fc_out: fit(fc_out_range)?,
    })
}

/// SHA-256 of the source checkpoint and of the calibration inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub checkpoint: [u8; 32],
    pub calibration: [u8; 32],
}

pub fn checkpoint_hash(model: &StudentNet) -> [u8; 32] {
    Sha256::digest(encode_student(model)).into()
}

pub fn calibration_hash(calibration: &[&Spectrum]) -> [u8; 32] {
    let mut h = Sha256::new();
    for s in calibration {
        h.update((s.label as u32).to_le_bytes());
        for v in &s.x {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// The deployable student: 2830 sixteen-bit words and their formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedModel {
    pub formats: StageFormats,
    /// `[kernel][tap]`, 4 x 64.
    pub conv_w: Vec<Fixed16>,
    pub conv_b: Vec<Fixed16>,
    /// `[input][class]`, 256 x 10.
    pub fc_w: Vec<Fixed16>,
    pub fc_b: Vec<Fixed16>,
    pub provenance: Provenance,
}

pub const PARAM_WORDS: usize = CONV_CHANNELS * KERNEL + CONV_CHANNELS + FEATURES * NUM_CLASSES + NUM_CLASSES;

impl QuantizedModel {
    pub fn from_parts(
        formats: StageFormats,
        conv_w: Vec<Fixed16>,
        conv_b: Vec<Fixed16>,
        fc_w: Vec<Fixed16>,
        fc_b: Vec<Fixed16>,
        provenance: Provenance,
    ) -> Result<Self> {
        let lens = [conv_w.len(), conv_b.len(), fc_w.len(), fc_b.len()];
        if lens != [CONV_CHANNELS * KERNEL, CONV_CHANNELS, FEATURES * NUM_CLASSES, NUM_CLASSES] {
            return Err(Error::Shape(format!("quantized parameter counts {lens:?}")));
        }
        let checks = [
            (&conv_w, formats.conv_weight),
            (&conv_b, formats.conv_bias),
            (&fc_w, formats.fc_weight),
            (&fc_b, formats.fc_bias),
        ];
        if checks.iter().any(|(v, f)| v.iter().any(|w| w.format() != *f)) {
            return Err(Error::InvalidArgument("parameter word format differs from its stage".into()));
        }
        Ok(Self {
            formats,
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            provenance,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv_w.len() + self.conv_b.len() + self.fc_w.len() + self.fc_b.len()
    }

    /// Bytes of parameter storage at 16 bits per word.
    pub fn param_bytes(&self) -> usize {
        2 * self.num_params()
    }
}

fn quantize_all(xs: &[f64], fmt: FixedFormat) -> Vec<Fixed16> {
    xs.iter().map(|&v| quantize(v, fmt)).collect()
}

pub fn quantize_model(model: &StudentNet, formats: StageFormats, provenance: Provenance) -> Result<QuantizedModel> {
    let shape_ok = model.conv.in_channels == 1
        && model.conv.out_channels == CONV_CHANNELS
        && model.conv.kernel == KERNEL
        && model.fc.in_features == FEATURES
        && model.fc.out_features == NUM_CLASSES;
    if !shape_ok {
        return Err(Error::Shape("model is not the deployable student".into()));
    }
    for p in [&model.conv.weight, &model.conv.bias, &model.fc.weight, &model.fc.bias] {
        p.check_finite("quantize_model")?;
    }
    QuantizedModel::from_parts(
        formats,
        quantize_all(model.conv.weight.data(), formats.conv_weight),
        quantize_all(model.conv.bias.data(), formats.conv_bias),
        quantize_all(model.fc.weight.data(), formats.fc_weight),
        quantize_all(model.fc.bias.data(), formats.fc_bias),
        provenance,
    )
}

/// Calibrates, quantizes and records provenance in one step.
pub fn quantize_student(
    model: &StudentNet,
    calibration: &[&Spectrum],
    opts: CalibrationOptions,
) -> Result<QuantizedModel> {
    let formats = calibrate(model, calibration, opts)?;
    let prov = Provenance {
        checkpoint: checkpoint_hash(model),
        calibration: calibration_hash(calibration),
    };
    quantize_model(model, formats, prov)
}

pub fn quantize_input(x: &[f64], fmt: FixedFormat) -> Result<Vec<Fixed16>> {
    if x.len() != SPECTRUM_LEN {
        return Err(Error::Shape(format!("input of length {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantized input"));
    }
    Ok(quantize_all(x, fmt))
}

/// Every intermediate word of one quantized inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTrace {
    pub input: Vec<Fixed16>,
    /// `[channel][position]`, 4 x 128, in `conv_out` format.
    pub conv_out: Vec<Fixed16>,
    /// `[channel][position]`, 4 x 64, in `fc_in` format.
    pub fc_in: Vec<Fixed16>,
    pub logits: Vec<Fixed16>,
    pub class: usize,
}

/// Sum of products plus bias, written back into `out`.
fn dot_bias(
    pairs: impl Iterator<Item = (Fixed16, Fixed16)>,
    frac_bits: u8,
    bias: Fixed16,
    out: FixedFormat,
) -> Result<Fixed16> {
    let mut acc = WideAcc::zero(frac_bits);
    for (a, b) in pairs {
        acc = acc_add(acc, fxp_mul(a, b))?;
    }
    acc = acc_add(acc, WideAcc::from_fixed(bias, frac_bits))?;
    Ok(acc_to_fixed(acc, out))
}

/// Integer-only inference on an already quantized input.
pub fn quantized_trace_words(qm: &QuantizedModel, input: Vec<Fixed16>) -> Result<QuantTrace> {
    let f = &qm.formats;
    if input.len() != SPECTRUM_LEN || input.iter().any(|w| w.format() != f.input) {
        return Err(Error::Shape("input words do not match the input stage".into()));
    }
    let zero = Fixed16::zero(f.input);
    let conv_frac = f.input.frac_bits() + f.conv_weight.frac_bits();
    let mut conv_out = Vec::with_capacity(CONV_CHANNELS * CONV_LEN);
    for k in 0..CONV_CHANNELS {
        let w = &qm.conv_w[k * KERNEL..(k + 1) * KERNEL];
        for pos in 0..CONV_LEN {
            let taps = (0..KERNEL).map(|j| {
                let idx = (pos * STRIDE + j) as isize - PADDING as isize;
                let x = usize::try_from(idx).ok().and_then(|i| input.get(i)).copied().unwrap_or(zero);
                (x, w[j])
            });
            conv_out.push(dot_bias(taps, conv_frac, qm.conv_b[k], f.conv_out)?);
        }
    }

    let mut fc_in = Vec::with_capacity(FEATURES);
    for k in 0..CONV_CHANNELS {
        for p in 0..POOLED_LEN {
            let a = conv_out[k * CONV_LEN + 2 * p].raw();
            let b = conv_out[k * CONV_LEN + 2 * p + 1].raw();
            let m = Fixed16::from_raw(a.max(b).max(0), f.conv_out);
            fc_in.push(convert(m, f.fc_in));
        }
    }

    let fc_frac = f.fc_in.frac_bits() + f.fc_weight.frac_bits();
    let mut logits = Vec::with_capacity(NUM_CLASSES);
    for j in 0..NUM_CLASSES {
        let terms = fc_in
            .iter()
            .enumerate()
            .map(|(i, &a)| (a, qm.fc_w[i * NUM_CLASSES + j]));
        logits.push(dot_bias(terms, fc_frac, qm.fc_b[j], f.fc_out)?);
    }

    let mut class = 0;
    for (j, l) in logits.iter().enumerate() {
        if l.raw() > logits[class].raw() {
            class = j;
        }
    }
    Ok(QuantTrace {
        input,
        conv_out,
        fc_in,
        logits,
        class,
    })
}

pub fn quantized_trace(qm: &QuantizedModel, input: &[f64]) -> Result<QuantTrace> {
    quantized_trace_words(qm, quantize_input(input, qm.formats.input)?)
}

/// Fixed-point logits and predicted class (ties go to the lowest index).
pub fn quantized_forward(qm: &QuantizedModel, input: &Spectrum) -> Result<(Vec<Fixed16>, usize)> {
    let t = quantized_trace(qm, &input.x)?;
    Ok((t.logits, t.class))
}

pub fn quantized_predict(qm: &QuantizedModel, samples: &[&Spectrum]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| quantized_forward(qm, s).map(|(_, c)| c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::dequantize;
    use crate::nn::model::Network;
    use crate::nn::tensor::argmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmt(x: u8) -> FixedFormat {
        FixedFormat::with_int_bits(x).unwrap()
    }

    fn random_spectra(n: usize, seed: u64) -> Vec<Spectrum> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Spectrum {
                x: (0..SPECTRUM_LEN).map(|_| rng.random_range(-1.0..3.0)).collect(),
                label: rng.random_range(0..NUM_CLASSES),
            })
            .collect()
    }

    fn model(seed: u64) -> StudentNet {
        StudentNet::new(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn weight_range_sets_weight_format() {
        let mut m = model(1);
        m.conv.weight.data_mut().iter_mut().for_each(|w| *w = w.clamp(-0.9, 0.9));
        m.conv.weight.data_mut()[0] = 0.9;
        let data = random_spectra(4, 1);
        let refs: Vec<&Spectrum> = data.iter().collect();
        let f = calibrate(&m, &refs, CalibrationOptions::default()).unwrap();
        assert_eq!(f.conv_weight, fmt(0));
        let f2 = calibrate(
            &m,
            &refs,
            CalibrationOptions {
                safety_margin_bits: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(f2.conv_weight, fmt(1));
    }

    #[test]
    fn activation_range_fits_observed_maximum() {
        let m = model(2);
        let data = random_spectra(16, 2);
        let refs: Vec<&Spectrum> = data.iter().collect();
        let r = activation_ranges(&m, &refs).unwrap();
        let f = calibrate(&m, &refs, CalibrationOptions::default()).unwrap();
        assert_eq!(f.conv_out, fit_max_abs(r.conv_out).unwrap());
        assert!(r.pooled <= r.conv_out);
        let shared = calibrate(
            &m,
            &refs,
            CalibrationOptions {
                shared_fc_format: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(shared.fc_in, shared.fc_out);
        assert_eq!(shared.fc_in, fit_max_abs(r.pooled.max(r.logits)).unwrap());
        assert!(calibrate(&m, &[], CalibrationOptions::default()).is_err());
    }

    #[test]
    fn calibration_is_deterministic() {
        let data = random_spectra(32, 3);
        let refs: Vec<&Spectrum> = data.iter().collect();
        let a = quantize_student(&model(3), &refs, CalibrationOptions::default()).unwrap();
        let b = quantize_student(&model(3), &refs, CalibrationOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.provenance.checkpoint, [0; 32]);
    }

    #[test]
    fn zero_weights_give_zero_words() {
        let mut m = model(4);
        for p in m.params_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let qm = quantize_model(&m, StageFormats::uniform(fmt(3)), Provenance::default()).unwrap();
        assert!(qm.conv_w.iter().chain(&qm.fc_w).all(|w| w.raw() == 0));
        assert_eq!(qm.num_params(), 2830);
        assert_eq!(qm.param_bytes() * 2, 2830 * 4);
    }

    #[test]
    fn weights_round_trip_within_half_ulp() {
        let m = model(5);
        let data = random_spectra(8, 5);
        let refs: Vec<&Spectrum> = data.iter().collect();
        let qm = quantize_student(&m, &refs, CalibrationOptions::default()).unwrap();
        let pairs = [
            (m.conv.weight.data(), &qm.conv_w),
            (m.conv.bias.data(), &qm.conv_b),
            (m.fc.weight.data(), &qm.fc_w),
            (m.fc.bias.data(), &qm.fc_b),
        ];
        for (float, words) in pairs {
            for (v, w) in float.iter().zip(words.iter()) {
                assert!((v - dequantize(*w)).abs() <= 0.5 * w.format().ulp());
            }
        }
    }

    #[test]
    fn zero_input_yields_bias_path() {
        let m = model(6);
        let formats = StageFormats {
            input: fmt(3),
            conv_weight: fmt(0),
            conv_bias: fmt(0),
            conv_out: fmt(2),
            fc_in: fmt(2),
            fc_weight: fmt(0),
            fc_bias: fmt(0),
            fc_out: fmt(4),
        };
        let qm = quantize_model(&m, formats, Provenance::default()).unwrap();
        let t = quantized_trace(&qm, &[0.0; SPECTRUM_LEN]).unwrap();
        // every conv output is its channel's bias
        for k in 0..CONV_CHANNELS {
            let b = convert(qm.conv_b[k], formats.conv_out);
            assert!(t.conv_out[k * CONV_LEN..(k + 1) * CONV_LEN].iter().all(|w| *w == b));
        }
        // the logits are the FC bias plus the weights on the relu'd biases
        for j in 0..NUM_CLASSES {
            let mut want = dequantize(qm.fc_b[j]);
            for i in 0..FEATURES {
                want += dequantize(t.fc_in[i]) * dequantize(qm.fc_w[i * NUM_CLASSES + j]);
            }
            assert_eq!(t.logits[j], quantize(want, formats.fc_out));
        }
    }

    #[test]
    fn tracks_float_forward_on_random_inputs() {
        let m = model(7);
        let data = random_spectra(200, 7);
        let refs: Vec<&Spectrum> = data.iter().collect();
        let qm = quantize_student(&m, &refs, CalibrationOptions::default()).unwrap();
        let logits = m.forward(&batch_input(&refs).unwrap()).unwrap();
        let mut agree = 0;
        for (s, z) in data.iter().zip(logits.rows()) {
            let (q, class) = quantized_forward(&qm, s).unwrap();
            for (a, b) in q.iter().zip(z) {
                assert!((dequantize(*a) - b).abs() < 0.05, "{} vs {b}", dequantize(*a));
            }
            agree += usize::from(class == argmax(z));
        }
        assert!(agree >= 196, "{agree}/200");
    }

    #[test]
    fn rejects_wrong_input_length() {
        let qm = quantize_model(&model(8), StageFormats::uniform(fmt(3)), Provenance::default()).unwrap();
        assert!(quantized_trace(&qm, &[0.0; 10]).is_err());
    }

    #[test]
    fn stage_ids_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_id(s.id()), Some(s));
        }
        assert_eq!(Stage::from_id(8), None);
    }
}
