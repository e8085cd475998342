//! ROM images in memory-initialization hex format: one uppercase 4-digit
//! word per line.

use std::fs;
use std::path::Path;

use super::{QuantizedModel, StageFormats, CONV_CHANNELS, FEATURES, KERNEL};
use crate::error::{Error, Result};
use crate::fixedpoint::Fixed16;
use crate::nn::model::NUM_CLASSES;

pub const CONV_WORDS: usize = CONV_CHANNELS * KERNEL;
pub const FC_WORDS: usize = FEATURES * NUM_CLASSES;
pub const BIAS_WORDS: usize = CONV_CHANNELS + NUM_CLASSES;

pub const CONV_FILE: &str = "conv.hex";
pub const FC_FILE: &str = "fc.hex";
pub const BIAS_FILE: &str = "bias.hex";

/// Raw parameter words in the order the hardware reads them: conv weights
/// kernel-major, FC weights input-major in groups of 10, then the 4 conv
/// biases followed by the 10 FC biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RomImage {
    pub conv: Vec<u16>,
    pub fc: Vec<u16>,
    pub bias: Vec<u16>,
}

fn words(v: &[Fixed16]) -> Vec<u16> {
    v.iter().map(|w| w.word()).collect()
}

fn fixed(words: &[u16], fmt: crate::fixedpoint::FixedFormat) -> Vec<Fixed16> {
    words.iter().map(|&w| Fixed16::from_raw(w as i16, fmt)).collect()
}

impl RomImage {
    pub fn from_model(qm: &QuantizedModel) -> Self {
        let mut bias = words(&qm.conv_b);
        bias.extend(words(&qm.fc_b));
        Self {
            conv: words(&qm.conv_w),
            fc: words(&qm.fc_w),
            bias,
        }
    }

    pub fn check(&self) -> Result<()> {
        let got = [self.conv.len(), self.fc.len(), self.bias.len()];
        if got != [CONV_WORDS, FC_WORDS, BIAS_WORDS] {
            return Err(Error::Shape(format!(
                "ROM word counts {got:?}, expected [{CONV_WORDS}, {FC_WORDS}, {BIAS_WORDS}]"
            )));
        }
        Ok(())
    }

    /// All words in file order.
    pub fn words(&self) -> impl Iterator<Item = u16> + '_ {
        self.conv.iter().chain(&self.fc).chain(&self.bias).copied()
    }

    pub fn conv_weights(&self, formats: &StageFormats) -> Vec<Fixed16> {
        fixed(&self.conv, formats.conv_weight)
    }

    pub fn fc_weights(&self, formats: &StageFormats) -> Vec<Fixed16> {
        fixed(&self.fc, formats.fc_weight)
    }

    pub fn conv_biases(&self, formats: &StageFormats) -> Vec<Fixed16> {
        fixed(&self.bias[..CONV_CHANNELS], formats.conv_bias)
    }

    pub fn fc_biases(&self, formats: &StageFormats) -> Vec<Fixed16> {
        fixed(&self.bias[CONV_CHANNELS..], formats.fc_bias)
    }

    pub fn write_hex(&self, dir: &Path) -> Result<()> {
        self.check()?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONV_FILE), to_hex(&self.conv))?;
        fs::write(dir.join(FC_FILE), to_hex(&self.fc))?;
        fs::write(dir.join(BIAS_FILE), to_hex(&self.bias))?;
        Ok(())
    }

    pub fn read_hex(dir: &Path) -> Result<Self> {
        let rom = Self {
            conv: from_hex(&fs::read_to_string(dir.join(CONV_FILE))?)?,
            fc: from_hex(&fs::read_to_string(dir.join(FC_FILE))?)?,
            bias: from_hex(&fs::read_to_string(dir.join(BIAS_FILE))?)?,
        };
        rom.check()?;
        Ok(rom)
    }
}

pub fn to_hex(words: &[u16]) -> String {
    let mut s = String::with_capacity(words.len() * 5);
    for w in words {
        s.push_str(&format!("{w:04X}\n"));
    }
    s
}

pub fn from_hex(text: &str) -> Result<Vec<u16>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            if l.len() != 4 {
                return Err(Error::format("ROM hex", format!("line {}: {l:?}", i + 1)));
            }
            u16::from_str_radix(l, 16)
                .map_err(|_| Error::format("ROM hex", format!("line {}: {l:?}", i + 1)))
        })
        .collect()
}

/// Writes `conv.hex`, `fc.hex` and `bias.hex` into `dir`.
pub fn export_rom(qm: &QuantizedModel, dir: &Path) -> Result<RomImage> {
    let rom = RomImage::from_model(qm);
    rom.write_hex(dir)?;
    Ok(rom)
}
