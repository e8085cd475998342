//! Quantized model file (`.bpgq`). See `docs/formats.md` for the layout.

use std::fs;
use std::path::Path;

use super::rom::RomImage;
use super::{Provenance, QuantizedModel, Stage, StageFormats};
use crate::error::{Error, Result};
use crate::fixedpoint::FixedFormat;

pub const MAGIC: &[u8; 4] = b"BPGQ";
pub const VERSION: u16 = 1;

pub fn encode_model(qm: &QuantizedModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 2 + 1 + 24 + 64 + 2 * qm.num_params() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(Stage::ALL.len() as u8);
    for s in Stage::ALL {
        let f = qm.formats.get(s);
        out.extend_from_slice(&[s.id(), f.int_bits(), f.frac_bits()]);
    }
    out.extend_from_slice(&qm.provenance.checkpoint);
    out.extend_from_slice(&qm.provenance.calibration);
    for w in RomImage::from_model(qm).words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<QuantizedModel> {
    let bad = |d: String| Error::format("quantized model", d);
    if bytes.len() < 4 + 2 + 1 + 4 {
        return Err(bad("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if &body[..4] != MAGIC {
        return Err(bad("missing BPGQ magic".into()));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("CRC32 mismatch".into()));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = body[6] as usize;
    let mut pos = 7;
    let table = body
        .get(pos..pos + 3 * count)
        .ok_or_else(|| bad("truncated stage table".into()))?;
    pos += 3 * count;
    let mut formats: Option<StageFormats> = None;
    let mut seen = [false; 8];
    for e in table.chunks_exact(3) {
        let stage = Stage::from_id(e[0]).ok_or_else(|| bad(format!("unknown stage id {}", e[0])))?;
        let fmt = FixedFormat::new(e[1], e[2])?;
        let f = formats.get_or_insert(StageFormats::uniform(fmt));
        f.set(stage, fmt);
        seen[stage.id() as usize] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(bad("stage table is incomplete".into()));
    }
    let formats = formats.unwrap();

    let prov = body
        .get(pos..pos + 64)
        .ok_or_else(|| bad("truncated provenance".into()))?;
    pos += 64;
    let provenance = Provenance {
        checkpoint: prov[..32].try_into().unwrap(),
        calibration: prov[32..].try_into().unwrap(),
    };

    let words: Vec<u16> = body[pos..]
        .chunks(2)
        .map(|c| {
            if c.len() == 2 {
                Ok(u16::from_le_bytes([c[0], c[1]]))
            } else {
                Err(bad("odd parameter byte count".into()))
            }
        })
        .collect::<Result<_>>()?;
    let (nc, nf) = (super::CONV_WORDS, super::FC_WORDS);
    if words.len() != nc + nf + super::BIAS_WORDS {
        return Err(bad(format!("{} parameter words", words.len())));
    }
    let rom = RomImage {
        conv: words[..nc].to_vec(),
        fc: words[nc..nc + nf].to_vec(),
        bias: words[nc + nf..].to_vec(),
    };
    QuantizedModel::from_parts(
        formats,
        rom.conv_weights(&formats),
        rom.conv_biases(&formats),
        rom.fc_weights(&formats),
        rom.fc_biases(&formats),
        provenance,
    )
}

pub fn export_model(qm: &QuantizedModel, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_model(qm))?)
}

pub fn import_model(path: &Path) -> Result<QuantizedModel> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::StudentNet;
    use crate::quantize::quantize_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> QuantizedModel {
        let m = StudentNet::new(&mut ChaCha8Rng::seed_from_u64(1));
        let mut f = StageFormats::uniform(FixedFormat::with_int_bits(0).unwrap());
        f.input = FixedFormat::with_int_bits(4).unwrap();
        f.conv_out = FixedFormat::with_int_bits(2).unwrap();
        f.fc_in = FixedFormat::with_int_bits(7).unwrap();
        f.fc_out = FixedFormat::with_int_bits(5).unwrap();
        let prov = Provenance {
            checkpoint: [7; 32],
            calibration: [9; 32],
        };
        quantize_model(&m, f, prov).unwrap()
    }

    #[test]
    fn round_trip() {
        let qm = sample();
        let bytes = encode_model(&qm);
        assert_eq!(bytes.len(), 4 + 2 + 1 + 24 + 64 + 2 * 2830 + 4);
        assert_eq!(decode_model(&bytes).unwrap(), qm);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_model(&sample());
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(decode_model(&m).is_err());
        let mut flip = bytes.clone();
        flip[200] ^= 1;
        assert!(decode_model(&flip).is_err());
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
    }
}
