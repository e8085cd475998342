//! Raw-record CSV and the binary spectrum dataset file.
//!
//! CSV: every record starts with a `label,sample_rate` line followed by one
//! sample per line; records are separated by a blank line. An optional
//! literal `label,sample_rate` header line at the top of the file is skipped.
//!
//! Spectrum file (`.bpgs`), little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `BPGS` |
//! | 4 | version (u32, currently 1) |
//! | 4 | sample count `n` (u32) |
//! | 4 | class count (u32) |
//! | `n * 1024 * 4` | spectra, f32 |
//! | `n` | labels, u8 |
//! | `n` | split tags, u8 (0 train, 1 val, 2 test) |

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{RawRecord, SampleSet, Spectrum, Split, SPECTRUM_LEN};
use crate::error::{Error, Result};

const CSV_HEADER: &str = "label,sample_rate";
pub const SPECTRA_MAGIC: &[u8; 4] = b"BPGS";
pub const SPECTRA_VERSION: u32 = 1;

pub fn write_csv(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, rec) in records.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        writeln!(w, "{},{}", rec.label, rec.sample_rate)?;
        for v in &rec.samples {
            writeln!(w, "{v}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads records whose labels must lie in `0..num_classes`.
pub fn load_csv(path: &Path, num_classes: usize) -> Result<Vec<RawRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    let mut current: Option<RawRecord> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        let bad = |detail: String| Error::format("record CSV", format!("line {}: {detail}", lineno + 1));
        if line.is_empty() {
            records.extend(current.take());
            continue;
        }
        if lineno == 0 && line == CSV_HEADER {
            continue;
        }
        match current.as_mut() {
            None => {
                let (label, rate) = line
                    .split_once(',')
                    .ok_or_else(|| bad(format!("expected `label,sample_rate`, got `{line}`")))?;
                let label: usize = label
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("unknown label `{label}`")))?;
                if label >= num_classes {
                    return Err(bad(format!("unknown label {label} (classes 0..{num_classes})")));
                }
                let sample_rate: f64 = rate
                    .trim()
                    .parse()
                    .ok()
                    .filter(|r: &f64| r.is_finite() && *r > 0.0)
                    .ok_or_else(|| bad(format!("bad sample rate `{rate}`")))?;
                current = Some(RawRecord {
                    samples: Vec::new(),
                    label,
                    sample_rate,
                });
            }
            Some(rec) => {
                let v: f64 = line
                    .parse()
                    .map_err(|_| bad(format!("bad sample `{line}`")))?;
                if !v.is_finite() {
                    return Err(bad("non-finite sample".into()));
                }
                rec.samples.push(v);
            }
        }
    }
    records.extend(current.take());
    if records.is_empty() {
        return Err(Error::format("record CSV", "no records"));
    }
    Ok(records)
}

pub fn write_spectra(path: &Path, set: &SampleSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SPECTRA_MAGIC)?;
    w.write_all(&SPECTRA_VERSION.to_le_bytes())?;
    w.write_all(&(set.samples.len() as u32).to_le_bytes())?;
    w.write_all(&(set.num_classes as u32).to_le_bytes())?;
    for s in &set.samples {
        if s.x.len() != SPECTRUM_LEN {
            return Err(Error::Shape(format!("spectrum of length {}", s.x.len())));
        }
        for &v in &s.x {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for s in &set.samples {
        let label = u8::try_from(s.label)
            .map_err(|_| Error::InvalidArgument(format!("label {} exceeds u8", s.label)))?;
        w.write_all(&[label])?;
    }
    for tag in &set.split {
        w.write_all(&[tag.tag()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_spectra(path: &Path) -> Result<SampleSet> {
    let bytes = fs::read(path)?;
    decode_spectra(&bytes)
}

pub fn decode_spectra(bytes: &[u8]) -> Result<SampleSet> {
    let bad = |d: &str| Error::format("spectrum file", d.to_string());
    if bytes.len() < 16 || &bytes[..4] != SPECTRA_MAGIC {
        return Err(bad("missing BPGS magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != SPECTRA_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u32_at(8) as usize;
    let num_classes = u32_at(12) as usize;
    let body = n * SPECTRUM_LEN * 4;
    if bytes.len() != 16 + body + 2 * n {
        return Err(bad("length does not match header"));
    }
    let labels = &bytes[16 + body..16 + body + n];
    let tags = &bytes[16 + body + n..];
    let mut samples = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for i in 0..n {
        let off = 16 + i * SPECTRUM_LEN * 4;
        let x = bytes[off..off + SPECTRUM_LEN * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let label = labels[i] as usize;
        if label >= num_classes {
            return Err(bad("label outside class count"));
        }
        samples.push(Spectrum { x, label });
        split.push(Split::from_tag(tags[i]).ok_or_else(|| bad("bad split tag"))?);
    }
    Ok(SampleSet {
        samples,
        split,
        num_classes,
    })
}
