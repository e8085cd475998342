//! Float checkpoint (`.bpgf`). See `docs/formats.md` for the byte layout.
//!
//! Parameters are stored as little-endian f32 in layer order, so loading a
//! checkpoint rounds every trained f64 parameter to single precision.

use std::fs;
use std::path::Path;

use super::layers::{BatchNorm1d, Conv1d, Linear, MaxPool1d};
use super::model::{StudentNet, TeacherBlock, TeacherNet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BPGF";
pub const VERSION: u16 = 1;

const KIND_STUDENT: u8 = 0;
const KIND_TEACHER: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerSpec {
    Conv {
        in_ch: u32,
        out_ch: u32,
        kernel: u32,
        stride: u32,
        padding: u32,
    },
    BatchNorm {
        channels: u32,
    },
    Relu,
    MaxPool {
        kernel: u32,
        stride: u32,
    },
    Linear {
        in_f: u32,
        out_f: u32,
    },
}

impl LayerSpec {
    fn tag(self) -> u8 {
        match self {
            LayerSpec::Conv { .. } => 1,
            LayerSpec::BatchNorm { .. } => 2,
            LayerSpec::Relu => 3,
            LayerSpec::MaxPool { .. } => 4,
            LayerSpec::Linear { .. } => 5,
        }
    }

    fn fields(self) -> Vec<u32> {
        match self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => vec![in_ch, out_ch, kernel, stride, padding],
            LayerSpec::BatchNorm { channels } => vec![channels],
            LayerSpec::Relu => vec![],
            LayerSpec::MaxPool { kernel, stride } => vec![kernel, stride],
            LayerSpec::Linear { in_f, out_f } => vec![in_f, out_f],
        }
    }

    fn field_count(tag: u8) -> Option<usize> {
        Some(match tag {
            1 => 5,
            2 => 1,
            3 => 0,
            4 => 2,
            5 => 2,
            _ => return None,
        })
    }

    fn from_fields(tag: u8, f: &[u32]) -> Self {
        match tag {
            1 => LayerSpec::Conv {
                in_ch: f[0],
                out_ch: f[1],
                kernel: f[2],
                stride: f[3],
                padding: f[4],
            },
            2 => LayerSpec::BatchNorm { channels: f[0] },
            3 => LayerSpec::Relu,
            4 => LayerSpec::MaxPool {
                kernel: f[0],
                stride: f[1],
            },
            _ => LayerSpec::Linear {
                in_f: f[0],
                out_f: f[1],
            },
        }
    }
}

fn conv_spec(c: &Conv1d) -> LayerSpec {
    LayerSpec::Conv {
        in_ch: c.in_channels as u32,
        out_ch: c.out_channels as u32,
        kernel: c.kernel as u32,
        stride: c.stride as u32,
        padding: c.padding as u32,
    }
}

fn pool_spec(p: MaxPool1d) -> LayerSpec {
    LayerSpec::MaxPool {
        kernel: p.kernel as u32,
        stride: p.stride as u32,
    }
}

fn linear_spec(l: &Linear) -> LayerSpec {
    LayerSpec::Linear {
        in_f: l.in_features as u32,
        out_f: l.out_features as u32,
    }
}

fn encode(kind: u8, layers: &[LayerSpec], params: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(layers.len() as u16).to_le_bytes());
    for l in layers {
        out.push(l.tag());
        for f in l.fields() {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    out.extend_from_slice(&(total as u32).to_le_bytes());
    for p in params {
        for &v in p.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Decoded {
    kind: u8,
    layers: Vec<LayerSpec>,
    values: Vec<f64>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let bad = |d: &str| Error::format("float checkpoint", d.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("missing BPGF magic"));
    }
    if u16::from_le_bytes(take(2)?.try_into().unwrap()) != VERSION {
        return Err(bad("unsupported version"));
    }
    let kind = take(1)?[0];
    let count = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = take(1)?[0];
        let n = LayerSpec::field_count(tag).ok_or_else(|| bad("unknown layer kind"))?;
        let f: Vec<u32> = take(4 * n)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        layers.push(LayerSpec::from_fields(tag, &f));
    }
    let total = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let values = take(4 * total)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Decoded { kind, layers, values })
}

struct Reader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl Reader<'_> {
    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v = self
            .values
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("float checkpoint", "parameter blob too short"))?;
        self.pos += n;
        Tensor::new(shape, v.to_vec())
    }

    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.tensor(vec![n])?.into_data())
    }

    fn conv(&mut self, s: LayerSpec) -> Result<Conv1d> {
        let LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } = s
        else {
            return Err(Error::format("float checkpoint", "expected a conv layer"));
        };
        let (i, o, k) = (in_ch as usize, out_ch as usize, kernel as usize);
        Ok(Conv1d {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: stride as usize,
            padding: padding as usize,
            weight: self.tensor(vec![o, i, k])?,
            bias: self.tensor(vec![o])?,
        })
    }

    fn linear(&mut self, s: LayerSpec) -> Result<Linear> {
        let LayerSpec::Linear { in_f, out_f } = s else {
            return Err(Error::format("float checkpoint", "expected a linear layer"));
        };
        let (i, o) = (in_f as usize, out_f as usize);
        Ok(Linear {
            in_features: i,
            out_features: o,
            weight: self.tensor(vec![i, o])?,
            bias: self.tensor(vec![o])?,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(Error::format("float checkpoint", "unused parameters"));
        }
        Ok(())
    }
}

pub fn encode_student(net: &StudentNet) -> Vec<u8> {
    let layers = [
        conv_spec(&net.conv),
        LayerSpec::Relu,
        pool_spec(net.pool),
        linear_spec(&net.fc),
    ];
    let params = [
        net.conv.weight.data(),
        net.conv.bias.data(),
        net.fc.weight.data(),
        net.fc.bias.data(),
    ];
    encode(KIND_STUDENT, &layers, &params)
}

pub fn decode_student(bytes: &[u8]) -> Result<StudentNet> {
    let d = decode(bytes)?;
    let shape_err = || Error::format("float checkpoint", "not a student layer plan");
    if d.kind != KIND_STUDENT || d.layers.len() != 4 || d.layers[1] != LayerSpec::Relu {
        return Err(shape_err());
    }
    let LayerSpec::MaxPool { kernel, stride } = d.layers[2] else {
        return Err(shape_err());
    };
    let mut r = Reader {
        values: &d.values,
        pos: 0,
    };
    let net = StudentNet {
        conv: r.conv(d.layers[0])?,
        pool: MaxPool1d::new(kernel as usize, stride as usize),
        fc: r.linear(d.layers[3])?,
    };
    r.finish()?;
    if net.conv.out_channels * net.pool.out_len(net.conv.out_len(crate::signal::SPECTRUM_LEN)?)?
        != net.fc.in_features
    {
        return Err(shape_err());
    }
    Ok(net)
}

pub fn encode_teacher(net: &TeacherNet) -> Vec<u8> {
    let mut layers = Vec::new();
    let mut params: Vec<&[f64]> = Vec::new();
    for b in &net.blocks {
        layers.push(conv_spec(&b.conv));
        layers.push(LayerSpec::BatchNorm {
            channels: b.bn.channels as u32,
        });
        layers.push(LayerSpec::Relu);
        if let Some(p) = b.pool {
            layers.push(pool_spec(p));
        }
        params.extend([
            b.conv.weight.data(),
            b.conv.bias.data(),
            b.bn.gamma.data(),
            b.bn.beta.data(),
            &b.bn.running_mean,
            &b.bn.running_var,
        ]);
    }
    layers.push(linear_spec(&net.fc));
    params.extend([net.fc.weight.data(), net.fc.bias.data()]);
    encode(KIND_TEACHER, &layers, &params)
}

pub fn decode_teacher(bytes: &[u8]) -> Result<TeacherNet> {
    let d = decode(bytes)?;
    let bad = || Error::format("float checkpoint", "not a teacher layer plan");
    if d.kind != KIND_TEACHER {
        return Err(bad());
    }
    let mut r = Reader {
        values: &d.values,
        pos: 0,
    };
    let mut blocks = Vec::new();
    let mut i = 0;
    let specs = &d.layers;
    while i < specs.len() && matches!(specs[i], LayerSpec::Conv { .. }) {
        let conv = r.conv(specs[i])?;
        let Some(&LayerSpec::BatchNorm { channels }) = specs.get(i + 1) else {
            return Err(bad());
        };
        if specs.get(i + 2) != Some(&LayerSpec::Relu) || channels as usize != conv.out_channels {
            return Err(bad());
        }
        let mut bn = BatchNorm1d::new(channels as usize);
        bn.gamma = r.tensor(vec![bn.channels])?;
        bn.beta = r.tensor(vec![bn.channels])?;
        bn.running_mean = r.vec(bn.channels)?;
        bn.running_var = r.vec(bn.channels)?;
        i += 3;
        let pool = match specs.get(i) {
            Some(&LayerSpec::MaxPool { kernel, stride }) => {
                i += 1;
                Some(MaxPool1d::new(kernel as usize, stride as usize))
            }
            _ => None,
        };
        blocks.push(TeacherBlock { conv, bn, pool });
    }
    if blocks.is_empty() || i + 1 != specs.len() {
        return Err(bad());
    }
    let fc = r.linear(specs[i])?;
    r.finish()?;
    Ok(TeacherNet { blocks, fc })
}

pub fn save_student(path: &Path, net: &StudentNet) -> Result<()> {
    Ok(fs::write(path, encode_student(net))?)
}

pub fn load_student(path: &Path) -> Result<StudentNet> {
    decode_student(&fs::read(path)?)
}

pub fn save_teacher(path: &Path, net: &TeacherNet) -> Result<()> {
    Ok(fs::write(path, encode_teacher(net))?)
}

pub fn load_teacher(path: &Path) -> Result<TeacherNet> {
    decode_teacher(&fs::read(path)?)
}
