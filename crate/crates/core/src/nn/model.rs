//! The one-layer student network and the WDCNN-style teacher.

use rand::Rng;

use super::layers::{relu_bwd, relu_fwd, BatchNorm1d, BnCache, Conv1d, Linear, MaxPool1d};
use super::tensor::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::signal::{Spectrum, SPECTRUM_LEN};

pub const NUM_CLASSES: usize = 10;

/// A trainable classifier with hand-written backpropagation.
pub trait Network {
    type Cache;

    /// Inference-mode logits `[batch, classes]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;

    /// Training-mode forward; may update internal statistics.
    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Self::Cache)>;

    /// Parameter gradients in [`Network::params`] order.
    fn backward(&self, cache: &Self::Cache, grad_logits: &Tensor) -> Result<Vec<Vec<f64>>>;

    fn params(&self) -> Vec<&[f64]>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Stacks spectra into a `[batch, 1, 1024]` input.
pub fn batch_input(samples: &[&Spectrum]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * SPECTRUM_LEN);
    for s in samples {
        if s.x.len() != SPECTRUM_LEN {
            return Err(Error::Shape(format!("spectrum length {}", s.x.len())));
        }
        data.extend_from_slice(&s.x);
    }
    Tensor::new(vec![samples.len(), 1, SPECTRUM_LEN], data)
}

pub fn predict_batch<N: Network>(net: &N, x: &Tensor) -> Result<Vec<usize>> {
    Ok(net.forward(x)?.rows().map(argmax).collect())
}

/// Class predictions for spectra, evaluated in chunks.
pub fn predict<N: Network>(net: &N, samples: &[&Spectrum]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        out.extend(predict_batch(net, &batch_input(chunk)?)?);
    }
    Ok(out)
}

/// Conv(1->4, k64, s8, p28) -> ReLU -> MaxPool(2, 2) -> Linear(256, 10).
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    pub conv: Conv1d,
    pub pool: MaxPool1d,
    pub fc: Linear,
}

pub struct StudentCache {
    input: Tensor,
    conv_out: Tensor,
    pool_arg: Vec<usize>,
    flat: Tensor,
}

impl StudentNet {
    pub const CONV_CHANNELS: usize = 4;
    pub const KERNEL: usize = 64;
    pub const STRIDE: usize = 8;
    pub const PADDING: usize = 28;
    pub const CONV_LEN: usize = 128;
    pub const POOLED_LEN: usize = 64;
    pub const FEATURES: usize = Self::CONV_CHANNELS * Self::POOLED_LEN;

    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            conv: Conv1d::new(1, Self::CONV_CHANNELS, Self::KERNEL, Self::STRIDE, Self::PADDING, rng),
            pool: MaxPool1d::new(2, 2),
            fc: Linear::new(Self::FEATURES, NUM_CLASSES, rng),
        }
    }

    /// Intermediate activations for one batch: conv output (pre-ReLU),
    /// pooled activations and logits.
    pub fn trace(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let conv_out = self.conv.forward(x)?;
        let (pooled, _) = self.pool.forward(&relu_fwd(&conv_out))?;
        let n = pooled.dim(0);
        let flat = pooled.clone().reshape(vec![n, Self::FEATURES])?;
        let logits = self.fc.forward(&flat)?;
        Ok((conv_out, pooled, logits))
    }
}

impl Network for StudentNet {
    type Cache = StudentCache;

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trace(x)?.2)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, StudentCache)> {
        let conv_out = self.conv.forward(x)?;
        let (pooled, pool_arg) = self.pool.forward(&relu_fwd(&conv_out))?;
        let n = pooled.dim(0);
        let flat = pooled.reshape(vec![n, Self::FEATURES])?;
        let logits = self.fc.forward(&flat)?;
        Ok((
            logits,
            StudentCache {
                input: x.clone(),
                conv_out,
                pool_arg,
                flat,
            },
        ))
    }

    fn backward(&self, c: &StudentCache, grad_logits: &Tensor) -> Result<Vec<Vec<f64>>> {
        let fc = self.fc.backward(&c.flat, grad_logits)?;
        let n = c.flat.dim(0);
        let gpool = fc
            .input
            .reshape(vec![n, Self::CONV_CHANNELS, Self::POOLED_LEN])?;
        let grelu = self.pool.backward(c.conv_out.shape(), &c.pool_arg, &gpool)?;
        let gconv = relu_bwd(&c.conv_out, &grelu)?;
        let conv = self.conv.backward(&c.input, &gconv)?;
        Ok(vec![conv.weight, conv.bias, fc.weight, fc.bias])
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![
            self.conv.weight.data(),
            self.conv.bias.data(),
            self.fc.weight.data(),
            self.fc.bias.data(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.conv.weight.data_mut(),
            self.conv.bias.data_mut(),
            self.fc.weight.data_mut(),
            self.fc.bias.data_mut(),
        ]
    }
}

/// Layer plan of the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub input_len: usize,
    pub first_kernel: usize,
    pub first_stride: usize,
    pub first_padding: usize,
    /// Output channels of the six blocks.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    /// Whether the final block ends with a max-pool.
    pub pool_last: bool,
    pub classes: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            input_len: SPECTRUM_LEN,
            first_kernel: 64,
            first_stride: 16,
            first_padding: 24,
            channels: vec![16, 32, 64, 64, 64, 64],
            kernel: 3,
            padding: 1,
            pool_last: false,
            classes: NUM_CLASSES,
        }
    }
}

/// One conv -> batch-norm -> ReLU -> (max-pool) block.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBlock {
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
    pub pool: Option<MaxPool1d>,
}

/// WDCNN-style teacher: a wide first kernel, small-kernel blocks, one
/// fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherNet {
    pub blocks: Vec<TeacherBlock>,
    pub fc: Linear,
}

struct BlockCache {
    input: Tensor,
    bn: BnCache,
    pre_relu: Tensor,
    pool_arg: Option<(Vec<usize>, Vec<usize>)>,
}

pub struct TeacherCache {
    blocks: Vec<BlockCache>,
    flat: Tensor,
    feature_shape: Vec<usize>,
}

impl TeacherNet {
    pub fn new<R: Rng + ?Sized>(cfg: &TeacherConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::InvalidArgument("teacher needs at least one block".into()));
        }
        let mut blocks = Vec::new();
        let mut len = cfg.input_len;
        let mut in_ch = 1;
        let last = cfg.channels.len() - 1;
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let conv = if i == 0 {
                Conv1d::new(in_ch, ch, cfg.first_kernel, cfg.first_stride, cfg.first_padding, rng)
            } else {
                Conv1d::new(in_ch, ch, cfg.kernel, 1, cfg.padding, rng)
            };
            len = conv.out_len(len)?;
            let pool = (i != last || cfg.pool_last).then(|| MaxPool1d::new(2, 2));
            if let Some(p) = pool {
                len = p.out_len(len)?;
            }
            blocks.push(TeacherBlock {
                conv,
                bn: BatchNorm1d::new(ch),
                pool,
            });
            in_ch = ch;
        }
        let fc = Linear::new(in_ch * len, cfg.classes, rng);
        Ok(Self { blocks, fc })
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = relu_fwd(&b.bn.forward_eval(&b.conv.forward(&h)?)?);
            if let Some(p) = b.pool {
                h = p.forward(&h)?.0;
            }
        }
        Ok(h)
    }
}

impl Network for TeacherNet {
    type Cache = TeacherCache;

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.features(x)?;
        let n = h.dim(0);
        let f = h.len() / n.max(1);
        self.fc.forward(&h.reshape(vec![n, f])?)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, TeacherCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let conv_out = b.conv.forward(&h)?;
            let (normed, bn) = b.bn.forward_train(&conv_out)?;
            let act = relu_fwd(&normed);
            let (next, pool_arg) = match b.pool {
                Some(p) => {
                    let (y, arg) = p.forward(&act)?;
                    (y, Some((arg, act.shape().to_vec())))
                }
                None => (act, None),
            };
            caches.push(BlockCache {
                input: h,
                bn,
                pre_relu: normed,
                pool_arg,
            });
            h = next;
        }
        let feature_shape = h.shape().to_vec();
        let n = h.dim(0);
        let f = h.len() / n.max(1);
        let flat = h.reshape(vec![n, f])?;
        let logits = self.fc.forward(&flat)?;
        Ok((
            logits,
            TeacherCache {
                blocks: caches,
                flat,
                feature_shape,
            },
        ))
    }

    fn backward(&self, c: &TeacherCache, grad_logits: &Tensor) -> Result<Vec<Vec<f64>>> {
        let fc = self.fc.backward(&c.flat, grad_logits)?;
        let mut g = fc.input.reshape(c.feature_shape.clone())?;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            if let (Some(p), Some((arg, shape))) = (b.pool, &bc.pool_arg) {
                g = p.backward(shape, arg, &g)?;
            }
            let g_relu = relu_bwd(&bc.pre_relu, &g)?;
            let bn = b.bn.backward(&bc.bn, &g_relu)?;
            let conv = b.conv.backward(&bc.input, &bn.input)?;
            g = conv.input;
            per_block.push([conv.weight, conv.bias, bn.gamma, bn.beta]);
        }
        let mut grads: Vec<Vec<f64>> = per_block.into_iter().rev().flatten().collect();
        grads.push(fc.weight);
        grads.push(fc.bias);
        Ok(grads)
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend([b.conv.weight.data(), b.conv.bias.data(), b.bn.gamma.data(), b.bn.beta.data()]);
        }
        p.push(self.fc.weight.data());
        p.push(self.fc.bias.data());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = Vec::new();
        for b in &mut self.blocks {
            p.push(b.conv.weight.data_mut());
            p.push(b.conv.bias.data_mut());
            p.push(b.bn.gamma.data_mut());
            p.push(b.bn.beta.data_mut());
        }
        p.push(self.fc.weight.data_mut());
        p.push(self.fc.bias.data_mut());
        p
    }
}
