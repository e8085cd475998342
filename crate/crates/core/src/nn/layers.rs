//! Layers with explicit forward and backward passes. Activations are
//! `[batch, channels, length]`; the linear layer takes `[batch, features]`.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn uniform_init<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-correlation with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, kernel]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

// Kernels at least this long use the per-output dot-product loop; shorter
// ones sweep the whole output row per tap.
const DOT_KERNEL_MIN: usize = 16;

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::new(
                vec![out_channels, in_channels, kernel],
                uniform_init(out_channels * in_channels * kernel, fan_in, rng),
            )
            .unwrap(),
            bias: Tensor::new(vec![out_channels], uniform_init(out_channels, fan_in, rng)).unwrap(),
        }
    }

    /// `floor((L + 2p - k) / s) + 1`
    pub fn out_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return Err(Error::Shape(format!(
                "conv kernel {} does not fit padded length {padded}",
                self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        x.expect_rank(3, "conv1d")?;
        let (n, c, l) = (x.dim(0), x.dim(1), x.dim(2));
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv1d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        Ok((n, l, self.out_len(l)?))
    }

    /// Valid tap range `[k_lo, k_hi)` and the input offset of tap 0 for an
    /// output position.
    #[inline]
    fn taps(&self, ol: usize, len: usize) -> (usize, usize, isize) {
        let base = (ol * self.stride) as isize - self.padding as isize;
        let k_lo = (-base).max(0) as usize;
        let k_hi = ((len as isize - base).max(0) as usize).min(self.kernel);
        (k_lo, k_hi.max(k_lo), base)
    }

    /// Output positions `[lo, hi)` whose tap `k` lands inside the input.
    #[inline]
    fn positions(&self, k: usize, len: usize, lout: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = self.padding as isize - k as isize;
        let lo = if shift > 0 { (shift + s - 1) / s } else { 0 };
        let hi = (len as isize - 1 + shift).div_euclid(s) + 1;
        let hi = hi.clamp(0, lout as isize) as usize;
        let lo = (lo as usize).min(hi);
        (lo, hi)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, lout) = self.check_input(x)?;
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        let w = self.weight.data();
        let mut out = vec![0.0; n * cout * lout];
        for b in 0..n {
            let xb = &x.data()[b * cin * l..(b + 1) * cin * l];
            for oc in 0..cout {
                let row = &mut out[(b * cout + oc) * lout..(b * cout + oc + 1) * lout];
                row.fill(self.bias.data()[oc]);
                for ic in 0..cin {
                    let xr = &xb[ic * l..(ic + 1) * l];
                    let wr = &w[(oc * cin + ic) * k..(oc * cin + ic + 1) * k];
                    if k >= DOT_KERNEL_MIN {
                        for (ol, o) in row.iter_mut().enumerate() {
                            let (lo, hi, base) = self.taps(ol, l);
                            if lo < hi {
                                let s = (base + lo as isize) as usize;
                                *o += dot(&wr[lo..hi], &xr[s..s + hi - lo]);
                            }
                        }
                    } else {
                        for (tap, &wv) in wr.iter().enumerate() {
                            let (lo, hi) = self.positions(tap, l, lout);
                            if lo >= hi {
                                continue;
                            }
                            let start = lo * self.stride + tap - self.padding;
                            if self.stride == 1 {
                                axpy(&mut row[lo..hi], wv, &xr[start..start + hi - lo]);
                            } else {
                                for (j, o) in row[lo..hi].iter_mut().enumerate() {
                                    *o += wv * xr[start + j * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, cout, lout], out)?;
        out.check_finite("conv1d forward")?;
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let (n, l, lout) = self.check_input(x)?;
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        if grad_out.shape() != [n, cout, lout] {
            return Err(Error::Shape(format!(
                "conv1d grad shape {:?}, expected {:?}",
                grad_out.shape(),
                [n, cout, lout]
            )));
        }
        let w = self.weight.data();
        let g = grad_out.data();
        let mut gx = vec![0.0; n * cin * l];
        let mut gw = vec![0.0; cout * cin * k];
        let mut gb = vec![0.0; cout];

        for b in 0..n {
            let xb = &x.data()[b * cin * l..(b + 1) * cin * l];
            let gxb = &mut gx[b * cin * l..(b + 1) * cin * l];
            for oc in 0..cout {
                let grow = &g[(b * cout + oc) * lout..(b * cout + oc + 1) * lout];
                gb[oc] += grow.iter().sum::<f64>();
                for ic in 0..cin {
                    let xr = &xb[ic * l..(ic + 1) * l];
                    let gxr = &mut gxb[ic * l..(ic + 1) * l];
                    let wr = &w[(oc * cin + ic) * k..(oc * cin + ic + 1) * k];
                    let gwr = &mut gw[(oc * cin + ic) * k..(oc * cin + ic + 1) * k];
                    if k >= DOT_KERNEL_MIN {
                        for (ol, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let (lo, hi, base) = self.taps(ol, l);
                            if lo < hi {
                                let s = (base + lo as isize) as usize;
                                axpy(&mut gwr[lo..hi], gv, &xr[s..s + hi - lo]);
                                axpy(&mut gxr[s..s + hi - lo], gv, &wr[lo..hi]);
                            }
                        }
                    } else {
                        for tap in 0..k {
                            let (lo, hi) = self.positions(tap, l, lout);
                            if lo >= hi {
                                continue;
                            }
                            let start = lo * self.stride + tap - self.padding;
                            if self.stride == 1 {
                                let span = start..start + hi - lo;
                                gwr[tap] += dot(&grow[lo..hi], &xr[span.clone()]);
                                axpy(&mut gxr[span], wr[tap], &grow[lo..hi]);
                            } else {
                                for (j, &gv) in grow[lo..hi].iter().enumerate() {
                                    let p = start + j * self.stride;
                                    gwr[tap] += gv * xr[p];
                                    gxr[p] += gv * wr[tap];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::new(vec![n, cin, l], gx)?,
            weight: gw,
            bias: gb,
        })
    }
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect()).unwrap()
}

/// Gradient is passed where the input is strictly positive.
pub fn relu_bwd(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape("relu gradient shape".into()));
    }
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool1d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride }
    }

    /// `floor((n - k) / s) + 1`: only fully contained windows.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        if len < self.kernel || self.stride == 0 || self.kernel == 0 {
            return Err(Error::Shape(format!(
                "pool window {} does not fit length {len}",
                self.kernel
            )));
        }
        Ok((len - self.kernel) / self.stride + 1)
    }

    /// Returns the pooled tensor and, per output, the flat input index that
    /// won (leftmost on ties).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        x.expect_rank(3, "maxpool")?;
        let (n, c, l) = (x.dim(0), x.dim(1), x.dim(2));
        let lout = self.out_len(l)?;
        let mut out = Vec::with_capacity(n * c * lout);
        let mut arg = Vec::with_capacity(n * c * lout);
        for (r, row) in x.data().chunks_exact(l).enumerate() {
            for o in 0..lout {
                let s = o * self.stride;
                let mut best = s;
                for i in s + 1..s + self.kernel {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                arg.push(r * l + best);
            }
        }
        Ok((Tensor::new(vec![n, c, lout], out)?, arg))
    }

    pub fn backward(&self, input_shape: &[usize], argmax: &[usize], grad: &Tensor) -> Result<Tensor> {
        if argmax.len() != grad.len() {
            return Err(Error::Shape("maxpool gradient length".into()));
        }
        let mut gx = Tensor::zeros(input_shape);
        let d = gx.data_mut();
        for (&i, &g) in argmax.iter().zip(grad.data()) {
            d[i] += g;
        }
        Ok(gx)
    }
}

/// Per-channel batch normalization over batch and length.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::new(vec![channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        x.expect_rank(3, "batchnorm")?;
        if x.dim(1) != self.channels {
            return Err(Error::Shape(format!(
                "batchnorm expects {} channels, got {}",
                self.channels,
                x.dim(1)
            )));
        }
        Ok((x.dim(0), x.dim(2)))
    }

    /// Normalizes with batch statistics and updates the running averages
    /// (unbiased variance, as PyTorch does).
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BnCache)> {
        let (n, l) = self.dims(x)?;
        let c = self.channels;
        let m = (n * l) as f64;
        let d = x.data();
        let mut out = vec![0.0; d.len()];
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let idx = |b: usize| (b * c + ch) * l;
            let mut sum = 0.0;
            for b in 0..n {
                sum += d[idx(b)..idx(b) + l].iter().sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for b in 0..n {
                sq += d[idx(b)..idx(b) + l].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            let var = sq / m;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (gm, bt) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for b in 0..n {
                for i in idx(b)..idx(b) + l {
                    let h = (d[i] - mean) * is;
                    xhat[i] = h;
                    out[i] = gm * h + bt;
                }
            }
            let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        out.check_finite("batchnorm forward")?;
        Ok((
            out,
            BnCache {
                xhat,
                inv_std,
                shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l) = self.dims(x)?;
        let c = self.channels;
        let mut out = x.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                let (mu, gm, bt) = (self.running_mean[ch], self.gamma.data()[ch], self.beta.data()[ch]);
                for v in &mut out[(b * c + ch) * l..(b * c + ch + 1) * l] {
                    *v = gm * (*v - mu) * is + bt;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    pub fn backward(&self, cache: &BnCache, grad: &Tensor) -> Result<BnGrads> {
        if grad.shape() != cache.shape.as_slice() {
            return Err(Error::Shape("batchnorm gradient shape".into()));
        }
        let (n, c, l) = (cache.shape[0], cache.shape[1], cache.shape[2]);
        let m = (n * l) as f64;
        let g = grad.data();
        let mut gx = vec![0.0; g.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..n {
                let r = (b * c + ch) * l..(b * c + ch + 1) * l;
                sum_g += g[r.clone()].iter().sum::<f64>();
                sum_gx += dot(&g[r.clone()], &cache.xhat[r]);
            }
            ggamma[ch] = sum_gx;
            gbeta[ch] = sum_g;
            let k = self.gamma.data()[ch] * cache.inv_std[ch] / m;
            for b in 0..n {
                for i in (b * c + ch) * l..(b * c + ch + 1) * l {
                    gx[i] = k * (m * g[i] - sum_g - cache.xhat[i] * sum_gx);
                }
            }
        }
        Ok(BnGrads {
            input: Tensor::new(cache.shape.clone(), gx)?,
            gamma: ggamma,
            beta: gbeta,
        })
    }
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Tensor::new(
                vec![in_features, out_features],
                uniform_init(in_features * out_features, in_features, rng),
            )
            .unwrap(),
            bias: Tensor::new(vec![out_features], uniform_init(out_features, in_features, rng)).unwrap(),
        }
    }

    fn batch(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() != 2 || x.dim(1) != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects [batch, {}], got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        Ok(x.dim(0))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.batch(x)?;
        let (fi, fo) = (self.in_features, self.out_features);
        let w = self.weight.data();
        let mut out = Vec::with_capacity(n * fo);
        for row in x.data().chunks_exact(fi) {
            let mut y = self.bias.data().to_vec();
            for (i, &xv) in row.iter().enumerate() {
                axpy(&mut y, xv, &w[i * fo..(i + 1) * fo]);
            }
            out.extend_from_slice(&y);
        }
        let out = Tensor::new(vec![n, fo], out)?;
        out.check_finite("linear forward")?;
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, grad: &Tensor) -> Result<LinearGrads> {
        let n = self.batch(x)?;
        let (fi, fo) = (self.in_features, self.out_features);
        if grad.shape() != [n, fo] {
            return Err(Error::Shape("linear gradient shape".into()));
        }
        let w = self.weight.data();
        let mut gw = vec![0.0; fi * fo];
        let mut gb = vec![0.0; fo];
        let mut gx = Vec::with_capacity(n * fi);
        for (row, g) in x.data().chunks_exact(fi).zip(grad.data().chunks_exact(fo)) {
            axpy(&mut gb, 1.0, g);
            for (i, &xv) in row.iter().enumerate() {
                axpy(&mut gw[i * fo..(i + 1) * fo], xv, g);
                gx.push(dot(&w[i * fo..(i + 1) * fo], g));
            }
        }
        Ok(LinearGrads {
            input: Tensor::new(vec![n, fi], gx)?,
            weight: gw,
            bias: gb,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Index-by-index triple loop.
    fn naive_conv(conv: &Conv1d, x: &Tensor) -> Vec<f64> {
        let (n, l) = (x.dim(0), x.dim(2));
        let lout = conv.out_len(l).unwrap();
        let mut out = vec![];
        for b in 0..n {
            for oc in 0..conv.out_channels {
                for ol in 0..lout {
                    let mut acc = conv.bias.data()[oc];
                    for ic in 0..conv.in_channels {
                        for k in 0..conv.kernel {
                            let pos = (ol * conv.stride + k) as isize - conv.padding as isize;
                            if pos >= 0 && (pos as usize) < l {
                                let wv = conv.weight.data()[(oc * conv.in_channels + ic) * conv.kernel + k];
                                acc += wv * x.data()[(b * conv.in_channels + ic) * l + pos as usize];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn sum_weighted(t: &Tensor, probe: &[f64]) -> f64 {
        dot(t.data(), probe)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_identity_kernel_shifts() {
        let mut c = Conv1d::new(1, 1, 3, 1, 0, &mut rng(0));
        c.weight = Tensor::new(vec![1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        c.bias = Tensor::zeros(&[1]);
        let x = Tensor::new(vec![1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(c.forward(&x).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn conv_table_geometry() {
        let c = Conv1d::new(1, 4, 64, 8, 28, &mut rng(0));
        let x = Tensor::zeros(&[2, 1, 1024]);
        assert_eq!(c.forward(&x).unwrap().shape(), &[2, 4, 128]);
    }

    #[test]
    fn conv_matches_naive() {
        let mut r = rng(1);
        for &(cin, cout, k, s, p, l) in &[
            (1, 4, 64, 8, 28, 1024),
            (3, 2, 3, 1, 1, 17),
            (2, 3, 5, 2, 2, 20),
            (2, 2, 20, 3, 4, 50),
            (1, 1, 4, 1, 0, 4),
        ] {
            let conv = Conv1d::new(cin, cout, k, s, p, &mut r);
            let x = random_tensor(&[2, cin, l], &mut r);
            let fast = conv.forward(&x).unwrap();
            for (a, b) in fast.data().iter().zip(naive_conv(&conv, &x)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let c = Conv1d::new(2, 1, 3, 1, 0, &mut rng(0));
        assert!(c.forward(&Tensor::zeros(&[1, 1, 8])).is_err());
        assert!(c.forward(&Tensor::zeros(&[1, 2, 2])).is_err());
        assert!(c.backward(&Tensor::zeros(&[1, 2, 8]), &Tensor::zeros(&[1, 1, 5])).is_err());
    }

    #[test]
    fn conv_backward_trivial_cases() {
        let mut r = rng(2);
        let conv = Conv1d::new(1, 2, 4, 2, 1, &mut r);
        let x = random_tensor(&[1, 1, 10], &mut r);
        let lout = conv.out_len(10).unwrap();
        let g = conv.backward(&x, &Tensor::zeros(&[1, 2, lout])).unwrap();
        assert!(g.weight.iter().chain(&g.bias).chain(g.input.data()).all(|&v| v == 0.0));

        // one output position: weight gradient is that receptive field
        let mut go = Tensor::zeros(&[1, 2, lout]);
        go.data_mut()[lout + 2] = 1.0;
        let g = conv.backward(&x, &go).unwrap();
        let window: Vec<f64> = (0..4).map(|k| x.data()[2 * 2 + k - 1]).collect();
        assert_eq!(&g.weight[4..8], window.as_slice());
        assert!(g.weight[..4].iter().all(|&v| v == 0.0));
        assert_eq!(g.bias, vec![0.0, 1.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(3);
        let eps = 1e-5;
        for &(cin, cout, k, s, p, l) in &[(2, 3, 3, 1, 1, 9), (1, 2, 20, 4, 5, 40), (2, 2, 5, 2, 2, 12)] {
            let mut conv = Conv1d::new(cin, cout, k, s, p, &mut r);
            let x = random_tensor(&[2, cin, l], &mut r);
            let lout = conv.out_len(l).unwrap();
            let probe: Vec<f64> = (0..2 * cout * lout).map(|_| r.random_range(-1.0..1.0)).collect();
            let gout = Tensor::new(vec![2, cout, lout], probe.clone()).unwrap();
            let grads = conv.backward(&x, &gout).unwrap();

            for i in 0..conv.weight.len() {
                let orig = conv.weight.data()[i];
                conv.weight.data_mut()[i] = orig + eps;
                let up = sum_weighted(&conv.forward(&x).unwrap(), &probe);
                conv.weight.data_mut()[i] = orig - eps;
                let dn = sum_weighted(&conv.forward(&x).unwrap(), &probe);
                conv.weight.data_mut()[i] = orig;
                assert!(rel_err((up - dn) / (2.0 * eps), grads.weight[i]) < 1e-5);
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let up = sum_weighted(&conv.forward(&xp).unwrap(), &probe);
                xp.data_mut()[i] -= 2.0 * eps;
                let dn = sum_weighted(&conv.forward(&xp).unwrap(), &probe);
                assert!(rel_err((up - dn) / (2.0 * eps), grads.input.data()[i]) < 1e-5);
            }
            for oc in 0..cout {
                let expect: f64 = (0..2).map(|b| probe[(b * cout + oc) * lout..(b * cout + oc + 1) * lout].iter().sum::<f64>()).sum();
                assert!(rel_err(expect, grads.bias[oc]) < 1e-12);
            }
        }
    }

    #[test]
    fn relu_cases() {
        let neg = Tensor::new(vec![3], vec![-1.0, -0.5, -3.0]).unwrap();
        assert!(relu_fwd(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::new(vec![3], vec![1.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu_fwd(&pos), pos);
        let g = Tensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap();
        assert_eq!(relu_bwd(&pos, &g).unwrap(), g);
        assert!(relu_bwd(&neg, &g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_cases() {
        let pool = MaxPool1d::new(2, 2);
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (y, arg) = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
        assert_eq!(pool.out_len(128).unwrap(), 64);
        assert_eq!(pool.out_len(5).unwrap(), 2);
        assert!(pool.out_len(1).is_err());

        // ties route to the leftmost element
        let x = Tensor::new(vec![1, 1, 2], vec![5.0, 5.0]).unwrap();
        let (y, arg) = pool.forward(&x).unwrap();
        let g = pool.backward(x.shape(), &arg, &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn relu_pool_gradients_match_finite_differences() {
        let mut r = rng(4);
        let pool = MaxPool1d::new(3, 2);
        let eps = 1e-6;
        // spread values so no perturbation crosses a kink or tie
        let data: Vec<f64> = (0..2 * 2 * 11).map(|i| ((i * 37 % 44) as f64 - 20.0) * 0.1 + 0.05).collect();
        let x = Tensor::new(vec![2, 2, 11], data).unwrap();
        let f = |x: &Tensor| pool.forward(&relu_fwd(x)).unwrap().0;
        let y = f(&x);
        let probe: Vec<f64> = (0..y.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, arg) = pool.forward(&relu_fwd(&x)).unwrap();
        let gp = pool
            .backward(x.shape(), &arg, &Tensor::new(y.shape().to_vec(), probe.clone()).unwrap())
            .unwrap();
        let gx = relu_bwd(&x, &gp).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let up = sum_weighted(&f(&xp), &probe);
            xp.data_mut()[i] -= 2.0 * eps;
            let dn = sum_weighted(&f(&xp), &probe);
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", gx.data()[i]);
        }
    }

    #[test]
    fn batchnorm_normalizes() {
        let mut r = rng(5);
        let mut bn = BatchNorm1d::new(3);
        let x = random_tensor(&[4, 3, 6], &mut r);
        let (y, _) = bn.forward_train(&x).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| y.data()[(b * 3 + ch) * 6..(b * 3 + ch + 1) * 6].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 24.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 24.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        // feeding the normalized batch back in is nearly the identity
        let (yy, _) = bn.forward_train(&y).unwrap();
        for (a, b) in yy.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(bn.running_mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut r = rng(6);
        let mut bn = BatchNorm1d::new(2);
        bn.gamma = Tensor::new(vec![2], vec![1.3, 0.7]).unwrap();
        bn.beta = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let x = random_tensor(&[3, 2, 5], &mut r);
        let probe: Vec<f64> = (0..x.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, cache) = bn.clone().forward_train(&x).unwrap();
        let g = bn.backward(&cache, &Tensor::new(x.shape().to_vec(), probe.clone()).unwrap()).unwrap();
        let eps = 1e-5;
        let loss = |bn: &BatchNorm1d, x: &Tensor| sum_weighted(&bn.clone().forward_train(x).unwrap().0, &probe);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let up = loss(&bn, &xp);
            xp.data_mut()[i] -= 2.0 * eps;
            let dn = loss(&bn, &xp);
            assert!(rel_err((up - dn) / (2.0 * eps), g.input.data()[i]) < 1e-5);
        }
        for ch in 0..2 {
            let mut b2 = bn.clone();
            b2.gamma.data_mut()[ch] += eps;
            let up = loss(&b2, &x);
            b2.gamma.data_mut()[ch] -= 2.0 * eps;
            let dn = loss(&b2, &x);
            assert!(rel_err((up - dn) / (2.0 * eps), g.gamma[ch]) < 1e-5);
            let mut b3 = bn.clone();
            b3.beta.data_mut()[ch] += eps;
            let up = loss(&b3, &x);
            b3.beta.data_mut()[ch] -= 2.0 * eps;
            let dn = loss(&b3, &x);
            assert!(rel_err((up - dn) / (2.0 * eps), g.beta[ch]) < 1e-5);
        }
    }

    #[test]
    fn linear_cases() {
        let mut lin = Linear::new(3, 3, &mut rng(7));
        lin.weight = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        lin.bias = Tensor::zeros(&[3]);
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(lin.forward(&x).unwrap().data(), x.data());
        lin.bias = Tensor::new(vec![3], vec![0.5, 0.25, 1.0]).unwrap();
        assert_eq!(lin.forward(&Tensor::zeros(&[1, 3])).unwrap().data(), &[0.5, 0.25, 1.0]);
        assert!(lin.forward(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng(8);
        let mut lin = Linear::new(5, 4, &mut r);
        let x = random_tensor(&[3, 5], &mut r);
        let probe: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let g = lin.backward(&x, &Tensor::new(vec![3, 4], probe.clone()).unwrap()).unwrap();
        let eps = 1e-5;
        for i in 0..20 {
            let o = lin.weight.data()[i];
            lin.weight.data_mut()[i] = o + eps;
            let up = sum_weighted(&lin.forward(&x).unwrap(), &probe);
            lin.weight.data_mut()[i] = o - eps;
            let dn = sum_weighted(&lin.forward(&x).unwrap(), &probe);
            lin.weight.data_mut()[i] = o;
            assert!(rel_err((up - dn) / (2.0 * eps), g.weight[i]) < 1e-6);
        }
        for i in 0..15 {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let up = sum_weighted(&lin.forward(&xp).unwrap(), &probe);
            xp.data_mut()[i] -= 2.0 * eps;
            let dn = sum_weighted(&lin.forward(&xp).unwrap(), &probe);
            assert!(rel_err((up - dn) / (2.0 * eps), g.input.data()[i]) < 1e-6);
        }
    }
}
