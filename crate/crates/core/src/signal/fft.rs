//! Iterative radix-2 Cooley-Tukey FFT.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// In-place forward DFT, `X_k = sum_n x_n e^{-2 pi i k n / N}`.
pub fn fft_in_place(buf: &mut [Complex64]) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "FFT length {n} is not a power of two"
        )));
    }
    if n == 1 {
        return Ok(());
    }

    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }

    // twiddles for the largest stage; smaller stages stride through them
    let twiddles: Vec<Complex64> = (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
        .collect();

    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * step];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Full complex spectrum of a real signal.
pub fn rfft_full(x: &[f64]) -> Result<Vec<Complex64>> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf)?;
    Ok(buf)
}

/// Magnitudes of bins `0..N/2` (DC kept, Nyquist dropped).
pub fn rfft_magnitude(x: &[f64]) -> Result<Vec<f64>> {
    let spec = rfft_full(x)?;
    Ok(spec[..x.len() / 2].iter().map(|c| c.norm()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        // reduce k*t mod n to keep the angle accurate
                        let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                        Complex64::from_polar(v, ang)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(rfft_full(&[0.0; 6]).is_err());
        assert!(rfft_full(&[]).is_err());
    }

    #[test]
    fn zeros_give_zeros() {
        assert!(rfft_magnitude(&[0.0; 2048]).unwrap().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn single_cosine_lands_in_one_bin() {
        let n = 2048;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * PI * 100.0 * t as f64 / n as f64).cos())
            .collect();
        let mag = rfft_magnitude(&x).unwrap();
        assert_eq!(mag.len(), 1024);
        assert!((mag[100] - 1024.0).abs() < 1e-6);
        for (k, &m) in mag.iter().enumerate() {
            if k != 100 {
                assert!(m <= 1e-6, "bin {k} = {m}");
            }
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &n in &[1usize, 2, 8, 64, 2048] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = rfft_full(&x).unwrap();
            let slow = naive_dft(&x);
            let scale = slow.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() <= 1e-9 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..2048).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spec = rfft_full(&x).unwrap();
        let lhs: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
        let rhs: f64 = 2048.0 * x.iter().map(|v| v * v).sum::<f64>();
        assert!((lhs - rhs).abs() / rhs < 1e-9);
    }
}
