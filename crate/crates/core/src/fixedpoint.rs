//! Signed 16-bit fixed-point numbers with a per-tensor integer/fraction split.
//!
//! A [`FixedFormat`] `(X, Y)` stores one sign bit, `X` integer bits and `Y`
//! fraction bits, `1 + X + Y == 16`. Values are two's complement, so the
//! represented real number is `raw * 2^-Y`.
//!
//! Products go into a 48-bit [`WideAcc`] without rounding. Only the final
//! write back to 16 bits rounds (half to even) and saturates.

use std::fmt;

use crate::error::{Error, Result};

/// Width of the wide accumulator, matching a DSP48 slice.
pub const ACC_BITS: u32 = 48;
const ACC_MAX: i64 = (1 << (ACC_BITS - 1)) - 1;
const ACC_MIN: i64 = -(1 << (ACC_BITS - 1));

/// Integer/fraction bit allocation of a 16-bit word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedFormat {
    int_bits: u8,
    frac_bits: u8,
}

impl FixedFormat {
    pub fn new(int_bits: u8, frac_bits: u8) -> Result<Self> {
        if int_bits as u32 + frac_bits as u32 != 15 {
            return Err(Error::InvalidFormat {
                int_bits,
                frac_bits,
            });
        }
        Ok(Self {
            int_bits,
            frac_bits,
        })
    }

    /// Format with `int_bits` integer bits and the remaining bits as fraction.
    pub fn with_int_bits(int_bits: u8) -> Result<Self> {
        if int_bits > 15 {
            return Err(Error::InvalidFormat {
                int_bits,
                frac_bits: 0,
            });
        }
        Self::new(int_bits, 15 - int_bits)
    }

    pub fn int_bits(self) -> u8 {
        self.int_bits
    }

    pub fn frac_bits(self) -> u8 {
        self.frac_bits
    }

    /// Weight of the least significant bit, `2^-frac_bits`.
    pub fn ulp(self) -> f64 {
        exp2i(-(self.frac_bits as i32))
    }

    pub fn max_value(self) -> f64 {
        i16::MAX as f64 * self.ulp()
    }

    pub fn min_value(self) -> f64 {
        i16::MIN as f64 * self.ulp()
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.int_bits, self.frac_bits)
    }
}

/// A 16-bit two's-complement word tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fixed16 {
    raw: i16,
    fmt: FixedFormat,
}

impl Fixed16 {
    pub const fn from_raw(raw: i16, fmt: FixedFormat) -> Self {
        Self { raw, fmt }
    }

    pub fn zero(fmt: FixedFormat) -> Self {
        Self { raw: 0, fmt }
    }

    pub fn raw(self) -> i16 {
        self.raw
    }

    /// The stored bit pattern, as written to ROM.
    pub fn word(self) -> u16 {
        self.raw as u16
    }

    pub fn format(self) -> FixedFormat {
        self.fmt
    }

    pub fn to_f64(self) -> f64 {
        dequantize(self)
    }
}

/// Exact sum of 16x16-bit products with `frac_bits` fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WideAcc {
    raw: i64,
    frac_bits: u8,
}

impl WideAcc {
    pub fn zero(frac_bits: u8) -> Self {
        Self { raw: 0, frac_bits }
    }

    pub fn from_raw(raw: i64, frac_bits: u8) -> Result<Self> {
        if !(ACC_MIN..=ACC_MAX).contains(&raw) {
            return Err(Error::AccumulatorOverflow);
        }
        Ok(Self { raw, frac_bits })
    }

    /// Widens a 16-bit word into accumulator alignment.
    ///
    /// Moving to more fraction bits is exact. Moving to fewer rounds half
    /// to even, which only happens when a bias has finer resolution than
    /// the product it is added to.
    pub fn from_fixed(v: Fixed16, frac_bits: u8) -> Self {
        let raw = shift_round(v.raw as i64, v.fmt.frac_bits as i32 - frac_bits as i32);
        Self { raw, frac_bits }
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn frac_bits(self) -> u8 {
        self.frac_bits
    }

    /// Exact for every 48-bit accumulator (f64 has a 53-bit significand).
    pub fn to_f64(self) -> f64 {
        self.raw as f64 * exp2i(-(self.frac_bits as i32))
    }
}

/// `2^e` for small integer exponents, exact.
fn exp2i(e: i32) -> f64 {
    f64::from_bits(((1023 + e) as u64) << 52)
}

/// Arithmetic right shift by `shift` with round-half-even; a negative
/// shift is an exact left shift.
fn shift_round(x: i64, shift: i32) -> i64 {
    if shift <= 0 {
        return x << (-shift);
    }
    if shift >= 63 {
        return 0;
    }
    let floor = x >> shift;
    let rem = x - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

fn saturate(x: i64) -> i16 {
    x.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}

/// Rounds `value` to the nearest word of `fmt` (ties to even), saturating
/// at the format limits.
///
/// # Panics
///
/// On NaN input.
pub fn quantize(value: f64, fmt: FixedFormat) -> Fixed16 {
    assert!(!value.is_nan(), "cannot quantize NaN");
    let scaled = (value * exp2i(fmt.frac_bits as i32)).round_ties_even();
    let raw = scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
    Fixed16 { raw, fmt }
}

pub fn dequantize(v: Fixed16) -> f64 {
    v.raw as f64 * v.fmt.ulp()
}

/// Full-precision product of two words.
pub fn fxp_mul(a: Fixed16, b: Fixed16) -> WideAcc {
    WideAcc {
        raw: a.raw as i64 * b.raw as i64,
        frac_bits: a.fmt.frac_bits + b.fmt.frac_bits,
    }
}

/// Exact accumulator addition. Overflowing 48 bits is an error: it means the
/// format allocation for the layer is wrong.
pub fn acc_add(acc: WideAcc, p: WideAcc) -> Result<WideAcc> {
    if acc.frac_bits != p.frac_bits {
        return Err(Error::FractionMismatch(acc.frac_bits, p.frac_bits));
    }
    WideAcc::from_raw(acc.raw + p.raw, acc.frac_bits)
}

/// Repositions the binary point of an accumulator into a 16-bit word of
/// `out_fmt`, rounding half to even and saturating.
pub fn acc_to_fixed(acc: WideAcc, out_fmt: FixedFormat) -> Fixed16 {
    let shift = acc.frac_bits as i32 - out_fmt.frac_bits as i32;
    Fixed16 {
        raw: saturate(shift_round(acc.raw, shift)),
        fmt: out_fmt,
    }
}

/// Converts a word between formats (the shift module).
pub fn convert(v: Fixed16, out_fmt: FixedFormat) -> Fixed16 {
    acc_to_fixed(
        WideAcc {
            raw: v.raw as i64,
            frac_bits: v.fmt.frac_bits,
        },
        out_fmt,
    )
}

/// Smallest format whose integer part covers every value.
pub fn fit_format(values: &[f64]) -> Result<FixedFormat> {
    if values.is_empty() {
        return Err(Error::Empty("fit_format values"));
    }
    let mut max_abs = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("fit_format values"));
        }
        max_abs = max_abs.max(v.abs());
    }
    fit_max_abs(max_abs)
}

/// [`fit_format`] for a precomputed `max |v|`.
pub fn fit_max_abs(max_abs: f64) -> Result<FixedFormat> {
    if !max_abs.is_finite() {
        return Err(Error::NonFinite("fit_format max"));
    }
    let int_bits = (0..=15u8)
        .find(|&x| max_abs < exp2i(x as i32))
        .ok_or(Error::Unrepresentable(max_abs))?;
    FixedFormat::with_int_bits(int_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f(x: u8, y: u8) -> FixedFormat {
        FixedFormat::new(x, y).unwrap()
    }

    /// Round-half-even and clamp on exact rationals `num / 2^den_bits`.
    fn oracle_round_clamp(num: &BigInt, den_bits: u32) -> i16 {
        let den = BigInt::from(1) << den_bits;
        let two = BigInt::from(2);
        // floor division for BigInt
        let mut q = num / &den;
        let mut r = num - &q * &den;
        if r < BigInt::from(0) {
            q -= 1;
            r += &den;
        }
        let twice = &r * &two;
        let q = if twice > den || (twice == den && (&q % &two) != BigInt::from(0)) {
            q + 1
        } else {
            q
        };
        let q = q.max(BigInt::from(i16::MIN)).min(BigInt::from(i16::MAX));
        i16::try_from(q).unwrap()
    }

    fn oracle_quantize(value: f64, fmt: FixedFormat) -> i16 {
        // decompose the double exactly: value = m * 2^e
        let bits = value.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        let (m, e) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), exp - 1075)
        };
        let total = e + fmt.frac_bits() as i32;
        let m = BigInt::from(m) * sign;
        if total >= 0 {
            oracle_round_clamp(&(m << total as u32), 0)
        } else {
            oracle_round_clamp(&m, (-total) as u32)
        }
    }

    #[test]
    fn format_validation() {
        assert!(FixedFormat::new(2, 13).is_ok());
        assert!(FixedFormat::new(7, 8).is_ok());
        assert!(FixedFormat::new(7, 7).is_err());
        assert!(FixedFormat::with_int_bits(16).is_err());
        assert_eq!(f(0, 15).to_string(), "(0,15)");
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, f(2, 13)).raw(), 0);
        assert_eq!(quantize(1.0, f(2, 13)).raw(), 8192);
        assert_eq!(quantize(5.0, f(2, 13)).raw(), 32767);
        assert_eq!(oracle_quantize(5.0, f(2, 13)), 32767);
        assert!((dequantize(quantize(5.0, f(2, 13))) - 3.99988).abs() < 1e-5);
        assert_eq!(quantize(-5.0, f(2, 13)).raw(), -32768);
        // ties go to even
        assert_eq!(quantize(0.5 * f(7, 8).ulp(), f(7, 8)).raw(), 0);
        assert_eq!(quantize(1.5 * f(7, 8).ulp(), f(7, 8)).raw(), 2);
        assert_eq!(quantize(-2.5 * f(7, 8).ulp(), f(7, 8)).raw(), -2);
    }

    #[test]
    #[should_panic]
    fn quantize_nan_panics() {
        quantize(f64::NAN, f(2, 13));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(Fixed16::from_raw(0, f(2, 13))), 0.0);
        assert_eq!(dequantize(Fixed16::from_raw(8192, f(2, 13))), 1.0);
        assert_eq!(dequantize(Fixed16::from_raw(-1, f(7, 8))), -(2f64.powi(-8)));
    }

    #[test]
    fn mul_examples() {
        let one = Fixed16::from_raw(8192, f(2, 13));
        let p = fxp_mul(one, one);
        assert_eq!((p.raw(), p.frac_bits()), (67108864, 26));
        assert_eq!(p.to_f64(), 1.0);

        let z = fxp_mul(Fixed16::zero(f(2, 13)), Fixed16::from_raw(-32768, f(0, 15)));
        assert_eq!(z.raw(), 0);

        let p = fxp_mul(
            Fixed16::from_raw(-4096, f(2, 13)),
            Fixed16::from_raw(256, f(7, 8)),
        );
        assert_eq!((p.raw(), p.frac_bits()), (-1048576, 21));
        assert_eq!(p.to_f64(), -0.5);
    }

    #[test]
    fn acc_add_identity_and_sum() {
        let one = Fixed16::from_raw(8192, f(2, 13));
        let p = fxp_mul(one, one);
        assert_eq!(acc_add(WideAcc::zero(26), p).unwrap(), p);

        let mut acc = WideAcc::zero(26);
        for _ in 0..64 {
            acc = acc_add(acc, p).unwrap();
        }
        assert_eq!(acc.to_f64(), 64.0);
    }

    #[test]
    fn acc_add_errors() {
        let big = WideAcc::from_raw(ACC_MAX, 10).unwrap();
        assert!(matches!(
            acc_add(big, WideAcc::from_raw(1, 10).unwrap()),
            Err(Error::AccumulatorOverflow)
        ));
        assert!(matches!(
            acc_add(WideAcc::zero(3), WideAcc::zero(4)),
            Err(Error::FractionMismatch(3, 4))
        ));
        assert!(WideAcc::from_raw(ACC_MIN - 1, 0).is_err());
    }

    #[test]
    fn worst_case_accumulation_fits() {
        // 2^15 products of (-2^15)^2 stay within 48 bits
        let m = Fixed16::from_raw(i16::MIN, f(0, 15));
        let p = fxp_mul(m, m);
        let mut acc = WideAcc::zero(30);
        for _ in 0..(1 << 15) - 1 {
            acc = acc_add(acc, p).unwrap();
        }
        assert!(acc.raw() < ACC_MAX);
    }

    #[test]
    fn random_dot_product_matches_bigint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut acc = WideAcc::zero(13 + 15);
            let mut oracle = BigInt::from(0);
            for _ in 0..64 {
                let a: i16 = rng.random();
                let b: i16 = rng.random();
                acc = acc_add(
                    acc,
                    fxp_mul(Fixed16::from_raw(a, f(2, 13)), Fixed16::from_raw(b, f(0, 15))),
                )
                .unwrap();
                oracle += BigInt::from(a) * BigInt::from(b);
            }
            assert_eq!(BigInt::from(acc.raw()), oracle);
        }
    }

    #[test]
    fn acc_to_fixed_examples() {
        let fmt = f(7, 8);
        let one = WideAcc::from_raw(1 << 26, 26).unwrap();
        assert_eq!(acc_to_fixed(one, fmt).raw(), 256);

        let two_hundred = WideAcc::from_raw(200 << 26, 26).unwrap();
        assert_eq!(acc_to_fixed(two_hundred, fmt).raw(), 32767);
        assert_eq!(oracle_round_clamp(&BigInt::from(200i64 << 26), 18), 32767);

        let tiny = WideAcc::from_raw(1, 30).unwrap();
        assert_eq!(acc_to_fixed(tiny, fmt).raw(), 0);

        // widening into more fraction bits
        let acc = WideAcc::from_raw(3, 2).unwrap();
        assert_eq!(acc_to_fixed(acc, f(0, 15)).raw(), 3 << 13);
    }

    #[test]
    fn convert_examples() {
        let one = Fixed16::from_raw(8192, f(2, 13));
        assert_eq!(convert(one, f(7, 8)).raw(), 256);
        let lsb = Fixed16::from_raw(1, f(2, 13));
        assert_eq!(convert(lsb, f(7, 8)).raw(), 0);
        let back = convert(Fixed16::from_raw(-3000, f(7, 8)), f(2, 13));
        assert_eq!(back.raw(), i16::MIN);
    }

    #[test]
    fn from_fixed_alignment() {
        let b = Fixed16::from_raw(3, f(2, 13));
        assert_eq!(WideAcc::from_fixed(b, 20).raw(), 3 << 7);
        // 3 * 2^-13 at 12 fraction bits: 1.5 -> 2 (tie to even)
        assert_eq!(WideAcc::from_fixed(b, 12).raw(), 2);
    }

    #[test]
    fn fit_format_examples() {
        assert_eq!(fit_format(&[-0.4, 0.1, 0.4]).unwrap(), f(0, 15));
        assert_eq!(fit_format(&[0.5, -3.2]).unwrap(), f(2, 13));
        assert_eq!(fit_format(&[100.0, 1.0]).unwrap(), f(7, 8));
        assert_eq!(fit_format(&[0.0]).unwrap(), f(0, 15));
        assert_eq!(fit_format(&[1.0]).unwrap(), f(1, 14));
        assert_eq!(fit_format(&[32767.9]).unwrap(), f(15, 0));
        assert!(matches!(
            fit_format(&[32768.0]),
            Err(Error::Unrepresentable(_))
        ));
        assert!(fit_format(&[]).is_err());
        assert!(fit_format(&[f64::NAN]).is_err());
    }

    fn any_format() -> impl Strategy<Value = FixedFormat> {
        (0u8..=15).prop_map(|x| FixedFormat::with_int_bits(x).unwrap())
    }

    proptest! {
        #[test]
        fn quantize_matches_oracle(v in -70000.0f64..70000.0, fmt in any_format()) {
            prop_assert_eq!(quantize(v, fmt).raw(), oracle_quantize(v, fmt));
        }

        #[test]
        fn round_trip_within_half_ulp(fmt in any_format(), u in 0.0f64..1.0) {
            let v = fmt.min_value() + u * (fmt.max_value() - fmt.min_value());
            let err = (dequantize(quantize(v, fmt)) - v).abs();
            prop_assert!(err <= 0.5 * fmt.ulp());
        }

        #[test]
        fn quantize_monotone(a in -1e5f64..1e5, b in -1e5f64..1e5, fmt in any_format()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, fmt).raw() <= quantize(hi, fmt).raw());
        }

        #[test]
        fn mul_then_narrow_equals_quantized_product(
            a in any::<i16>(), b in any::<i16>(),
            fa in any_format(), fb in any_format(), out in any_format()
        ) {
            let (x, y) = (Fixed16::from_raw(a, fa), Fixed16::from_raw(b, fb));
            let direct = acc_to_fixed(fxp_mul(x, y), out);
            let via_float = quantize(dequantize(x) * dequantize(y), out);
            prop_assert_eq!(direct, via_float);
        }

        #[test]
        fn fit_format_bounds(values in proptest::collection::vec(-30000.0f64..30000.0, 1..50)) {
            let fmt = fit_format(&values).unwrap();
            let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(m < exp2i(fmt.int_bits() as i32));
            if fmt.int_bits() >= 1 {
                prop_assert!(exp2i(fmt.int_bits() as i32 - 1) <= m);
            }
        }
    }
}
