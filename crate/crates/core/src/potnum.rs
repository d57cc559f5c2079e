//! Scalar power-of-two (PoT) numbers.
//!
//! A `b`-bit PoT code is one sign bit plus a `b - 1` bit exponent field. The
//! all-zeros exponent field is reserved for the value zero; the remaining
//! `2^(b-1) - 1` field values map to exponents `-emax..=emax` through a bias of
//! `emax + 1`, where `emax = 2^(b-2) - 1`.
//!
//! Rounding to the nearest exponent is done in the log domain by looking at the
//! binary exponent and comparing the mantissa against `sqrt(2)`. No libm calls
//! are involved, so results are identical on every platform.

use std::fmt;

use crate::error::{Error, Result};

const F64_MANTISSA_BITS: u32 = 52;
const F64_MANTISSA_MASK: u64 = (1 << F64_MANTISSA_BITS) - 1;
const F64_EXP_MASK: u64 = 0x7ff;
const F64_EXP_BIAS: i32 = 1023;

/// Smallest 52-bit mantissa field `M` with `(1 + M / 2^52) >= sqrt(2)`.
///
/// `(2^52 + M)^2 >= 2^105` is solved once with integer arithmetic; the
/// boundary is irrational so no mantissa ever sits exactly on it.
pub const SQRT2_MANTISSA: u64 = {
    let target: u128 = 1 << 105;
    let root = target.isqrt();
    let ceil = if root * root < target { root + 1 } else { root };
    (ceil - (1u128 << 52)) as u64
};

/// Number of bits in a PoT code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitWidth(u8);

impl BitWidth {
    pub const B3: BitWidth = BitWidth(3);
    pub const B4: BitWidth = BitWidth(4);
    pub const B5: BitWidth = BitWidth(5);
    pub const B6: BitWidth = BitWidth(6);

    pub const SUPPORTED: [BitWidth; 4] = [Self::B3, Self::B4, Self::B5, Self::B6];

    pub fn new(bits: u8) -> Result<Self> {
        if (3..=6).contains(&bits) {
            Ok(BitWidth(bits))
        } else {
            Err(Error::Config(format!(
                "unsupported PoT bit-width {bits}; expected 3, 4, 5 or 6"
            )))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Largest representable exponent, `2^(b-2) - 1`.
    pub fn emax(self) -> i32 {
        (1 << (self.0 - 2)) - 1
    }

    /// Number of exponent-field values, including the zero sentinel.
    pub fn field_count(self) -> u8 {
        1 << (self.0 - 1)
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.0)
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        BitWidth::new(bits)
    }
}

/// One encoded PoT scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PotCode {
    negative: bool,
    field: u8,
    width: BitWidth,
}

impl PotCode {
    pub fn zero(width: BitWidth) -> Self {
        PotCode {
            negative: false,
            field: 0,
            width,
        }
    }

    /// Builds `(-1)^negative * 2^exp`.
    pub fn from_exponent(negative: bool, exp: i32, width: BitWidth) -> Result<Self> {
        let emax = width.emax();
        if !(-emax..=emax).contains(&exp) {
            return Err(Error::Input(format!(
                "exponent {exp} outside [-{emax}, {emax}] for {width} codes"
            )));
        }
        Ok(PotCode {
            negative,
            field: (exp + emax + 1) as u8,
            width,
        })
    }

    /// Decodes a raw `b`-bit pattern (sign in the top bit). Negative zero is
    /// canonicalized to zero.
    pub fn from_bits(pattern: u8, width: BitWidth) -> Result<Self> {
        let b = width.bits();
        if u16::from(pattern) >= 1u16 << b {
            return Err(Error::Input(format!(
                "bit pattern {pattern:#b} does not fit a {width} code"
            )));
        }
        let field = pattern & (width.field_count() - 1);
        let negative = field != 0 && (pattern >> (b - 1)) & 1 == 1;
        Ok(PotCode {
            negative,
            field,
            width,
        })
    }

    pub fn to_bits(self) -> u8 {
        (u8::from(self.negative) << (self.width.bits() - 1)) | self.field
    }

    pub fn is_zero(self) -> bool {
        self.field == 0
    }

    /// Sign bit; 1 means negative.
    pub fn sign(self) -> bool {
        self.negative
    }

    pub fn exp_field(self) -> u8 {
        self.field
    }

    pub fn width(self) -> BitWidth {
        self.width
    }

    /// Decoded exponent, `None` for zero.
    pub fn exponent(self) -> Option<i32> {
        if self.is_zero() {
            None
        } else {
            Some(i32::from(self.field) - self.width.emax() - 1)
        }
    }
}

/// All values representable with `width`, ascending.
pub fn pot_values(width: BitWidth) -> Vec<f64> {
    let emax = width.emax();
    let mut values: Vec<f64> = (-emax..=emax).rev().map(|e| -pow2(e)).collect();
    values.push(0.0);
    values.extend((-emax..=emax).map(pow2));
    values
}

/// Exact `2^k` as an `f64`, built directly from its bit pattern.
///
/// Saturates to `0.0` below the subnormal range and `+inf` above `f64::MAX`.
pub fn pow2(k: i32) -> f64 {
    if k > F64_EXP_BIAS {
        f64::INFINITY
    } else if k >= 1 - F64_EXP_BIAS {
        f64::from_bits(((k + F64_EXP_BIAS) as u64) << F64_MANTISSA_BITS)
    } else if k >= 1 - F64_EXP_BIAS - F64_MANTISSA_BITS as i32 {
        f64::from_bits(1u64 << (k + F64_EXP_BIAS - 1 + F64_MANTISSA_BITS as i32))
    } else {
        0.0
    }
}

/// `x * 2^k` by adjusting the binary exponent field.
///
/// Normal inputs whose result stays normal are handled purely by integer
/// addition on the exponent bits. Anything else falls back to IEEE scaling,
/// which is still exact for power-of-two factors outside the subnormal range.
pub fn ldexp(x: f64, k: i32) -> f64 {
    let bits = x.to_bits();
    let biased = ((bits >> F64_MANTISSA_BITS) & F64_EXP_MASK) as i32;
    if biased != 0 && biased != F64_EXP_MASK as i32 {
        let shifted = biased + k;
        if (1..F64_EXP_MASK as i32).contains(&shifted) {
            let cleared = bits & !(F64_EXP_MASK << F64_MANTISSA_BITS);
            return f64::from_bits(cleared | ((shifted as u64) << F64_MANTISSA_BITS));
        }
    }
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    // Split so that neither factor over/underflows on its own.
    let half = k / 2;
    x * pow2(half) * pow2(k - half)
}

/// `Round(log2 |x|)` for a normal, non-zero `x`; `None` for zero and subnormals.
///
/// Halfway cases round toward +inf, although the `sqrt(2)` boundary is never hit
/// exactly by a binary mantissa.
pub fn round_log2(x: f64) -> Option<i32> {
    let bits = x.to_bits();
    let biased = ((bits >> F64_MANTISSA_BITS) & F64_EXP_MASK) as i32;
    if biased == 0 || biased == F64_EXP_MASK as i32 {
        return None;
    }
    let mantissa = bits & F64_MANTISSA_MASK;
    Some(biased - F64_EXP_BIAS + i32::from(mantissa >= SQRT2_MANTISSA))
}

/// Clamp a rounded exponent into the code range: below `-emax` flushes to
/// zero, at or above `emax` saturates to `emax`.
pub(crate) fn clamp_exponent(e: i32, emax: i32) -> Option<i32> {
    if e < -emax {
        None
    } else {
        Some(e.min(emax))
    }
}

/// Basic PoT quantization of one scalar.
pub fn quantize_scalar(f: f64, width: BitWidth) -> Result<PotCode> {
    if !f.is_finite() {
        return Err(Error::Input(format!("cannot quantize non-finite value {f}")));
    }
    let Some(e) = round_log2(f) else {
        return Ok(PotCode::zero(width));
    };
    match clamp_exponent(e, width.emax()) {
        None => Ok(PotCode::zero(width)),
        Some(e) => PotCode::from_exponent(f.is_sign_negative(), e, width),
    }
}

pub fn dequantize_scalar(code: PotCode) -> f64 {
    match code.exponent() {
        None => 0.0,
        Some(e) => {
            let magnitude = pow2(e);
            if code.sign() {
                -magnitude
            } else {
                magnitude
            }
        }
    }
}

/// Result of multiplying two PoT codes in the log domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PotProduct {
    pub exp_sum: i32,
    pub sign: bool,
    pub is_zero: bool,
}

impl PotProduct {
    pub fn value(self) -> f64 {
        if self.is_zero {
            0.0
        } else if self.sign {
            -pow2(self.exp_sum)
        } else {
            pow2(self.exp_sum)
        }
    }
}

/// `2^k * 2^m = 2^(k+m)` with the sign bits combined by XOR.
pub fn pot_mul(a: PotCode, b: PotCode) -> PotProduct {
    match (a.exponent(), b.exponent()) {
        (Some(k), Some(m)) => PotProduct {
            exp_sum: k + m,
            sign: a.sign() ^ b.sign(),
            is_zero: false,
        },
        _ => PotProduct {
            exp_sum: 0,
            sign: false,
            is_zero: true,
        },
    }
}

/// Multiply a fixed-point integer by a PoT code with a shift and sign flip.
///
/// Right shifts are arithmetic (floor). Shifts of the full word width or
/// more, and left shifts that lose significant bits, are reported as
/// [`Error::Overflow`].
pub fn shift_mul(code: PotCode, x: i64) -> Result<i64> {
    let Some(k) = code.exponent() else {
        return Ok(0);
    };
    if k.unsigned_abs() >= i64::BITS {
        return Err(Error::Overflow(format!("shift by {k} exceeds 64-bit word")));
    }
    let shifted = match k.cmp(&0) {
        std::cmp::Ordering::Equal => x,
        std::cmp::Ordering::Less => x >> k.unsigned_abs(),
        std::cmp::Ordering::Greater => {
            let out = x << k;
            if out >> k != x {
                return Err(Error::Overflow(format!("{x} << {k} does not fit i64")));
            }
            out
        }
    };
    if code.sign() {
        shifted
            .checked_neg()
            .ok_or_else(|| Error::Overflow(format!("negating {shifted}")))
    } else {
        Ok(shifted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b5() -> BitWidth {
        BitWidth::B5
    }

    #[test]
    fn sqrt2_mantissa_brackets_the_boundary() {
        let below = (1u128 << 52) + u128::from(SQRT2_MANTISSA) - 1;
        let at = below + 1;
        assert!(below * below < 1 << 105);
        assert!(at * at >= 1 << 105);
    }

    #[test]
    fn value_sets() {
        let v5 = pot_values(b5());
        assert_eq!(v5.len(), 31);
        assert_eq!(*v5.last().unwrap(), 128.0);
        assert_eq!(v5.iter().copied().filter(|v| *v > 0.0).fold(f64::MAX, f64::min), 2f64.powi(-7));
        assert_eq!(pot_values(BitWidth::B3), vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]);
        assert_eq!(*pot_values(BitWidth::B6).last().unwrap(), 32768.0);
        assert!(BitWidth::new(7).is_err());
        assert!(BitWidth::new(2).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = |f| dequantize_scalar(quantize_scalar(f, b5()).unwrap());
        assert_eq!(q(1.0), 1.0);
        assert_eq!(q(300.0), 128.0);
        assert_eq!(q(3.0), 4.0);
        assert_eq!(q(-0.011), -2f64.powi(-7));
        assert_eq!(q(2f64.powi(-8)), 0.0);
        assert_eq!(q(0.0), 0.0);
        assert_eq!(q(-0.0), 0.0);
        assert!(quantize_scalar(f64::NAN, b5()).is_err());
        assert!(quantize_scalar(f64::INFINITY, b5()).is_err());
    }

    #[test]
    fn negative_zero_is_canonical() {
        let neg_zero = PotCode::from_bits(0b1_0000, b5()).unwrap();
        assert!(neg_zero.is_zero());
        assert!(!neg_zero.sign());
        assert_eq!(neg_zero, PotCode::zero(b5()));
        assert!(!quantize_scalar(-1e-9, b5()).unwrap().sign());
        assert!(PotCode::from_bits(0b10_0000, b5()).is_err());
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_scalar(PotCode::zero(b5())), 0.0);
        let code = PotCode::from_exponent(true, 3, b5()).unwrap();
        assert_eq!(dequantize_scalar(code), -8.0);
        for v in pot_values(b5()) {
            assert_eq!(dequantize_scalar(quantize_scalar(v, b5()).unwrap()), v);
        }
    }

    #[test]
    fn mul_examples() {
        let c = |neg, e| PotCode::from_exponent(neg, e, b5()).unwrap();
        assert_eq!(pot_mul(c(false, -1), c(false, 2)).value(), 2.0);
        let p = pot_mul(c(true, 3), c(false, -2));
        assert_eq!((p.exp_sum, p.sign), (1, true));
        assert_eq!(p.value(), -2.0);
        assert!(pot_mul(c(true, 3), PotCode::zero(b5())).is_zero);
    }

    #[test]
    fn shift_examples() {
        let c = |neg, e| PotCode::from_exponent(neg, e, BitWidth::B6).unwrap();
        assert_eq!(shift_mul(c(false, 3), 5).unwrap(), 40);
        assert_eq!(shift_mul(c(false, 0), -7).unwrap(), -7);
        assert_eq!(shift_mul(c(true, -2), 16).unwrap(), -4);
        assert_eq!(shift_mul(PotCode::zero(BitWidth::B6), 99).unwrap(), 0);
        assert!(shift_mul(c(false, 15), i64::MAX >> 4).is_err());
    }

    #[test]
    fn pow2_and_ldexp() {
        let mut up = 1.0f64;
        let mut down = 1.0f64;
        for k in 0..=1074 {
            if k <= 1023 {
                assert_eq!(pow2(k), up, "k={k}");
            }
            assert_eq!(pow2(-k), down, "k=-{k}");
            up *= 2.0;
            down /= 2.0;
        }
        assert_eq!(pow2(-1075), 0.0);
        assert_eq!(pow2(1024), f64::INFINITY);
        assert_eq!(ldexp(3.0, 4), 48.0);
        assert_eq!(ldexp(-3.0, -1), -1.5);
        assert_eq!(ldexp(1.0, -1074), f64::from_bits(1));
        assert_eq!(ldexp(0.0, 10), 0.0);
    }
}
