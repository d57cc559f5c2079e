//! Tensor-block quantization: adaptive layer-wise scaled PoT quantization,
//! weight bias correction and ratio clipping.

use crate::error::{Error, Result};
use crate::potnum::{self, BitWidth, PotCode};

/// Exponent value marking a zero element inside a [`QuantBlock`].
pub const ZERO_EXP: i8 = i8::MIN;

/// Serialized marker for the scale of an all-zero block.
pub const NULL_BETA: i16 = i16::MIN;

/// How the layer-wise scale exponent is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scaling {
    /// `beta = Round(log2(max|F| / 2^emax))`.
    Adaptive,
    /// Use a fixed exponent; `Fixed(0)` is plain PoT quantization.
    Fixed(i16),
}

/// A quantized tensor: per-element exponents and sign bits plus one shared
/// power-of-two scale `2^beta`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantBlock {
    exps: Vec<i8>,
    signs: Vec<bool>,
    beta: Option<i16>,
    bits: BitWidth,
    shape: Vec<usize>,
}

/// Per-block bookkeeping gathered while quantizing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuantStats {
    pub elements: usize,
    /// Elements that end up as the zero sentinel, including exact zeros.
    pub zeros: usize,
    /// Non-zero inputs flushed to the zero sentinel.
    pub flushed: usize,
    /// Elements saturated to the top exponent.
    pub clamped: usize,
}

impl QuantStats {
    pub fn zero_fraction(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.zeros as f64 / self.elements as f64
        }
    }
}

impl std::ops::AddAssign for QuantStats {
    fn add_assign(&mut self, rhs: Self) {
        self.elements += rhs.elements;
        self.zeros += rhs.zeros;
        self.flushed += rhs.flushed;
        self.clamped += rhs.clamped;
    }
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl QuantBlock {
    pub fn new(
        exps: Vec<i8>,
        signs: Vec<bool>,
        beta: Option<i16>,
        bits: BitWidth,
        shape: Vec<usize>,
    ) -> Result<Self> {
        let n = element_count(&shape);
        if exps.len() != n || signs.len() != n {
            return Err(Error::Input(format!(
                "block of shape {shape:?} needs {n} elements, got {} exponents and {} signs",
                exps.len(),
                signs.len()
            )));
        }
        let emax = bits.emax();
        if let Some(bad) = exps
            .iter()
            .find(|&&e| e != ZERO_EXP && !(-emax..=emax).contains(&i32::from(e)))
        {
            return Err(Error::Input(format!(
                "exponent {bad} outside [-{emax}, {emax}] for {bits} block"
            )));
        }
        if beta == Some(NULL_BETA) {
            return Err(Error::Input("beta collides with the null-scale marker".into()));
        }
        let mut block = QuantBlock {
            exps,
            signs,
            beta,
            bits,
            shape,
        };
        block.canonicalize();
        Ok(block)
    }

    /// A block of zero sentinels with a null scale.
    pub fn zeros(bits: BitWidth, shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        QuantBlock {
            exps: vec![ZERO_EXP; n],
            signs: vec![false; n],
            beta: None,
            bits,
            shape,
        }
    }

    fn canonicalize(&mut self) {
        for (e, s) in self.exps.iter().zip(self.signs.iter_mut()) {
            if *e == ZERO_EXP {
                *s = false;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn exps(&self) -> &[i8] {
        &self.exps
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn beta(&self) -> Option<i16> {
        self.beta
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn code(&self, i: usize) -> PotCode {
        match self.exps[i] {
            ZERO_EXP => PotCode::zero(self.bits),
            e => PotCode::from_exponent(self.signs[i], i32::from(e), self.bits)
                .expect("block exponents are validated on construction"),
        }
    }

    pub fn zero_count(&self) -> usize {
        self.exps.iter().filter(|&&e| e == ZERO_EXP).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.zero_count() as f64 / self.len() as f64
        }
    }

    /// Reinterprets the element order under a new shape of equal size.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if element_count(&shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Transpose of a 2-D block. Only exponents and sign bits move.
    pub fn transpose(&self) -> Result<Self> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Input(format!(
                "transpose needs a 2-D block, got shape {:?}",
                self.shape
            )));
        };
        let mut exps = vec![ZERO_EXP; self.len()];
        let mut signs = vec![false; self.len()];
        for r in 0..rows {
            for c in 0..cols {
                exps[c * rows + r] = self.exps[r * cols + c];
                signs[c * rows + r] = self.signs[r * cols + c];
            }
        }
        Ok(QuantBlock {
            exps,
            signs,
            beta: self.beta,
            bits: self.bits,
            shape: vec![cols, rows],
        })
    }

    /// Element-wise `s * 2^(e + beta)`.
    pub fn dequantize(&self) -> Vec<f64> {
        let Some(beta) = self.beta else {
            return vec![0.0; self.len()];
        };
        let beta = i32::from(beta);
        self.exps
            .iter()
            .zip(&self.signs)
            .map(|(&e, &s)| {
                if e == ZERO_EXP {
                    0.0
                } else {
                    let v = potnum::pow2(i32::from(e) + beta);
                    if s {
                        -v
                    } else {
                        v
                    }
                }
            })
            .collect()
    }

    /// Little-endian wire form: bit-width, rank, dims (u64), beta (i16),
    /// exponents as signed bytes, then sign bits packed LSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.shape.len() + self.len() * 9 / 8 + 4);
        out.push(self.bits.bits());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.beta.unwrap_or(NULL_BETA).to_le_bytes());
        out.extend(self.exps.iter().map(|&e| e as u8));
        for chunk in self.signs.chunks(8) {
            let byte = chunk
                .iter()
                .enumerate()
                .fold(0u8, |acc, (i, &s)| acc | (u8::from(s) << i));
            out.push(byte);
        }
        out
    }

    /// Parses one block from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let truncated = || Error::Input("truncated quantized block".to_string());
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let slice = bytes.get(pos..pos + n).ok_or_else(truncated)?;
            pos += n;
            Ok(slice)
        };
        let bits = BitWidth::new(take(1)?[0])?;
        let rank = usize::from(take(1)?[0]);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| truncated())?);
        }
        let beta = i16::from_le_bytes(take(2)?.try_into().unwrap());
        let n = element_count(&shape);
        let exps: Vec<i8> = take(n)?.iter().map(|&b| b as i8).collect();
        let packed = take(n.div_ceil(8))?;
        let signs = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1 == 1).collect();
        let beta = (beta != NULL_BETA).then_some(beta);
        let block = QuantBlock::new(exps, signs, beta, bits, shape)?;
        Ok((block, pos))
    }
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Input(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// `alpha = max|F| / 2^emax`, computed as an exponent adjustment.
pub fn compute_alpha(values: &[f64], bits: BitWidth) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("cannot scale an empty tensor".into()));
    }
    check_finite(values)?;
    Ok(potnum::ldexp(max_abs(values), -bits.emax()))
}

/// `beta = Round(log2(alpha))`; `None` marks the null scale of an all-zero
/// block (alpha zero or subnormal).
pub fn compute_beta(alpha: f64) -> Option<i32> {
    potnum::round_log2(alpha)
}

/// Adaptive layer-wise scaled PoT quantization.
pub fn als_potq(values: &[f64], shape: &[usize], bits: BitWidth) -> Result<QuantBlock> {
    quantize_block(values, shape, bits, Scaling::Adaptive).map(|(block, _)| block)
}

/// Quantizes `values` into a block, returning the block and its statistics.
///
/// Each element's binary exponent is offset by `-beta` with one integer
/// addition and then rounded by a mantissa comparison; no element is ever
/// multiplied. Subnormal inputs flush to zero.
pub fn quantize_block(
    values: &[f64],
    shape: &[usize],
    bits: BitWidth,
    scaling: Scaling,
) -> Result<(QuantBlock, QuantStats)> {
    if values.is_empty() {
        return Err(Error::Input("cannot quantize an empty tensor".into()));
    }
    if element_count(shape) != values.len() {
        return Err(Error::Input(format!(
            "shape {shape:?} does not match {} values",
            values.len()
        )));
    }
    check_finite(values)?;
    let emax = bits.emax();
    let beta = match scaling {
        Scaling::Adaptive => compute_beta(compute_alpha(values, bits)?).map(|b| b as i16),
        Scaling::Fixed(b) => Some(b),
    };
    let mut stats = QuantStats {
        elements: values.len(),
        ..QuantStats::default()
    };
    let Some(beta) = beta else {
        stats.zeros = values.len();
        stats.flushed = values.iter().filter(|v| **v != 0.0).count();
        return Ok((QuantBlock::zeros(bits, shape.to_vec()), stats));
    };
    let offset = i32::from(beta);
    let mut exps = Vec::with_capacity(values.len());
    let mut signs = Vec::with_capacity(values.len());
    for &v in values {
        let scaled = potnum::round_log2(v).map(|e| e - offset);
        match scaled.and_then(|e| potnum::clamp_exponent(e, emax).map(|c| (e, c))) {
            Some((raw, e)) => {
                if raw > emax {
                    stats.clamped += 1;
                }
                exps.push(e as i8);
                signs.push(v.is_sign_negative());
            }
            None => {
                stats.zeros += 1;
                if v != 0.0 {
                    stats.flushed += 1;
                }
                exps.push(ZERO_EXP);
                signs.push(false);
            }
        }
    }
    let block = QuantBlock {
        exps,
        signs,
        beta: Some(beta),
        bits,
        shape: shape.to_vec(),
    };
    Ok((block, stats))
}

/// Compensated (Neumaier) sum.
pub(crate) fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `W - mean(W)`.
pub fn weight_bias_correction(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::Input("weight bias correction of an empty tensor".into()));
    }
    let mean = neumaier_sum(weights.iter().copied()) / weights.len() as f64;
    Ok(weights.iter().map(|w| w - mean).collect())
}

/// Clipping ratio `gamma` in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ClipParam(f64);

impl ClipParam {
    pub const IDENTITY: ClipParam = ClipParam(1.0);

    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma <= 1.0 {
            Ok(ClipParam(gamma))
        } else {
            Err(Error::Config(format!("clipping ratio {gamma} outside (0, 1]")))
        }
    }

    pub fn gamma(self) -> f64 {
        self.0
    }
}

impl Default for ClipParam {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Which elements were clamped by [`ratio_clip`], and the `max|A|` it used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipMask {
    clipped: Vec<bool>,
    max_abs: f64,
}

impl ClipMask {
    /// A mask with nothing clipped.
    pub fn none(len: usize, max_abs: f64) -> Self {
        ClipMask {
            clipped: vec![false; len],
            max_abs,
        }
    }

    pub fn len(&self) -> usize {
        self.clipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clipped.is_empty()
    }

    pub fn is_clipped(&self, i: usize) -> bool {
        self.clipped[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.clipped
    }

    pub fn clipped_count(&self) -> usize {
        self.clipped.iter().filter(|c| **c).count()
    }

    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }
}

/// Clamp every element to `[-max|A| * gamma, max|A| * gamma]`.
pub fn ratio_clip(values: &[f64], gamma: ClipParam) -> Result<(Vec<f64>, ClipMask)> {
    if values.is_empty() {
        return Err(Error::Input("ratio clipping of an empty tensor".into()));
    }
    check_finite(values)?;
    let peak = max_abs(values);
    if gamma == ClipParam::IDENTITY {
        return Ok((values.to_vec(), ClipMask::none(values.len(), peak)));
    }
    let threshold = peak * gamma.gamma();
    let mut clipped = Vec::with_capacity(values.len());
    let out = values
        .iter()
        .map(|&a| {
            let c = a.clamp(-threshold, threshold);
            clipped.push(c != a);
            c
        })
        .collect();
    Ok((
        out,
        ClipMask {
            clipped,
            max_abs: peak,
        },
    ))
}
