//! Multiplication-free multiply-accumulate over [`QuantBlock`]s.
//!
//! Each product of two PoT elements is one small-integer exponent addition and
//! one sign XOR. The product `2^(e + e')` is materialized as a single set bit
//! at position `e + e' + emaxA + emaxB` of a fixed-point integer and summed into
//! the accumulator `z`. The final result is `z` shifted by
//! `betaA + betaB - emaxA - emaxB`.

use std::ops::{Add, AddAssign, Sub};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potnum::{self, BitWidth};
use crate::quantizer::{self, QuantBlock, QuantStats, Scaling, ZERO_EXP};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccumulatorMode {
    /// 128-bit accumulation; exact for every supported width and length.
    #[default]
    Wide,
    /// 32-bit saturating accumulation with saturation accounting.
    Strict32,
}

impl std::str::FromStr for AccumulatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(AccumulatorMode::Wide),
            "strict32" => Ok(AccumulatorMode::Strict32),
            other => Err(Error::Config(format!(
                "unknown accumulator mode `{other}` (expected wide or strict32)"
            ))),
        }
    }
}

/// Accumulator settings for one pair of operand widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccumulatorConfig {
    pub mode: AccumulatorMode,
    /// Fixed-point position of accumulated products, `-(emaxA + emaxB)`.
    pub scale_exp: i32,
}

impl AccumulatorConfig {
    pub fn new(mode: AccumulatorMode, a: BitWidth, b: BitWidth) -> Self {
        AccumulatorConfig {
            mode,
            scale_exp: -(a.emax() + b.emax()),
        }
    }
}

/// Operation counts gathered by a [`MacEngine`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCensus {
    /// Element pairs visited by MF-MAC dot products.
    pub mac_slots: u64,
    /// Exponent additions (pairs where neither side is the zero sentinel).
    pub small_int_adds: u64,
    pub xors: u64,
    pub accumulations: u64,
    /// One per produced output element.
    pub final_shifts: u64,
    /// Exponent-field additions applying the layer-wise scale.
    pub exponent_scalings: u64,
    pub roundings: u64,
    /// Accumulator saturation events (strict32 only).
    pub saturations: u64,
    /// General multiplications in MAC inner loops (full-precision path only).
    pub multiplies: u64,
    /// Full-precision accumulations in MAC inner loops.
    pub fp_adds: u64,
    /// Per-tensor scalar arithmetic outside MAC loops (means, thresholds).
    pub scalar_ops: u64,
}

impl Add for OpCensus {
    type Output = OpCensus;

    fn add(mut self, rhs: OpCensus) -> OpCensus {
        self += rhs;
        self
    }
}

impl AddAssign for OpCensus {
    fn add_assign(&mut self, rhs: OpCensus) {
        self.mac_slots += rhs.mac_slots;
        self.small_int_adds += rhs.small_int_adds;
        self.xors += rhs.xors;
        self.accumulations += rhs.accumulations;
        self.final_shifts += rhs.final_shifts;
        self.exponent_scalings += rhs.exponent_scalings;
        self.roundings += rhs.roundings;
        self.saturations += rhs.saturations;
        self.multiplies += rhs.multiplies;
        self.fp_adds += rhs.fp_adds;
        self.scalar_ops += rhs.scalar_ops;
    }
}

impl Sub for OpCensus {
    type Output = OpCensus;

    fn sub(self, rhs: OpCensus) -> OpCensus {
        OpCensus {
            mac_slots: self.mac_slots - rhs.mac_slots,
            small_int_adds: self.small_int_adds - rhs.small_int_adds,
            xors: self.xors - rhs.xors,
            accumulations: self.accumulations - rhs.accumulations,
            final_shifts: self.final_shifts - rhs.final_shifts,
            exponent_scalings: self.exponent_scalings - rhs.exponent_scalings,
            roundings: self.roundings - rhs.roundings,
            saturations: self.saturations - rhs.saturations,
            multiplies: self.multiplies - rhs.multiplies,
            fp_adds: self.fp_adds - rhs.fp_adds,
            scalar_ops: self.scalar_ops - rhs.scalar_ops,
        }
    }
}

struct Operand<'a> {
    exps: &'a [i8],
    signs: &'a [bool],
}

struct DotOutcome {
    value: f64,
    active: u64,
    saturations: u64,
}

fn dot_wide(a: Operand<'_>, b: Operand<'_>, offset: i32) -> (i128, u64) {
    let mut z: i128 = 0;
    let mut active = 0u64;
    for i in 0..a.exps.len() {
        let (ea, eb) = (a.exps[i], b.exps[i]);
        if ea == ZERO_EXP || eb == ZERO_EXP {
            continue;
        }
        let exp_sum = i32::from(ea) + i32::from(eb);
        let term = 1i128 << (exp_sum + offset);
        if a.signs[i] ^ b.signs[i] {
            z -= term;
        } else {
            z += term;
        }
        active += 1;
    }
    (z, active)
}

/// One byte per element for the branch-free kernel: the exponent biased by
/// `emax` in the low five bits, a dead flag for the zero sentinel and the sign
/// in the top bit. A pair's shift is the sum of both low fields.
fn pack_lanes(block: &QuantBlock) -> Vec<u8> {
    let emax = block.bits().emax();
    block
        .exps()
        .iter()
        .zip(block.signs())
        .map(|(&e, &s)| {
            let sign = u8::from(s) << 7;
            if e == ZERO_EXP {
                sign | DEAD
            } else {
                sign | (i32::from(e) + emax) as u8
            }
        })
        .collect()
}

const DEAD: u8 = 0x40;
const SHIFT_MASK: u8 = 0x1f;

/// True when `k` products of at most `2^max_shift` cannot overflow an `i64`.
fn fits_i64(max_shift: i32, k: usize) -> bool {
    let k_bits = usize::BITS - k.leading_zeros();
    max_shift + k_bits as i32 <= 62
}

#[inline(always)]
fn dot_lanes_body(a: &[u8], b: &[u8]) -> (i64, u64) {
    let mut z = 0i64;
    let mut active = 0i64;
    for (&x, &y) in a.iter().zip(b) {
        let live = i64::from((x | y) & DEAD == 0);
        let shift = u32::from(x & SHIFT_MASK) + u32::from(y & SHIFT_MASK);
        let mask = -i64::from((x ^ y) >> 7);
        z = z.wrapping_add(((live << shift) ^ mask).wrapping_sub(mask));
        active += live;
    }
    (z, active as u64)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_lanes_avx2(a: &[u8], b: &[u8]) -> (i64, u64) {
    dot_lanes_body(a, b)
}

// Callers guarantee via `fits_i64` that the sums cannot overflow.
fn dot_lanes(a: &[u8], b: &[u8]) -> (i64, u64) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { dot_lanes_avx2(a, b) };
    }
    dot_lanes_body(a, b)
}

fn dot_strict32(a: Operand<'_>, b: Operand<'_>, offset: i32) -> (i32, u64, u64) {
    let mut z: i32 = 0;
    let mut active = 0u64;
    let mut saturations = 0u64;
    for i in 0..a.exps.len() {
        let (ea, eb) = (a.exps[i], b.exps[i]);
        if ea == ZERO_EXP || eb == ZERO_EXP {
            continue;
        }
        active += 1;
        let shift = i32::from(ea) + i32::from(eb) + offset;
        let negative = a.signs[i] ^ b.signs[i];
        // A single product may not fit either once mixed widths are involved.
        let term = if shift >= 31 {
            None
        } else {
            Some(1i32 << shift)
        };
        let next = term.and_then(|t| {
            if negative {
                z.checked_sub(t)
            } else {
                z.checked_add(t)
            }
        });
        z = match next {
            Some(v) => v,
            None => {
                saturations += 1;
                if negative {
                    i32::MIN
                } else {
                    i32::MAX
                }
            }
        };
    }
    (z, active, saturations)
}

fn dot_raw(
    a: Operand<'_>,
    b: Operand<'_>,
    cfg: AccumulatorConfig,
    beta_sum: Option<i32>,
) -> DotOutcome {
    let offset = -cfg.scale_exp;
    let (z, active, saturations) = match cfg.mode {
        AccumulatorMode::Wide => {
            let (z, active) = dot_wide(a, b, offset);
            (z as f64, active, 0)
        }
        AccumulatorMode::Strict32 => {
            let (z, active, sat) = dot_strict32(a, b, offset);
            (f64::from(z), active, sat)
        }
    };
    let value = match beta_sum {
        Some(shift) => potnum::ldexp(z, shift + cfg.scale_exp),
        None => 0.0,
    };
    DotOutcome {
        value,
        active,
        saturations,
    }
}

fn beta_sum(a: &QuantBlock, b: &QuantBlock) -> Option<i32> {
    Some(i32::from(a.beta()?) + i32::from(b.beta()?))
}

/// Executes MF-MAC operations and keeps a running [`OpCensus`].
///
/// The census is behind a mutex; each dot product or matrix row tallies
/// locally and merges once.
#[derive(Debug, Default)]
pub struct MacEngine {
    mode: AccumulatorMode,
    census: Mutex<OpCensus>,
}

impl MacEngine {
    pub fn new(mode: AccumulatorMode) -> Self {
        MacEngine {
            mode,
            census: Mutex::new(OpCensus::default()),
        }
    }

    pub fn mode(&self) -> AccumulatorMode {
        self.mode
    }

    /// Snapshot of the counts since the last reset.
    pub fn census(&self) -> OpCensus {
        *self.census.lock().unwrap()
    }

    pub fn reset_census(&self) {
        *self.census.lock().unwrap() = OpCensus::default();
    }

    pub fn record(&self, delta: OpCensus) {
        *self.census.lock().unwrap() += delta;
    }

    /// Quantizes a tensor, counting one exponent scaling and one rounding per
    /// element.
    pub fn quantize(
        &self,
        values: &[f64],
        shape: &[usize],
        bits: BitWidth,
        scaling: Scaling,
    ) -> Result<(QuantBlock, QuantStats)> {
        let out = quantizer::quantize_block(values, shape, bits, scaling)?;
        let n = values.len() as u64;
        self.record(OpCensus {
            exponent_scalings: n,
            roundings: n,
            scalar_ops: 1,
            ..OpCensus::default()
        });
        Ok(out)
    }

    pub fn dot(&self, qa: &QuantBlock, qb: &QuantBlock) -> Result<f64> {
        if qa.len() != qb.len() {
            return Err(Error::Input(format!(
                "dot product length mismatch: {} vs {}",
                qa.len(),
                qb.len()
            )));
        }
        let cfg = AccumulatorConfig::new(self.mode, qa.bits(), qb.bits());
        let out = dot_raw(
            Operand {
                exps: qa.exps(),
                signs: qa.signs(),
            },
            Operand {
                exps: qb.exps(),
                signs: qb.signs(),
            },
            cfg,
            beta_sum(qa, qb),
        );
        self.record(OpCensus {
            mac_slots: qa.len() as u64,
            small_int_adds: out.active,
            xors: out.active,
            accumulations: out.active,
            final_shifts: 1,
            saturations: out.saturations,
            ..OpCensus::default()
        });
        Ok(out.value)
    }

    /// `A (m x k) * B (k x n)`.
    pub fn matmul(&self, qa: &QuantBlock, qb: &QuantBlock) -> Result<Vec<f64>> {
        self.matmul_nt(qa, &qb.transpose()?)
    }

    /// `A (m x k) * B^T` where `B` is stored as `n x k`; every output element
    /// is one dot product of two contiguous rows.
    pub fn matmul_nt(&self, qa: &QuantBlock, qb_t: &QuantBlock) -> Result<Vec<f64>> {
        let (m, k) = matrix_dims(qa)?;
        let (n, k2) = matrix_dims(qb_t)?;
        if k != k2 {
            return Err(Error::Input(format!(
                "inner dimensions disagree: {m}x{k} times ({n}x{k2})^T"
            )));
        }
        let cfg = AccumulatorConfig::new(self.mode, qa.bits(), qb_t.bits());
        let betas = beta_sum(qa, qb_t);
        let mut out = vec![0.0; m * n];
        if k == 0 || n == 0 {
            return Ok(out);
        }
        let max_shift = 2 * (qa.bits().emax() + qb_t.bits().emax());
        let fast = (self.mode == AccumulatorMode::Wide && fits_i64(max_shift, k))
            .then(|| (pack_lanes(qa), pack_lanes(qb_t)));
        let scale = |z: f64| betas.map_or(0.0, |shift| potnum::ldexp(z, shift + cfg.scale_exp));
        let tally = out
            .par_chunks_mut(n)
            .enumerate()
            .map(|(i, row)| {
                let a = i * k..(i + 1) * k;
                let mut local = OpCensus::default();
                match &fast {
                    Some((la, lb)) => {
                        let ar = &la[a];
                        let col = |j: usize| &lb[j * k..(j + 1) * k];
                        for (jj, slot) in row.iter_mut().enumerate() {
                            let (z, active) = dot_lanes(ar, col(jj));
                            *slot = scale(z as f64);
                            local.small_int_adds += active;
                        }
                    }
                    None => {
                        for (j, slot) in row.iter_mut().enumerate() {
                            let b = j * k..(j + 1) * k;
                            let res = dot_raw(
                                Operand {
                                    exps: &qa.exps()[a.clone()],
                                    signs: &qa.signs()[a.clone()],
                                },
                                Operand {
                                    exps: &qb_t.exps()[b.clone()],
                                    signs: &qb_t.signs()[b],
                                },
                                cfg,
                                betas,
                            );
                            *slot = res.value;
                            local.small_int_adds += res.active;
                            local.saturations += res.saturations;
                        }
                    }
                }
                local.mac_slots = (n * k) as u64;
                local.xors = local.small_int_adds;
                local.accumulations = local.small_int_adds;
                local.final_shifts = n as u64;
                local
            })
            .reduce(OpCensus::default, |a, b| a + b);
        self.record(tally);
        Ok(out)
    }

    /// Full-precision `A (m x k) * B^T (n x k)`, counting its multiplies.
    pub fn fp_matmul_nt(
        &self,
        a: &[f64],
        b_t: &[f64],
        m: usize,
        k: usize,
        n: usize,
    ) -> Result<Vec<f64>> {
        if a.len() != m * k || b_t.len() != n * k {
            return Err(Error::Input(format!(
                "full-precision matmul operands do not match {m}x{k} and {n}x{k}"
            )));
        }
        let mut out = vec![0.0; m * n];
        if k > 0 && n > 0 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                let ar = &a[i * k..(i + 1) * k];
                for (j, slot) in row.iter_mut().enumerate() {
                    let br = &b_t[j * k..(j + 1) * k];
                    *slot = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            });
        }
        let macs = (m * n * k) as u64;
        self.record(OpCensus {
            mac_slots: macs,
            multiplies: macs,
            fp_adds: macs,
            ..OpCensus::default()
        });
        Ok(out)
    }
}

fn matrix_dims(block: &QuantBlock) -> Result<(usize, usize)> {
    match block.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Input(format!(
            "matrix operand must be 2-D, got shape {other:?}"
        ))),
    }
}

/// Wide-accumulator MF-MAC dot product without census bookkeeping.
pub fn mf_dot(qa: &QuantBlock, qb: &QuantBlock) -> Result<f64> {
    MacEngine::new(AccumulatorMode::Wide).dot(qa, qb)
}

/// Wide-accumulator MF-MAC matrix product without census bookkeeping.
pub fn mf_matmul(qa: &QuantBlock, qb: &QuantBlock) -> Result<Vec<f64>> {
    MacEngine::new(AccumulatorMode::Wide).matmul(qa, qb)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Compensated full-precision inner product (error-free products via FMA,
/// error-free summation steps, one final rounding). Used as the ground-truth
/// oracle for MF-MAC results.
pub fn reference_dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "reference dot length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let p_err = x.mul_add(y, -p);
        let (s, s_err) = two_sum(sum, p);
        sum = s;
        comp += s_err + p_err;
    }
    Ok(sum + comp)
}

/// Row-major reference `A (m x k) * B (k x n)` built from [`reference_dot`].
pub fn reference_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Result<Vec<f64>> {
    if a.len() != m * k || b.len() != k * n {
        return Err(Error::Input("reference matmul operand sizes".into()));
    }
    let mut out = Vec::with_capacity(m * n);
    let mut col = vec![0.0; k];
    for i in 0..m {
        for j in 0..n {
            for (t, c) in col.iter_mut().enumerate() {
                *c = b[t * n + j];
            }
            out.push(reference_dot(&a[i * k..(i + 1) * k], &col)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::als_potq;

    const B5: BitWidth = BitWidth::B5;

    fn q(v: &[f64]) -> QuantBlock {
        als_potq(v, &[v.len()], B5).unwrap()
    }

    #[test]
    fn dot_example() {
        assert_eq!(mf_dot(&q(&[1.0, 2.0]), &q(&[4.0, 0.5])).unwrap(), 5.0);
        assert_eq!(mf_dot(&q(&[1.0, 2.0]), &q(&[0.0, 0.0])).unwrap(), 0.0);
        assert!(mf_dot(&q(&[1.0]), &q(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn reference_examples() {
        assert_eq!(reference_dot(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 32.0);
        assert_eq!(reference_dot(&[], &[]).unwrap(), 0.0);
        assert!(reference_dot(&[1.0], &[]).is_err());
        // Plain summation loses the 1.0 here.
        let a = [1e16, 1.0, -1e16];
        assert_eq!(reference_dot(&a, &[1.0, 1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn census_counts_one_dot() {
        let engine = MacEngine::new(AccumulatorMode::Wide);
        let a = q(&[1.0, -2.0, 4.0, 0.5]);
        engine.dot(&a, &a).unwrap();
        let c = engine.census();
        assert_eq!(
            (c.mac_slots, c.small_int_adds, c.xors, c.accumulations, c.final_shifts),
            (4, 4, 4, 4, 1)
        );
        assert_eq!(c.multiplies, 0);
        engine.reset_census();
        engine.dot(&a, &q(&[0.0; 4])).unwrap();
        assert_eq!(engine.census().small_int_adds, 0);
    }

    #[test]
    fn census_counts_dense_matmul() {
        let engine = MacEngine::default();
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i + 1) as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|i| -((i + 1) as f64)).collect();
        let qa = als_potq(&a, &[m, k], B5).unwrap();
        let qb = als_potq(&b, &[k, n], B5).unwrap();
        engine.matmul(&qa, &qb).unwrap();
        let c = engine.census();
        assert_eq!(c.small_int_adds, (m * n * k) as u64);
        assert_eq!(c.final_shifts, (m * n) as u64);
    }

    #[test]
    fn identity_matmul() {
        let id = als_potq(&[1.0, 0.0, 0.0, 1.0], &[2, 2], B5).unwrap();
        let x = als_potq(&[2.0, -4.0, 0.25, 8.0], &[2, 2], B5).unwrap();
        assert_eq!(mf_matmul(&id, &x).unwrap(), vec![2.0, -4.0, 0.25, 8.0]);
        assert_eq!(mf_matmul(&x, &id).unwrap(), vec![2.0, -4.0, 0.25, 8.0]);
        let bad = als_potq(&[1.0; 3], &[3, 1], B5).unwrap();
        assert!(mf_matmul(&x, &bad).is_err());
    }

    #[test]
    fn strict32_saturates_on_max_products() {
        // Each top-code product is 2^28 at scale 2^-14; eight of them reach
        // 2^31 and overflow i32.
        let top = vec![128.0; 9];
        let a = q(&top);
        let strict = MacEngine::new(AccumulatorMode::Strict32);
        let value = strict.dot(&a, &a).unwrap();
        assert!(strict.census().saturations >= 1);
        assert_eq!(value, potnum::ldexp(f64::from(i32::MAX), -14));
        assert_eq!(mf_dot(&a, &a).unwrap(), 9.0 * 128.0 * 128.0);
        let neg = q(&[-128.0; 9]);
        assert_eq!(strict.dot(&a, &neg).unwrap(), potnum::ldexp(f64::from(i32::MIN), -14));
    }

    #[test]
    fn mixed_width_fixed_point_position() {
        let cfg = AccumulatorConfig::new(AccumulatorMode::Wide, B5, BitWidth::B6);
        assert_eq!(cfg.scale_exp, -22);
        let a = q(&[3.0, -1.0]);
        let b = als_potq(&[1.0, 1024.0], &[2], BitWidth::B6).unwrap();
        let expected = reference_dot(&a.dequantize(), &b.dequantize()).unwrap();
        assert_eq!(mf_dot(&a, &b).unwrap(), expected);
    }
}
