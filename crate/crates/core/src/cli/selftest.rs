use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::energy::{builtin_profile, iteration_energy, OpCostTable, WorkloadSpec};
use crate::error::{Error, Result};
use crate::mfmac::{mf_dot, reference_dot, AccumulatorMode, MacEngine};
use crate::potnum::{dequantize_scalar, pot_mul, pot_values, quantize_scalar, BitWidth, PotCode};
use crate::quantizer::{QuantBlock, ZERO_EXP};

/// Outcome of one self-test suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<22} {}", self.name, self.detail)
    }
}

fn suite(name: &'static str, outcome: Result<String>) -> SuiteResult {
    match outcome {
        Ok(detail) => SuiteResult {
            name,
            passed: true,
            detail,
        },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(msg: String) -> Error {
    Error::Input(msg)
}

fn widths() -> impl Iterator<Item = BitWidth> {
    (3..=6).map(|b| BitWidth::new(b).expect("supported width"))
}

/// Every bit pattern decodes, re-encodes and re-quantizes to itself.
pub fn codec() -> Result<String> {
    let mut codes = 0;
    for w in widths() {
        let mut distinct = std::collections::BTreeSet::new();
        for pattern in 0..(1u16 << w.bits()) {
            let code = PotCode::from_bits(pattern as u8, w)?;
            let value = dequantize_scalar(code);
            distinct.insert(value.to_bits());
            let back = quantize_scalar(value, w)?;
            if back != code || PotCode::from_bits(code.to_bits(), w)? != code {
                return Err(fail(format!("{w} pattern {pattern:#b} does not round-trip")));
            }
            codes += 1;
        }
        let expected = (1usize << w.bits()) - 1;
        if distinct.len() != expected || pot_values(w).len() != expected {
            return Err(fail(format!(
                "{w}: {} distinct values, expected {expected}",
                distinct.len()
            )));
        }
    }
    Ok(format!("{codes} patterns over 3-6 bits"))
}

/// All nonzero 5-bit pairs: exponent add and sign XOR equal the real product.
pub fn product_table() -> Result<String> {
    let w = BitWidth::B5;
    let values: Vec<f64> = pot_values(w).into_iter().filter(|v| *v != 0.0).collect();
    let mut checked = 0;
    for &a in &values {
        for &b in &values {
            let p = pot_mul(quantize_scalar(a, w)?, quantize_scalar(b, w)?);
            if p.value() != a * b {
                return Err(fail(format!("{a} * {b} gave {}", p.value())));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} products exact"))
}

/// A random block with a random scale; about one element in eight is zero.
pub fn random_block(rng: &mut impl Rng, len: usize, bits: BitWidth) -> QuantBlock {
    let emax = bits.emax();
    let exps = (0..len)
        .map(|_| {
            if rng.random_ratio(1, 8) {
                ZERO_EXP
            } else {
                rng.random_range(-emax..=emax) as i8
            }
        })
        .collect();
    let signs = (0..len).map(|_| rng.random()).collect();
    let beta = rng.random_range(-30i16..=30);
    QuantBlock::new(exps, signs, Some(beta), bits, vec![len]).expect("valid random block")
}

/// MF-MAC dot products equal the compensated reference bit for bit.
pub fn oracle_equivalence(blocks: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..blocks {
        let len = rng.random_range(1..=1024);
        let wa = if rng.random() { BitWidth::B5 } else { BitWidth::B6 };
        let wb = if rng.random() { BitWidth::B5 } else { BitWidth::B6 };
        let (a, b) = (random_block(&mut rng, len, wa), random_block(&mut rng, len, wb));
        let got = mf_dot(&a, &b)?;
        let want = reference_dot(&a.dequantize(), &b.dequantize())?;
        if got.to_bits() != want.to_bits() {
            return Err(fail(format!("block {i} (len {len}): {got:e} != {want:e}")));
        }
    }
    Ok(format!("{blocks} random blocks bit-exact"))
}

/// The calibrated workload reproduces the FP32 baseline exactly.
pub fn calibration(table: &OpCostTable) -> Result<String> {
    let original = builtin_profile("original")?;
    let w = WorkloadSpec::calibrated("resnet50", crate::energy::RESNET50_FP32_JOULES, &original, table)?;
    let e = iteration_energy(&original, &w, table)?;
    let ours = iteration_energy(&builtin_profile("ours")?, &w, table)?;
    if (e.total - crate::energy::RESNET50_FP32_JOULES).abs() > 1e-9 {
        return Err(fail(format!("baseline closes at {} J", e.total)));
    }
    Ok(format!(
        "{:.4e} MACs, baseline {:.2} J, ours {:.3} J",
        w.fw_macs, e.total, ours.total
    ))
}

/// Nine maximal 5-bit products exceed a 32-bit accumulator at scale 2^-14;
/// the strict engine must saturate and say so.
pub fn strict32_saturation() -> Result<String> {
    let w = BitWidth::B5;
    let emax = w.emax() as i8;
    let top = |n| QuantBlock::new(vec![emax; n], vec![false; n], Some(0), w, vec![n]);
    let engine = MacEngine::new(AccumulatorMode::Strict32);
    let safe = engine.dot(&top(7)?, &top(7)?)?;
    if engine.census().saturations != 0 || safe != 7.0 * 2f64.powi(2 * i32::from(emax)) {
        return Err(fail("seven maximal products should fit".into()));
    }
    engine.dot(&top(9)?, &top(9)?)?;
    let saturations = engine.census().saturations;
    if saturations == 0 {
        return Err(fail("nine maximal products did not saturate".into()));
    }
    Ok(format!("{saturations} saturation(s) reported as expected"))
}

pub fn run_all(table: &OpCostTable) -> Vec<SuiteResult> {
    vec![
        suite("codec", codec()),
        suite("product-table", product_table()),
        suite("oracle-equivalence", oracle_equivalence(500, 0x5eed)),
        suite("energy-calibration", calibration(table)),
        suite("strict32-saturation", strict32_saturation()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(&OpCostTable::default()) {
            assert!(r.passed, "{r}");
        }
    }
}
