//! Energy-cost model for linear-layer MACs.
//!
//! Unit costs are in picojoules per operation; iteration energies are in
//! joules.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfmac::OpCensus;

const PJ: f64 = 1e-12;

pub const FP32_MUL: &str = "fp32_mul";
pub const FP32_ADD: &str = "fp32_add";
pub const INT32_ADD: &str = "int32_add";
pub const INT8_ADD: &str = "int8_add";
pub const INT4_ADD: &str = "int4_add";
pub const SHIFT_INT32_4: &str = "shift_int32_4";
pub const XOR: &str = "xor";
pub const POT_ROUND: &str = "pot_round";

/// Unit energy per operation name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct OpCostTable {
    costs: BTreeMap<String, f64>,
}

impl Default for OpCostTable {
    /// 45 nm unit costs.
    fn default() -> Self {
        let costs = [
            (FP32_MUL, 3.7),
            ("int32_mul", 3.1),
            ("fp8_mul", 0.23),
            ("int8_mul", 0.19),
            ("int4_mul", 0.048),
            (FP32_ADD, 0.9),
            (INT32_ADD, 0.14),
            ("int16_add", 0.05),
            (INT8_ADD, 0.03),
            (INT4_ADD, 0.015),
            (SHIFT_INT32_4, 0.96),
            ("shift_int32_3", 0.72),
            ("shift_int4_3", 0.081),
            (XOR, 0.01),
            (POT_ROUND, 0.004),
        ];
        OpCostTable {
            costs: costs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

impl TryFrom<BTreeMap<String, f64>> for OpCostTable {
    type Error = Error;

    fn try_from(costs: BTreeMap<String, f64>) -> Result<Self> {
        for (op, &pj) in &costs {
            check_cost(op, pj)?;
        }
        Ok(OpCostTable { costs })
    }
}

impl From<OpCostTable> for BTreeMap<String, f64> {
    fn from(table: OpCostTable) -> Self {
        table.costs
    }
}

fn check_cost(op: &str, pj: f64) -> Result<()> {
    if pj > 0.0 && pj.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "cost of `{op}` must be positive and finite, got {pj}"
        )))
    }
}

impl OpCostTable {
    pub fn get(&self, op: &str) -> Result<f64> {
        self.costs
            .get(op)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown operation `{op}` in cost table")))
    }

    pub fn set(&mut self, op: &str, pj: f64) -> Result<()> {
        check_cost(op, pj)?;
        self.costs.insert(op.to_string(), pj);
        Ok(())
    }

    /// Applies overrides on top of this table.
    pub fn merged(&self, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut out = self.clone();
        for (op, &pj) in overrides {
            out.set(op, pj)?;
        }
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.costs.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn sum(&self, ops: &[String]) -> Result<f64> {
        ops.iter().try_fold(0.0, |acc, op| Ok(acc + self.get(op)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Fw,
    Bw,
}

/// A share of a pass's MACs executed with the given operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpMix {
    #[serde(default = "unit")]
    pub fraction: f64,
    pub ops: Vec<String>,
}

fn unit() -> f64 {
    1.0
}

impl OpMix {
    pub fn all(ops: &[&str]) -> Vec<OpMix> {
        vec![OpMix {
            fraction: 1.0,
            ops: ops.iter().map(|s| s.to_string()).collect(),
        }]
    }
}

/// Published per-iteration energies, kept for comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEnergy {
    pub fw: Option<f64>,
    pub bw: Option<f64>,
    pub total: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyField {
    Fw,
    Bw,
    Total,
}

/// Operations replacing the multiplication (plus the accumulation) in one MAC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodProfile {
    pub name: String,
    pub forward: Vec<OpMix>,
    pub backward: Vec<OpMix>,
    /// Per-MAC operations priced but reported outside the headline.
    #[serde(default)]
    pub side_ops: Vec<String>,
    /// Per-element quantizer operations.
    #[serde(default)]
    pub quant_element_ops: Vec<String>,
    /// Per-block quantizer operations.
    #[serde(default)]
    pub quant_block_ops: Vec<String>,
    #[serde(default)]
    pub reference: ReferenceEnergy,
    /// Reference fields the model is expected to reproduce.
    #[serde(default)]
    pub strict: Vec<EnergyField>,
    #[serde(default)]
    pub note: Option<String>,
}

impl MethodProfile {
    fn simple(name: &str, fw: &[&str], bw: &[&str], reference: [f64; 3]) -> Self {
        MethodProfile {
            name: name.into(),
            forward: OpMix::all(fw),
            backward: OpMix::all(bw),
            side_ops: Vec::new(),
            quant_element_ops: Vec::new(),
            quant_block_ops: Vec::new(),
            reference: ReferenceEnergy {
                fw: Some(reference[0]),
                bw: Some(reference[1]),
                total: Some(reference[2]),
            },
            strict: Vec::new(),
            note: None,
        }
    }

    fn strict(mut self, fields: &[EnergyField]) -> Self {
        self.strict = fields.to_vec();
        self
    }

    fn note(mut self, note: &str) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn mixes(&self, pass: Pass) -> &[OpMix] {
        match pass {
            Pass::Fw => &self.forward,
            Pass::Bw => &self.backward,
        }
    }

    pub fn validate(&self, table: &OpCostTable) -> Result<()> {
        for pass in [Pass::Fw, Pass::Bw] {
            let mixes = self.mixes(pass);
            if mixes.is_empty() {
                return Err(Error::Config(format!("method `{}` has no {pass:?} ops", self.name)));
            }
            let total: f64 = mixes.iter().map(|m| m.fraction).sum();
            if mixes.iter().any(|m| !(m.fraction > 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "method `{}`: {pass:?} fractions must be positive and sum to 1, got {total}",
                    self.name
                )));
            }
            for mix in mixes {
                table.sum(&mix.ops)?;
            }
        }
        table.sum(&self.side_ops)?;
        table.sum(&self.quant_element_ops)?;
        table.sum(&self.quant_block_ops)?;
        Ok(())
    }
}

/// All built-in method profiles, baseline first.
pub fn builtin_profiles() -> Vec<MethodProfile> {
    use EnergyField::{Bw, Fw, Total};
    let fp32 = [FP32_MUL, FP32_ADD];
    let deepshift = |name: &str| {
        let mut p = MethodProfile::simple(name, &[SHIFT_INT32_4, FP32_ADD], &fp32, [1.97, 5.84, 7.81]);
        p.backward = vec![
            OpMix {
                fraction: 0.5,
                ops: vec![FP32_MUL.into(), FP32_ADD.into()],
            },
            OpMix {
                fraction: 0.5,
                ops: vec![INT8_ADD.into(), FP32_ADD.into()],
            },
        ];
        p.strict(&[Fw])
    };
    let deepshift_q = deepshift("deepshift_q");
    let deepshift_ps = deepshift("deepshift_ps");
    let mut shiftaddnet = MethodProfile::simple(
        "shiftaddnet",
        &[SHIFT_INT32_4, INT32_ADD, FP32_ADD],
        &fp32,
        [2.45, 6.63, 9.08],
    );
    shiftaddnet.backward = vec![
        OpMix {
            fraction: 0.5,
            ops: vec!["int32_mul".into(), FP32_ADD.into()],
        },
        OpMix {
            fraction: 0.5,
            ops: vec![SHIFT_INT32_4.into(), FP32_ADD.into()],
        },
    ];
    let mut ours = MethodProfile::simple("ours", &[INT4_ADD, INT32_ADD], &[INT4_ADD, INT32_ADD], [0.16, 0.33, 0.49])
        .strict(&[Total]);
    ours.side_ops = vec![XOR.into()];
    ours.quant_element_ops = vec![INT8_ADD.into(), POT_ROUND.into()];
    ours.quant_block_ops = vec![SHIFT_INT32_4.into()];
    vec![
        MethodProfile::simple("original", &fp32, &fp32, [4.84, 9.69, 14.53]).strict(&[Fw, Bw, Total]),
        MethodProfile::simple("inq", &fp32, &fp32, [4.84, 9.69, 14.53])
            .note("inference forward with int32-4 shifts: 1.97 J"),
        MethodProfile::simple("lognn", &fp32, &fp32, [4.84, 9.69, 14.53])
            .note("inference: 0.95 J forward, 1.92 J backward, 2.87 J total"),
        MethodProfile::simple("shiftcnn", &fp32, &fp32, [4.84, 9.69, 14.53])
            .note("inference forward with int32-4 shifts: 1.70 J"),
        shiftaddnet.note("published row is not a closure of the unit costs"),
        MethodProfile::simple("addernet", &[FP32_ADD, FP32_ADD], &[FP32_ADD, FP32_ADD], [1.90, 3.80, 5.70])
            .strict(&[Total]),
        deepshift_q.note("backward mix is approximate"),
        deepshift_ps.note("backward mix is approximate"),
        MethodProfile::simple("s2fp8", &["fp8_mul", FP32_ADD], &["fp8_mul", FP32_ADD], [1.19, 2.38, 3.57])
            .strict(&[Fw])
            .note("quantizer multiplications not charged"),
        MethodProfile::simple("luq", &["int4_mul", FP32_ADD], &["shift_int4_3", FP32_ADD], [1.00, 2.06, 3.07])
            .strict(&[Fw])
            .note("quantizer multiplications not charged"),
        ours,
    ]
}

pub fn builtin_profile(name: &str) -> Result<MethodProfile> {
    builtin_profiles()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            let known: Vec<String> = builtin_profiles().into_iter().map(|p| p.name).collect();
            Error::Config(format!("unknown method `{name}` (known: {})", known.join(", ")))
        })
}

/// Energy of one MAC in the given pass, in pJ.
pub fn mac_cost(profile: &MethodProfile, pass: Pass, table: &OpCostTable) -> Result<f64> {
    profile
        .mixes(pass)
        .iter()
        .try_fold(0.0, |acc, m| Ok(acc + m.fraction * table.sum(&m.ops)?))
}

/// Quantizer cost for one `m x n` block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantOverhead {
    /// Per-element scaling and rounding, in pJ.
    pub elements_pj: f64,
    /// The single dequantizing shift, in pJ.
    pub block_pj: f64,
    pub per_number_pj: f64,
}

impl QuantOverhead {
    pub fn total_pj(&self) -> f64 {
        self.elements_pj + self.block_pj
    }
}

/// Quantizer cost of an `m x n` block under the standard quantizer ops.
pub fn quant_overhead(m: usize, n: usize, table: &OpCostTable) -> Result<QuantOverhead> {
    let ours = builtin_profile("ours")?;
    profile_quant_overhead(&ours, m, n, table)
}

pub fn profile_quant_overhead(
    profile: &MethodProfile,
    m: usize,
    n: usize,
    table: &OpCostTable,
) -> Result<QuantOverhead> {
    if m == 0 || n == 0 {
        return Err(Error::Input(format!("block {m}x{n} is empty")));
    }
    let count = (m * n) as f64;
    let elements_pj = table.sum(&profile.quant_element_ops)? * count;
    let block_pj = if profile.quant_element_ops.is_empty() {
        0.0
    } else {
        table.sum(&profile.quant_block_ops)?
    };
    Ok(QuantOverhead {
        elements_pj,
        block_pj,
        per_number_pj: (elements_pj + block_pj) / count,
    })
}

/// MAC counts of one training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    /// MACs of one forward pass over the whole batch.
    pub fw_macs: f64,
    #[serde(default = "two")]
    pub bw_multiplier: f64,
    /// Representative quantizer block shape for amortizing per-block ops.
    #[serde(default = "block_side")]
    pub block_m: usize,
    #[serde(default = "block_side")]
    pub block_n: usize,
    #[serde(default)]
    pub note: Option<String>,
}

fn two() -> f64 {
    2.0
}

fn block_side() -> usize {
    16
}

/// Published FP32 per-iteration energy of the reference workload, in J.
pub const RESNET50_FP32_JOULES: f64 = 14.53;
/// Published per-example MAC count of the reference workload.
pub const RESNET50_MACS_PER_EXAMPLE: f64 = 12.36e9;
pub const RESNET50_BATCH: f64 = 256.0;

impl WorkloadSpec {
    pub fn new(name: &str, fw_macs: f64) -> Result<Self> {
        let w = WorkloadSpec {
            name: name.into(),
            fw_macs,
            bw_multiplier: 2.0,
            block_m: 16,
            block_n: 16,
            note: None,
        };
        w.validate()?;
        Ok(w)
    }

    /// Back-solves the forward MAC count from a baseline total energy.
    pub fn calibrated(name: &str, total_joules: f64, baseline: &MethodProfile, table: &OpCostTable) -> Result<Self> {
        let per_iteration_pj =
            mac_cost(baseline, Pass::Fw, table)? + 2.0 * mac_cost(baseline, Pass::Bw, table)?;
        WorkloadSpec::new(name, total_joules / (per_iteration_pj * PJ))
    }

    /// The reference ImageNet ResNet-50 iteration, calibrated on the FP32 row
    /// under the default unit costs.
    pub fn resnet50() -> Result<Self> {
        let table = OpCostTable::default();
        let mut w = WorkloadSpec::calibrated("resnet50", RESNET50_FP32_JOULES, &builtin_profile("original")?, &table)?;
        let per_example = RESNET50_MACS_PER_EXAMPLE * RESNET50_BATCH;
        w.note = Some(format!(
            "FW MACs back-solved from the FP32 baseline; 12.36G MACs x batch 256 = {:.4e} vs 3 x FW = {:.4e}",
            per_example,
            3.0 * w.fw_macs
        ));
        Ok(w)
    }

    /// Dense MLP: `batch * sum(in * out)` forward MACs.
    pub fn mlp(sizes: &[usize], batch: usize) -> Result<Self> {
        let macs: usize = sizes.windows(2).map(|w| w[0] * w[1]).sum::<usize>() * batch;
        WorkloadSpec::new(&format!("mlp-{}", sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")), macs as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fw_macs > 0.0 && self.fw_macs.is_finite()) {
            return Err(Error::Config(format!(
                "workload `{}` must have a positive MAC count, got {}",
                self.name, self.fw_macs
            )));
        }
        if !(self.bw_multiplier >= 0.0) || self.block_m == 0 || self.block_n == 0 {
            return Err(Error::Config(format!(
                "workload `{}`: backward multiplier must be >= 0 and block dims positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn bw_macs(&self) -> f64 {
        self.fw_macs * self.bw_multiplier
    }
}

/// Per-iteration energy of one method, in J.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationEnergy {
    pub method: String,
    pub fw: f64,
    pub bw: f64,
    pub total: f64,
    /// Side operations (sign XOR), outside `total`.
    pub side: f64,
    /// Quantizer overhead, outside `total`.
    pub overhead: f64,
}

impl IterationEnergy {
    pub fn total_with_overhead(&self) -> f64 {
        self.total + self.overhead
    }
}

pub fn iteration_energy(
    profile: &MethodProfile,
    workload: &WorkloadSpec,
    table: &OpCostTable,
) -> Result<IterationEnergy> {
    workload.validate()?;
    profile.validate(table)?;
    let fw = workload.fw_macs * mac_cost(profile, Pass::Fw, table)? * PJ;
    let bw = workload.bw_macs() * mac_cost(profile, Pass::Bw, table)? * PJ;
    let macs = workload.fw_macs + workload.bw_macs();
    let side = macs * table.sum(&profile.side_ops)? * PJ;
    let overhead = if profile.quant_element_ops.is_empty() {
        0.0
    } else {
        let q = profile_quant_overhead(profile, workload.block_m, workload.block_n, table)?;
        macs * q.per_number_pj * PJ
    };
    Ok(IterationEnergy {
        method: profile.name.clone(),
        fw,
        bw,
        total: fw + bw,
        side,
        overhead,
    })
}

/// Combined per-MAC cost of a quantized method including amortized quantizer
/// overhead, in pJ.
pub fn combined_mac_cost(profile: &MethodProfile, workload: &WorkloadSpec, table: &OpCostTable) -> Result<f64> {
    let q = profile_quant_overhead(profile, workload.block_m, workload.block_n, table)?;
    Ok(mac_cost(profile, Pass::Fw, table)? + q.per_number_pj)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub workload: WorkloadSpec,
    pub rows: Vec<IterationEnergy>,
    pub references: Vec<ReferenceEnergy>,
    /// Savings relative to the first row, when there are at least two rows.
    pub savings: Option<Vec<Savings>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Savings {
    pub mac_only: f64,
    pub with_overhead: f64,
}

pub fn compare_report(
    profiles: &[MethodProfile],
    workload: &WorkloadSpec,
    table: &OpCostTable,
) -> Result<ComparisonReport> {
    if profiles.is_empty() {
        return Err(Error::Input("comparison needs at least one method".into()));
    }
    let rows = profiles
        .iter()
        .map(|p| iteration_energy(p, workload, table))
        .collect::<Result<Vec<_>>>()?;
    let savings = (rows.len() > 1).then(|| {
        let base = rows[0].total;
        rows.iter()
            .map(|r| Savings {
                mac_only: 1.0 - r.total / base,
                with_overhead: 1.0 - r.total_with_overhead() / base,
            })
            .collect()
    });
    Ok(ComparisonReport {
        workload: workload.clone(),
        rows,
        references: profiles.iter().map(|p| p.reference).collect(),
        savings,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

impl ComparisonReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "method", "fw_j", "bw_j", "total_j", "xor_j", "quant_overhead_j", "ref_fw_j", "ref_bw_j",
            "ref_total_j",
        ];
        if self.savings.is_some() {
            header.extend(["savings_mac_only", "savings_with_overhead"]);
        }
        let csv_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.rows.iter().enumerate() {
            let r = &self.references[i];
            let mut rec = vec![
                row.method.clone(),
                format!("{:.6}", row.fw),
                format!("{:.6}", row.bw),
                format!("{:.6}", row.total),
                format!("{:.6}", row.side),
                format!("{:.6}", row.overhead),
                opt(r.fw),
                opt(r.bw),
                opt(r.total),
            ];
            if let Some(s) = &self.savings {
                rec.push(format!("{:.6}", s[i].mac_only));
                rec.push(format!("{:.6}", s[i].with_overhead));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "workload {}: {:.4e} forward MACs, backward x{}",
            self.workload.name, self.workload.fw_macs, self.workload.bw_multiplier
        );
        let _ = write!(
            out,
            "{:<14} {:>9} {:>9} {:>9} {:>9} {:>10} {:>16}",
            "method", "FW (J)", "BW (J)", "Total (J)", "XOR (J)", "Quant (J)", "ref FW/BW/Total"
        );
        if self.savings.is_some() {
            let _ = write!(out, " {:>9} {:>10}", "saved", "saved+q");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let r = &self.references[i];
            let reference = if r.fw.is_none() && r.bw.is_none() && r.total.is_none() {
                "-".to_string()
            } else {
                format!("{}/{}/{}", opt(r.fw), opt(r.bw), opt(r.total))
            };
            let _ = write!(
                out,
                "{:<14} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>10.3} {:>16}",
                row.method, row.fw, row.bw, row.total, row.side, row.overhead, reference
            );
            if let Some(s) = &self.savings {
                let _ = write!(out, " {:>8.1}% {:>9.1}%", 100.0 * s[i].mac_only, 100.0 * s[i].with_overhead);
            }
            out.push('\n');
        }
        if let Some(note) = &self.workload.note {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

/// One model value set against its published counterpart.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub method: String,
    pub field: EnergyField,
    pub model: f64,
    pub reference: f64,
    pub relative_deviation: f64,
    pub strict: bool,
    pub within_tolerance: bool,
}

/// Checks every published value of `profiles`; only strict fields are meant
/// to gate.
pub fn reference_checks(
    profiles: &[MethodProfile],
    workload: &WorkloadSpec,
    table: &OpCostTable,
    tolerance: f64,
) -> Result<Vec<ReferenceCheck>> {
    let mut out = Vec::new();
    for p in profiles {
        let e = iteration_energy(p, workload, table)?;
        let fields = [
            (EnergyField::Fw, e.fw, p.reference.fw),
            (EnergyField::Bw, e.bw, p.reference.bw),
            (EnergyField::Total, e.total, p.reference.total),
        ];
        for (field, model, reference) in fields {
            let Some(reference) = reference else { continue };
            let dev = (model - reference) / reference;
            out.push(ReferenceCheck {
                method: p.name.clone(),
                field,
                model,
                reference,
                relative_deviation: dev,
                strict: p.strict.contains(&field),
                within_tolerance: dev.abs() <= tolerance,
            });
        }
    }
    Ok(out)
}

/// Energy of counted operations, in J.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CensusEnergy {
    /// Dense MAC slots priced as quantized MACs, or multiplies and adds of
    /// the full-precision path.
    pub mac: f64,
    pub xor: f64,
    pub quantizer: f64,
    pub total: f64,
}

/// Prices instrumented counts. Quantized MAC slots use `profile`'s forward
/// ops; full-precision multiplies and adds use the FP32 unit costs.
pub fn price_census(census: &OpCensus, profile: &MethodProfile, table: &OpCostTable) -> Result<CensusEnergy> {
    let quantized_mac_slots = census.mac_slots.saturating_sub(census.multiplies) as f64;
    let mac = quantized_mac_slots * mac_cost(profile, Pass::Fw, table)?
        + census.multiplies as f64 * table.get(FP32_MUL)?
        + census.fp_adds as f64 * table.get(FP32_ADD)?;
    let xor = census.xors as f64 * table.get(XOR)?;
    let quantizer = census.exponent_scalings as f64 * table.get(INT8_ADD)?
        + census.roundings as f64 * table.get(POT_ROUND)?
        + census.final_shifts as f64 * table.get(SHIFT_INT32_4)?;
    Ok(CensusEnergy {
        mac: mac * PJ,
        xor: xor * PJ,
        quantizer: quantizer * PJ,
        total: (mac + xor + quantizer) * PJ,
    })
}

/// Structured-text energy configuration: cost overrides, extra or replaced
/// method profiles and an optional workload.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub costs: BTreeMap<String, f64>,
    pub methods: Vec<MethodProfile>,
    pub workload: Option<WorkloadSpec>,
}

impl EnergyConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: EnergyConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let table = cfg.table().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        for p in &cfg.methods {
            p.validate(&table).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        }
        if let Some(w) = &cfg.workload {
            w.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn table(&self) -> Result<OpCostTable> {
        OpCostTable::default().merged(&self.costs)
    }

    /// Built-in profiles with this config's methods replacing or extending
    /// them by name.
    pub fn profiles(&self) -> Vec<MethodProfile> {
        let mut all = builtin_profiles();
        for m in &self.methods {
            match all.iter_mut().find(|p| p.name == m.name) {
                Some(slot) => *slot = m.clone(),
                None => all.push(m.clone()),
            }
        }
        all
    }
}
