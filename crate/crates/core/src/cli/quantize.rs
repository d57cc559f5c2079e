use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::potnum::BitWidth;
use crate::quantizer::{quantize_block, Scaling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SampleKind {
    Normal,
    Lognormal,
    Uniform,
    Zeros,
}

/// Seeded sample: standard normal, log-normal(0, 1) with random signs,
/// uniform on `[-1, 1]`, or all zeros.
pub fn generate(kind: SampleKind, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lognormal = LogNormal::new(0.0, 1.0).expect("valid log-normal");
    (0..count)
        .map(|_| match kind {
            SampleKind::Normal => rng.sample(StandardNormal),
            SampleKind::Lognormal => {
                let v: f64 = lognormal.sample(&mut rng);
                if rng.random::<bool>() { v } else { -v }
            }
            SampleKind::Uniform => rng.random_range(-1.0..=1.0),
            SampleKind::Zeros => 0.0,
        })
        .collect()
}

/// Reads numbers separated by whitespace or commas.
pub fn read_values(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_values(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn parse_values(text: &str) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            let v: f64 = tok
                .parse()
                .map_err(|_| format!("line {}: `{tok}` is not a number", line_no + 1))?;
            if !v.is_finite() {
                return Err(format!("line {}: non-finite value `{tok}`", line_no + 1));
            }
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err("no values".into());
    }
    Ok(out)
}

/// Side-by-side counts of original and dequantized values over shared bins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub original: Vec<usize>,
    pub dequantized: Vec<usize>,
}

impl Histogram {
    pub fn new(original: &[f64], dequantized: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Input("histogram needs at least one bin".into()));
        }
        let all = original.iter().chain(dequantized);
        let lo = all.clone().fold(f64::INFINITY, |m, v| m.min(*v));
        let hi = all.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let bin = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
        let count = |values: &[f64]| {
            let mut c = vec![0; bins];
            values.iter().for_each(|&v| c[bin(v)] += 1);
            c
        };
        Ok(Histogram {
            edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
            original: count(original),
            dequantized: count(dequantized),
        })
    }
}

impl fmt::Display for Histogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const BAR: usize = 30;
        let peak = self.original.iter().chain(&self.dequantized).copied().max().unwrap_or(1).max(1);
        let bar = |n: usize| (n * BAR).div_ceil(peak);
        writeln!(f, "{:>23}  {:<w$}  dequantized", "bin", "original", w = BAR + 8)?;
        for i in 0..self.original.len() {
            let (o, d) = (self.original[i], self.dequantized[i]);
            writeln!(
                f,
                "[{:>9.3e},{:>9.3e})  {:>7} {:<BAR$}  {:>7} {}",
                self.edges[i],
                self.edges[i + 1],
                o,
                "#".repeat(bar(o)),
                d,
                "#".repeat(bar(d)),
            )?;
        }
        Ok(())
    }
}

/// Summary of quantizing one tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantReport {
    pub bits: u8,
    pub elements: usize,
    pub beta: Option<i16>,
    pub zero_fraction: f64,
    pub flushed_fraction: f64,
    pub clamp_fraction: f64,
    /// Over elements that are neither zero sentinels nor clamped.
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    /// Mean absolute error divided by `max|x|`.
    pub mean_error_full_scale: f64,
    pub histogram: Option<Histogram>,
}

pub fn quantize_report(values: &[f64], bits: BitWidth, scaling: Scaling, hist_bins: Option<usize>) -> Result<QuantReport> {
    let (block, stats) = quantize_block(values, &[values.len()], bits, scaling)?;
    let deq = block.dequantize();
    let emax = bits.emax();
    let top = block.beta().map(|b| i32::from(b) + emax);
    let mut max_rel = 0.0f64;
    let mut rel_sum = 0.0;
    let mut counted = 0usize;
    let mut abs_sum = 0.0;
    for (i, (&x, &q)) in values.iter().zip(&deq).enumerate() {
        abs_sum += (x - q).abs();
        let clamped = top.is_some_and(|t| block.code(i).exponent() == Some(emax) && x.abs() > crate::potnum::ldexp(std::f64::consts::SQRT_2, t));
        if block.exps()[i] == crate::quantizer::ZERO_EXP || clamped {
            continue;
        }
        let rel = ((x - q) / x).abs();
        max_rel = max_rel.max(rel);
        rel_sum += rel;
        counted += 1;
    }
    let n = values.len() as f64;
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(QuantReport {
        bits: bits.bits(),
        elements: values.len(),
        beta: block.beta(),
        zero_fraction: stats.zeros as f64 / n,
        flushed_fraction: stats.flushed as f64 / n,
        clamp_fraction: stats.clamped as f64 / n,
        max_relative_error: max_rel,
        mean_relative_error: if counted == 0 { 0.0 } else { rel_sum / counted as f64 },
        mean_error_full_scale: if max_abs > 0.0 { abs_sum / n / max_abs } else { 0.0 },
        histogram: hist_bins.map(|b| Histogram::new(values, &deq, b)).transpose()?,
    })
}

impl fmt::Display for QuantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bits                   {}", self.bits)?;
        writeln!(f, "elements               {}", self.elements)?;
        match self.beta {
            Some(b) => writeln!(f, "beta                   {b}")?,
            None => writeln!(f, "beta                   null (all zero)")?,
        }
        writeln!(f, "zero sentinel fraction {:.6}", self.zero_fraction)?;
        writeln!(f, "flushed fraction       {:.6}", self.flushed_fraction)?;
        writeln!(f, "clamp fraction         {:.6}", self.clamp_fraction)?;
        writeln!(f, "max relative error     {:.6}", self.max_relative_error)?;
        writeln!(f, "mean relative error    {:.6}", self.mean_relative_error)?;
        writeln!(f, "mean error / max|x|    {:.6}", self.mean_error_full_scale)?;
        if let Some(h) = &self.histogram {
            write!(f, "\n{h}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_sample_respects_error_bound() {
        let v = generate(SampleKind::Normal, 20_000, 1);
        let r = quantize_report(&v, BitWidth::B5, Scaling::Adaptive, None).unwrap();
        assert!(r.max_relative_error <= std::f64::consts::SQRT_2 - 1.0);
        assert!(r.max_relative_error > 0.4);
    }

    #[test]
    fn zeros_are_all_sentinels() {
        let v = generate(SampleKind::Zeros, 100, 0);
        let r = quantize_report(&v, BitWidth::B5, Scaling::Adaptive, Some(4)).unwrap();
        assert_eq!(r.zero_fraction, 1.0);
        assert_eq!(r.beta, None);
        assert_eq!(r.histogram.unwrap().original.iter().sum::<usize>(), 100);
    }

    #[test]
    fn lognormal_beats_uniform_at_full_scale() {
        let ln = generate(SampleKind::Lognormal, 10_000, 2);
        let un = generate(SampleKind::Uniform, 10_000, 2);
        let rl = quantize_report(&ln, BitWidth::B5, Scaling::Adaptive, None).unwrap();
        let ru = quantize_report(&un, BitWidth::B5, Scaling::Adaptive, None).unwrap();
        assert!(rl.mean_error_full_scale < ru.mean_error_full_scale);
    }

    #[test]
    fn fixed_scale_reports_clamping() {
        let r = quantize_report(&[1000.0, 1.0], BitWidth::B5, Scaling::Fixed(0), None).unwrap();
        assert_eq!(r.clamp_fraction, 0.5);
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn parses_text_values() {
        assert_eq!(parse_values("1, 2\n# note\n-3.5 4e-2").unwrap(), vec![1.0, 2.0, -3.5, 0.04]);
        assert!(parse_values("1 x").unwrap_err().contains("line 1"));
        assert!(parse_values("").is_err());
    }
}
