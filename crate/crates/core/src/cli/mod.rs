//! Command-line surface: configuration, persistence and reports.

pub mod checkpoint;
pub mod config;
pub mod output;
pub mod quantize;
pub mod selftest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::energy::{
    builtin_profile, compare_report, iteration_energy, price_census, reference_checks,
    EnergyConfig, EnergyField, MethodProfile, OpCostTable, WorkloadSpec,
};
use crate::error::{Error, Result};
use crate::mfmac::{MacEngine, OpCensus};
use crate::nn::{Dataset, Precision, Trainer};
use crate::potnum::BitWidth;
use crate::quantizer::{QuantBlock, Scaling};

use checkpoint::Checkpoint;
use config::{resolve_config, RunConfig};
use output::{csv_text, metrics_row, read_metrics_rows, write_atomic, write_json, METRICS_COLUMNS};
use quantize::SampleKind;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATASET: i32 = 4;
pub const EXIT_FAULT: i32 = 5;
pub const EXIT_NOT_CONVERGED: i32 = 6;
pub const EXIT_CHECKPOINT: i32 = 7;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Dataset(_) => EXIT_DATASET,
        Error::TrainingFault { .. } => EXIT_FAULT,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mftrain", version, about = "Multiplication-free power-of-two training emulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a tensor and summarize the result.
    Quantize(QuantizeArgs),
    /// Train a network from a run configuration.
    Train(TrainArgs),
    /// Price training iterations for one or more methods.
    Energy(EnergyArgs),
    /// Set the energy model against published per-iteration figures.
    Compare(CompareArgs),
    /// Run the built-in arithmetic and calibration checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Text file of numbers separated by whitespace or commas.
    #[arg(long, conflicts_with = "generate")]
    pub input: Option<PathBuf>,
    /// Generate a seeded sample instead of reading one.
    #[arg(long, value_enum, default_value = "normal")]
    pub generate: SampleKind,
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub bits: u8,
    /// Quantize with a fixed scale exponent instead of the adaptive one.
    #[arg(long, allow_hyphen_values = true)]
    pub fixed_beta: Option<i16>,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
    /// Add a text histogram of original against dequantized values.
    #[arg(long)]
    pub stats: bool,
    #[arg(long, default_value_t = 20)]
    pub hist_bins: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration; defaults to train.toml in $MFTRAIN_CONFIG_DIR.
    pub config: Option<PathBuf>,
    /// Disable a technique: no_als_scaling, no_wbc or no_prc.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train in full precision instead.
    #[arg(long)]
    pub fp32_baseline: bool,
    /// Override the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    /// Cost overrides and extra methods; defaults to energy.toml in
    /// $MFTRAIN_CONFIG_DIR when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Methods to report, first one is the savings baseline (default: all).
    #[arg(long = "method")]
    pub methods: Vec<String>,
    /// `resnet50` or a workload file.
    #[arg(long, default_value = "resnet50")]
    pub workload: String,
    /// Forward MACs per iteration, replacing the workload's count.
    #[arg(long)]
    pub macs: Option<f64>,
    /// Price the operation census of a training run.
    #[arg(long)]
    pub from_census: Option<PathBuf>,
    /// Directory for report files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "resnet50")]
    pub workload: String,
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Energy configuration whose cost table is checked.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut out = String::new();
    let result = run(&cli, &mut out);
    print!("{out}");
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one command, appending its standard output to `out`.
pub fn run(cli: &Cli, out: &mut String) -> Result<i32> {
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Train(a) => cmd_train(a, out).map(|o| o.exit_code()),
        Command::Energy(a) => cmd_energy(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Selftest(a) => cmd_selftest(a, out),
    }
}

pub fn cmd_quantize(args: &QuantizeArgs, out: &mut String) -> Result<i32> {
    let values = match &args.input {
        Some(path) => quantize::read_values(path)?,
        None => quantize::generate(args.generate, args.count, args.seed),
    };
    if values.is_empty() {
        return Err(Error::Input("nothing to quantize".into()));
    }
    let bits = BitWidth::new(args.bits)?;
    let scaling = args.fixed_beta.map_or(Scaling::Adaptive, Scaling::Fixed);
    let report = quantize::quantize_report(&values, bits, scaling, args.stats.then_some(args.hist_bins))?;
    if args.json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Input(e.to_string()))?;
        let _ = writeln!(out, "{text}");
    } else {
        let _ = write!(out, "{report}");
    }
    Ok(0)
}

/// Operation counts of a training run, as written to `census.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensusFile {
    pub schema: u32,
    pub precision: Precision,
    pub steps: u64,
    pub epochs: usize,
    pub samples: u64,
    pub fw_macs_per_sample: u64,
    pub census: OpCensus,
}

impl CensusFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    /// Forward MACs per training sample times the samples seen.
    pub fn analytic_workload(&self) -> Result<WorkloadSpec> {
        WorkloadSpec::new("census", (self.fw_macs_per_sample * self.samples) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub epochs: Vec<Vec<String>>,
    pub converged: bool,
}

impl TrainOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            EXIT_NOT_CONVERGED
        }
    }
}

fn check_dataset(data: &Dataset, what: &str, inputs: usize, outputs: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset(format!("{what} set is empty")));
    }
    if data.sample_len() != inputs {
        return Err(Error::Dataset(format!(
            "{what} samples have {} features, network expects {inputs}",
            data.sample_len()
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= outputs) {
        return Err(Error::Dataset(format!(
            "{what} label {bad} out of range for {outputs} outputs"
        )));
    }
    Ok(())
}

fn quantized_snapshot(trainer: &Trainer) -> Result<Vec<QuantBlock>> {
    let scratch = MacEngine::default();
    trainer
        .net
        .params()
        .iter()
        .map(|p| p.quantize_weights(&scratch, trainer.config.ablation))
        .collect()
}

pub fn cmd_train(args: &TrainArgs, out: &mut String) -> Result<TrainOutcome> {
    let path = resolve_config(args.config.as_deref(), "train.toml")?.ok_or_else(|| {
        Error::Config(format!(
            "no run configuration given and no train.toml in ${}",
            config::CONFIG_DIR_ENV
        ))
    })?;
    let mut cfg = RunConfig::load(&path)?;
    for name in &args.ablate {
        cfg.train.ablation.apply(name)?;
    }
    if args.fp32_baseline {
        cfg.train.precision = Precision::Full;
    }
    if let Some(dir) = &args.out {
        cfg.output_dir = dir.clone();
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let (train, test) = cfg.data.load(base)?;
    let mut trainer = Trainer::new(&cfg.network, cfg.train.clone())?;
    let inputs: usize = cfg.network.input_shape.iter().product();
    check_dataset(&train, "training", inputs, trainer.net.output_size())?;
    check_dataset(&test, "test", inputs, trainer.net.output_size())?;

    let dir = cfg.output_dir.clone();
    let metrics_path = dir.join("metrics.csv");
    let timing_path = dir.join("timing.csv");
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    if let Some(ck_path) = &args.resume {
        let ck = Checkpoint::load(ck_path)?;
        trainer.restore(&ck.state)?;
        let keep = |r: &Vec<String>| r.get(1).and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < ck.state.epoch);
        rows = read_metrics_rows(&metrics_path)?.into_iter().filter(keep).collect();
        if rows.len() != ck.state.epoch {
            return Err(Error::Checkpoint(format!(
                "{} holds {} rows before epoch {}",
                metrics_path.display(),
                rows.len(),
                ck.state.epoch
            )));
        }
        if let Ok(mut r) = csv::Reader::from_path(&timing_path) {
            timing = r
                .records()
                .filter_map(|rec| rec.ok())
                .map(|rec| rec.iter().map(str::to_string).collect::<Vec<_>>())
                .filter(|r| r.first().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < ck.state.epoch))
                .collect();
        }
    }
    let mut first_loss = rows
        .first()
        .and_then(|r| r.get(4))
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(f64::INFINITY);
    let fw_macs_per_sample = trainer.net.fw_macs_per_sample() as u64;
    let train_len = train.len() as u64;
    let quiet = args.quiet;
    let mut clock = Instant::now();
    trainer.fit(&train, &test, |m, t| {
        if m.epoch == 0 {
            first_loss = m.train_loss;
        }
        rows.push(metrics_row(m, t.step(), first_loss));
        timing.push(vec![
            m.epoch.to_string(),
            format!("{:.3}", clock.elapsed().as_secs_f64()),
        ]);
        clock = Instant::now();
        write_atomic(&metrics_path, csv_text(&METRICS_COLUMNS, &rows)?.as_bytes())?;
        write_atomic(&timing_path, csv_text(&["epoch", "wall_seconds"], &timing)?.as_bytes())?;
        Checkpoint {
            state: t.state(),
            quantized: quantized_snapshot(t)?,
        }
        .save(&dir.join("checkpoint.mftc"))?;
        write_json(
            &dir.join("census.json"),
            &CensusFile {
                schema: 1,
                precision: t.config.precision,
                steps: t.step(),
                epochs: t.epoch(),
                samples: t.epoch() as u64 * train_len,
                fw_macs_per_sample,
                census: t.train_census(),
            },
        )?;
        if !quiet {
            eprintln!(
                "epoch {} loss {:.5} train acc {:.4} test acc {:.4} grad zeros {:.4}",
                m.epoch, m.train_loss, m.train_accuracy, m.test_accuracy, m.gradient_zero_fraction
            );
        }
        Ok(())
    })?;
    let final_loss = rows.last().and_then(|r| r.get(4)).and_then(|v| v.parse::<f64>().ok());
    let converged = match final_loss {
        Some(l) => (rows.len() == 1 && l.is_finite()) || l < first_loss,
        None => true,
    };
    let _ = writeln!(
        out,
        "{} epochs written to {} ({})",
        rows.len(),
        dir.display(),
        if converged { "converged" } else { "not converged" }
    );
    Ok(TrainOutcome {
        output_dir: dir,
        epochs: rows,
        converged,
    })
}

fn load_energy_config(path: Option<&Path>) -> Result<EnergyConfig> {
    match resolve_config(path, "energy.toml")? {
        Some(p) => EnergyConfig::load(&p),
        None => Ok(EnergyConfig::default()),
    }
}

fn resolve_workload(name: &str, cfg: &EnergyConfig) -> Result<WorkloadSpec> {
    if name == "resnet50" {
        return match &cfg.workload {
            Some(w) => Ok(w.clone()),
            None => WorkloadSpec::resnet50(),
        };
    }
    let path = Path::new(name);
    let text = std::fs::read_to_string(path).map_err(|_| {
        Error::Config(format!("unknown workload `{name}` (expected resnet50 or a workload file)"))
    })?;
    let w: WorkloadSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{name}: {e}")))?;
    w.validate()?;
    Ok(w)
}

fn select_profiles(cfg: &EnergyConfig, names: &[String]) -> Result<Vec<MethodProfile>> {
    let all = cfg.profiles();
    if names.is_empty() {
        return Ok(all);
    }
    names
        .iter()
        .map(|n| {
            all.iter().find(|p| &p.name == n).cloned().ok_or_else(|| {
                let known: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
                Error::Config(format!("unknown method `{n}` (known: {})", known.join(", ")))
            })
        })
        .collect()
}

/// Census-priced energy set against the analytic MAC model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CensusCheck {
    pub method: String,
    pub census_mac_j: f64,
    pub analytic_mac_j: f64,
    pub relative_difference: f64,
    pub xor_j: f64,
    pub quantizer_j: f64,
}

pub fn census_check(census: &CensusFile, profile: &MethodProfile, table: &OpCostTable) -> Result<CensusCheck> {
    let priced = price_census(&census.census, profile, table)?;
    let analytic = iteration_energy(profile, &census.analytic_workload()?, table)?;
    Ok(CensusCheck {
        method: profile.name.clone(),
        census_mac_j: priced.mac,
        analytic_mac_j: analytic.total,
        relative_difference: (priced.mac - analytic.total) / analytic.total,
        xor_j: priced.xor,
        quantizer_j: priced.quantizer,
    })
}

pub fn cmd_energy(args: &EnergyArgs, out: &mut String) -> Result<i32> {
    let cfg = load_energy_config(args.config.as_deref())?;
    let table = cfg.table()?;
    let profiles = select_profiles(&cfg, &args.methods)?;
    for p in &profiles {
        p.validate(&table)?;
    }
    if let Some(path) = &args.from_census {
        let census = CensusFile::load(path)?;
        let profile = match args.methods.first() {
            Some(_) => profiles[0].clone(),
            None => match census.precision {
                Precision::Quantized => builtin_profile("ours")?,
                Precision::Full => builtin_profile("original")?,
            },
        };
        let check = census_check(&census, &profile, &table)?;
        let _ = writeln!(
            out,
            "{}: census-priced MACs {:.6e} J, analytic {:.6e} J ({:+.4}%), XOR {:.3e} J, quantizer {:.3e} J",
            check.method,
            check.census_mac_j,
            check.analytic_mac_j,
            100.0 * check.relative_difference,
            check.xor_j,
            check.quantizer_j
        );
        if let Some(dir) = &args.out {
            write_json(&dir.join("census_energy.json"), &check)?;
        }
        return Ok(0);
    }
    let mut workload = resolve_workload(&args.workload, &cfg)?;
    if let Some(macs) = args.macs {
        workload.fw_macs = macs;
        workload.note = None;
        workload.validate()?;
    }
    let report = compare_report(&profiles, &workload, &table)?;
    let text = report.to_text();
    out.push_str(&text);
    if let Some(dir) = &args.out {
        write_atomic(&dir.join("energy.csv"), report.to_csv()?.as_bytes())?;
        write_atomic(&dir.join("energy.txt"), text.as_bytes())?;
    }
    Ok(0)
}

pub fn cmd_compare(args: &CompareArgs, out: &mut String) -> Result<i32> {
    let cfg = load_energy_config(args.config.as_deref())?;
    let table = cfg.table()?;
    let workload = resolve_workload(&args.workload, &cfg)?;
    let checks = reference_checks(&cfg.profiles(), &workload, &table, args.tolerance)?;
    let field = |f: EnergyField| match f {
        EnergyField::Fw => "fw",
        EnergyField::Bw => "bw",
        EnergyField::Total => "total",
    };
    let _ = writeln!(
        out,
        "{:<14} {:<6} {:>9} {:>9} {:>9}  status",
        "method", "field", "model J", "ref J", "dev"
    );
    let mut rows = Vec::new();
    let mut failed = 0;
    for c in &checks {
        let status = match (c.strict, c.within_tolerance) {
            (true, true) => "ok",
            (true, false) => "FAIL",
            (false, true) => "ok (informative)",
            (false, false) => "off (informative)",
        };
        failed += usize::from(c.strict && !c.within_tolerance);
        let _ = writeln!(
            out,
            "{:<14} {:<6} {:>9.3} {:>9.2} {:>+8.2}%  {status}",
            c.method,
            field(c.field),
            c.model,
            c.reference,
            100.0 * c.relative_deviation
        );
        rows.push(vec![
            c.method.clone(),
            field(c.field).to_string(),
            format!("{:.6}", c.model),
            format!("{:.2}", c.reference),
            format!("{:.6}", c.relative_deviation),
            c.strict.to_string(),
            c.within_tolerance.to_string(),
        ]);
    }
    let _ = writeln!(out, "{failed} strict value(s) outside {:.1}%", 100.0 * args.tolerance);
    if let Some(dir) = &args.out {
        let header = ["method", "field", "model_j", "reference_j", "relative_deviation", "strict", "within_tolerance"];
        write_atomic(&dir.join("compare.csv"), csv_text(&header, &rows)?.as_bytes())?;
    }
    Ok(if failed == 0 { 0 } else { EXIT_FAILURE })
}

pub fn cmd_selftest(args: &SelftestArgs, out: &mut String) -> Result<i32> {
    let table = match &args.config {
        Some(p) => EnergyConfig::load(p)?.table()?,
        None => OpCostTable::default(),
    };
    let results = selftest::run_all(&table);
    for r in &results {
        let _ = writeln!(out, "{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} of {} suites passed", results.len() - failed, results.len());
    Ok(if failed == 0 { 0 } else { EXIT_FAILURE })
}
