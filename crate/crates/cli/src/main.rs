//! `spread`: reproducible persistent-spread experiments.
//!
//! Pipeline: `generate` a synthetic multi-period trace, `record` it into one
//! shared register array per period (offloaded as snapshot files plus a
//! manifest), `query` per-flow persistent-spread estimates, `evaluate`
//! accuracy against ground truth, and `sweep` parameter grids. Every command
//! is a pure function of its inputs and seeds; re-running produces
//! byte-identical output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use spread_core::experiment::{
    bucket_metrics, load_experiment, record_stream_offloading, run_point, EstimatorKind,
    RecordingConfig,
};
use spread_core::persistent::PersistentEstimate;
use spread_core::snapshot::ExperimentManifest;
use spread_core::trace::{
    flow_label, parse_population_spec, write_ground_truth, write_trace, GroundTruth,
    TraceGenerator, TraceReader, TraceSpec,
};
use spread_core::vsketch::ViEstimator;

#[derive(Parser)]
#[command(
    name = "spread",
    about = "Persistent-spread measurement over multi-period register sketches",
    long_about = "Measures how many distinct elements persist in each network flow across t \
consecutive measurement periods, using per-period shared register arrays and \
register-intersection estimation.\n\n\
CSV schemas:\n  \
query     -> flow,n_star_hat,stderr,ci_low,ci_high,flags\n  \
evaluate  -> metrics.csv: bucket_lo,bucket_hi,bias,stderr,flows\n               \
scatter.csv: flow,n_star_true,n_star_hat\n  \
sweep     -> sweep.csv: point,memory_bits,m,s,t,snr,estimator,bucket_lo,bucket_hi,bias,stderr,flows\n\n\
Errors exit nonzero with one line on stderr: `error class=<class> detail=\"...\"`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace and its exact ground truth.
    Generate(GenerateArgs),
    /// Record a trace into per-period register arrays and offload snapshots.
    Record(RecordArgs),
    /// Estimate persistent spreads for listed flows from recorded snapshots.
    Query(QueryArgs),
    /// Compare estimates against ground truth, bucketed by true spread.
    Evaluate(EvaluateArgs),
    /// Run a grid of experiments over memory, periods, SNR, sketch size.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Population spec: `explicit:<spread>[x<count>],...` and/or
    /// `powerlaw:flows=..,exponent=..,min=..,max=..`, `;`-separated.
    #[arg(long)]
    flows: String,
    /// Number of measurement periods t.
    #[arg(long)]
    t: u32,
    /// Signal-to-noise ratio per period: one value or t comma-separated.
    #[arg(long, default_value = "1.0")]
    snr: String,
    /// Element identifiers are drawn from [0, 2^bits).
    #[arg(long, default_value_t = 64)]
    element_bits: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (trace.tsv, truth.tsv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecordArgs {
    /// Trace file produced by `generate`.
    #[arg(long)]
    trace: PathBuf,
    /// Per-period memory budget in bits; m = floor(bits / h).
    #[arg(long)]
    memory_bits: u64,
    /// Virtual sketch size s (power of two).
    #[arg(long, default_value_t = 512)]
    s: usize,
    /// Register width h in bits.
    #[arg(long, default_value_t = 5)]
    h: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (period_*.snap, manifest.txt).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    /// Manifest written by `record`.
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated flow labels, or @file with one label per line.
    #[arg(long)]
    flows: String,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Ground-truth sidecar from `generate`.
    #[arg(long)]
    truth: PathBuf,
    /// Evaluate only flows with true spread >= this.
    #[arg(long, default_value_t = 1)]
    min_truth: u64,
    /// Output directory (metrics.csv, scatter.csv).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Population spec, as in `generate`.
    #[arg(long)]
    flows: String,
    /// Comma-separated memory budgets in bits.
    #[arg(long)]
    memory_bits: String,
    /// Comma-separated sketch sizes.
    #[arg(long, default_value = "512")]
    s: String,
    /// Comma-separated period counts.
    #[arg(long, default_value = "10")]
    t: String,
    /// Comma-separated SNR values (each applied to all periods).
    #[arg(long, default_value = "1.0")]
    snr: String,
    /// Comma-separated estimators: vi-hll, i-hll-dedicated, union-baseline.
    #[arg(long, default_value = "vi-hll")]
    estimator: String,
    #[arg(long, default_value_t = 5)]
    h: u32,
    #[arg(long, default_value_t = 64)]
    element_bits: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Evaluate only flows with true spread >= this.
    #[arg(long, default_value_t = 1)]
    min_truth: u64,
    /// Output directory (sweep.csv, point_*.csv).
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Record(args) => cmd_record(args),
        Command::Query(args) => cmd_query(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    if let Err(err) = result {
        eprintln!("error class={} detail={:?}", classify(&err), err.to_string());
        std::process::exit(1);
    }
}

/// One-word machine-parsable error class.
fn classify(err: &anyhow::Error) -> &'static str {
    let text = format!("{err:#}").to_lowercase();
    if text.contains("no such file") || text.contains("not found") {
        "missing-file"
    } else if text.contains("mismatch") || text.contains("disagree") || text.contains("duplicate")
    {
        "parameter-mismatch"
    } else if text.contains("infeasible")
        || text.contains("invalid configuration")
        || text.contains("out of range")
        || text.contains("not above")
    {
        "infeasible-config"
    } else if text.contains("bad") || text.contains("unknown") || text.contains("malformed") {
        "bad-input"
    } else {
        "internal"
    }
}

fn parse_f64_list(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad number `{v}`"))
        })
        .collect()
}

fn parse_u64_list(text: &str) -> anyhow::Result<Vec<u64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| anyhow!("bad number `{v}`"))
        })
        .collect()
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let spec = TraceSpec {
        periods: args.t,
        snr: parse_f64_list(&args.snr)?,
        element_bits: args.element_bits,
        master_seed: args.seed,
        population: parse_population_spec(&args.flows)?,
    };
    let generator = TraceGenerator::new(spec)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let trace_path = args.out.join("trace.tsv");
    let mut trace_file = BufWriter::new(File::create(&trace_path)?);
    write_trace(&generator, &mut trace_file)?;
    trace_file.flush()?;

    let truth = generator.ground_truth();
    let truth_path = args.out.join("truth.tsv");
    let mut truth_file = BufWriter::new(File::create(&truth_path)?);
    write_ground_truth(&truth, &mut truth_file)?;
    truth_file.flush()?;

    println!(
        "wrote {} and {} ({} flows, {} periods)",
        trace_path.display(),
        truth_path.display(),
        generator.flow_count(),
        generator.spec().periods
    );
    Ok(())
}

fn cmd_record(args: RecordArgs) -> anyhow::Result<()> {
    let file = File::open(&args.trace)
        .with_context(|| format!("opening {}", args.trace.display()))?;
    let reader = TraceReader::new(BufReader::new(file))?;
    let periods = reader.periods();
    let config = RecordingConfig {
        memory_bits: args.memory_bits,
        sketch_registers: args.s,
        width: args.h,
        master_seed: args.seed,
    };
    // one pass, one period's array in memory at a time
    let manifest = record_stream_offloading(reader, periods, &config, &args.out)?;
    println!(
        "recorded {} periods into m={} registers (h={}); manifest {}",
        manifest.periods.len(),
        manifest.registers,
        manifest.width,
        args.out.join("manifest.txt").display()
    );
    Ok(())
}

fn estimate_flags(est: &PersistentEstimate) -> String {
    let mut flags = Vec::new();
    if est.diagnostics.boundary {
        flags.push("boundary");
    }
    if est.diagnostics.clamped {
        flags.push("clamped");
    }
    if est.diagnostics.noise {
        flags.push("noise");
    }
    if !est.diagnostics.stderr_valid {
        flags.push("stderr-invalid");
    }
    if flags.is_empty() {
        "-".to_string()
    } else {
        flags.join("|")
    }
}

fn csv_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

fn cmd_query(args: QueryArgs) -> anyhow::Result<()> {
    let labels: Vec<String> = if let Some(path) = args.flows.strip_prefix('@') {
        BufReader::new(File::open(path).with_context(|| format!("opening {path}"))?)
            .lines()
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|l| !l.is_empty())
            .collect()
    } else {
        args.flows.split(',').map(|s| s.trim().to_string()).collect()
    };

    let manifest = ExperimentManifest::load(&args.manifest)?;
    let experiment = load_experiment(&manifest)?;
    let engine = ViEstimator::new(&experiment.arrays, experiment.scheme, &experiment.seeds)?;

    let mut rows = String::from("flow,n_star_hat,stderr,ci_low,ci_high,flags\n");
    for label in &labels {
        let est = engine.estimate(label.as_bytes())?;
        rows.push_str(&format!(
            "{},{},{},{},{},{}\n",
            label,
            csv_float(est.n_star_hat),
            csv_float(est.stderr),
            csv_float(est.ci_low),
            csv_float(est.ci_high),
            estimate_flags(&est)
        ));
    }
    match &args.out {
        Some(path) => std::fs::write(path, rows)?,
        None => print!("{rows}"),
    }
    Ok(())
}

fn load_truth(path: &Path) -> anyhow::Result<GroundTruth> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(spread_core::trace::read_ground_truth(BufReader::new(file))?)
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let truth = load_truth(&args.truth)?;
    let manifest = ExperimentManifest::load(&args.manifest)?;
    let experiment = load_experiment(&manifest)?;
    let engine = ViEstimator::new(&experiment.arrays, experiment.scheme, &experiment.seeds)?;

    let mut pairs = Vec::new();
    let mut scatter = String::from("flow,n_star_true,n_star_hat\n");
    for f in truth.flows.iter().filter(|f| f.n_star >= args.min_truth) {
        let label = flow_label(f.flow);
        let est = engine.estimate(label.as_bytes())?;
        scatter.push_str(&format!(
            "{},{},{}\n",
            label,
            f.n_star,
            csv_float(est.n_star_hat)
        ));
        pairs.push((f.n_star, est.n_star_hat));
    }
    let (buckets, _excluded) = bucket_metrics(&pairs);

    std::fs::create_dir_all(&args.out)?;
    let mut metrics = String::from("bucket_lo,bucket_hi,bias,stderr,flows\n");
    for b in &buckets {
        metrics.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo,
            b.hi,
            csv_float(b.stats.bias),
            csv_float(b.stats.stderr),
            b.stats.used
        ));
    }
    std::fs::write(args.out.join("metrics.csv"), metrics)?;
    std::fs::write(args.out.join("scatter.csv"), scatter)?;
    println!(
        "evaluated {} flows into {} buckets; wrote {}",
        pairs.len(),
        buckets.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let population = parse_population_spec(&args.flows)?;
    let memory_list = parse_u64_list(&args.memory_bits)?;
    let s_list = parse_u64_list(&args.s)?;
    let t_list = parse_u64_list(&args.t)?;
    let snr_list = parse_f64_list(&args.snr)?;
    let estimators: Vec<EstimatorKind> = args
        .estimator
        .split(',')
        .map(|e| e.trim().parse().map_err(|m: String| anyhow!(m)))
        .collect::<anyhow::Result<_>>()?;

    std::fs::create_dir_all(&args.out)?;
    let mut summary =
        String::from("point,memory_bits,m,s,t,snr,estimator,bucket_lo,bucket_hi,bias,stderr,flows\n");
    let mut point = 0usize;
    for &t in &t_list {
        for &snr in &snr_list {
            let spec = TraceSpec {
                periods: t as u32,
                snr: vec![snr],
                element_bits: args.element_bits,
                master_seed: args.seed,
                population: population.clone(),
            };
            let generator = TraceGenerator::new(spec)?;
            let truth = generator.ground_truth();
            let eval: Vec<u32> = truth
                .flows
                .iter()
                .filter(|f| f.n_star >= args.min_truth)
                .map(|f| f.flow)
                .collect();
            for &memory_bits in &memory_list {
                for &s in &s_list {
                    for &estimator in &estimators {
                        let config = RecordingConfig {
                            memory_bits,
                            sketch_registers: s as usize,
                            width: args.h,
                            master_seed: args.seed,
                        };
                        if estimator == EstimatorKind::ViHll {
                            config.validate()?;
                        }
                        let results =
                            run_point(&generator, &config, estimator, Some(&eval))?;
                        let pairs: Vec<(u64, f64)> = results
                            .iter()
                            .map(|(_, truth, est)| (*truth, est.n_star_hat))
                            .collect();
                        let (buckets, _) = bucket_metrics(&pairs);

                        let mut point_csv =
                            String::from("bucket_lo,bucket_hi,bias,stderr,flows\n");
                        for b in &buckets {
                            let row = format!(
                                "{},{},{},{},{}",
                                b.lo,
                                b.hi,
                                csv_float(b.stats.bias),
                                csv_float(b.stats.stderr),
                                b.stats.used
                            );
                            point_csv.push_str(&row);
                            point_csv.push('\n');
                            summary.push_str(&format!(
                                "{},{},{},{},{},{},{},{}\n",
                                point,
                                memory_bits,
                                config.register_count(),
                                s,
                                t,
                                snr,
                                estimator,
                                row
                            ));
                        }
                        std::fs::write(
                            args.out.join(format!("point_{point:03}.csv")),
                            point_csv,
                        )?;
                        point += 1;
                    }
                }
            }
        }
    }
    std::fs::write(args.out.join("sweep.csv"), summary)?;
    println!("swept {point} grid points into {}", args.out.display());
    Ok(())
}
