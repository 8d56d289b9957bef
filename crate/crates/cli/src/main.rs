//! Command-line front end for the shade-loss pipeline.
//!
//! Four subcommands cover the full workflow: `corpus` builds a clear-sky
//! profile corpus, `analyze` estimates shade losses from a power series,
//! `synth` generates a synthetic series with known ground truth, and
//! `validate` compares per-bin loss tables against a reference.
//!
//! Options come from flags plus an optional `key,value` config file
//! (`--config`); flags win over file values, and unknown config keys are
//! rejected. Exit codes: 0 success, 1 input or usage error, 2 completed
//! with warnings (analysis that did not reach solver tolerances).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use pvshade::corpus::{build_corpus, ClearSkyCorpus, ClearSkyParams, CorpusGrids};
use pvshade::error::{Error, Result};
use pvshade::ingest::parse_series;
use pvshade::io;
use pvshade::pipeline::analyze_series;
use pvshade::preprocess::PrepConfig;
use pvshade::report::{load_bin_table, metrics, save_bin_table, yearly_from_bins};
use pvshade::sd::{NormMode, SdParams, WeightMode};
use pvshade::synth::{
    ground_truth, inject_shade, inject_weather, save_labels, save_series, simulate_system,
    Obstruction, ObstructionBand, SystemGeometry,
};

#[derive(Parser)]
#[command(
    name = "pvshade",
    version,
    about = "Estimate PV shade losses from an unlabeled power series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the clear-sky profile corpus artifact.
    Corpus(CorpusArgs),
    /// Decompose a power series and report shade losses.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic power series with known ground truth.
    Synth(SynthArgs),
    /// Compare estimated per-bin losses against a reference table.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Output path for the corpus artifact.
    #[arg(long)]
    out: PathBuf,
    /// Config file with keys: lats, tilts, azimuths (`;`-separated
    /// degrees), k, aod700, precipitable_water, pressure, albedo.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Input power series, `timestamp,power_kw` per line.
    #[arg(long)]
    input: PathBuf,
    /// Corpus artifact written by `pvshade corpus`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for all analysis artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Residual-coefficient penalty weight.
    #[arg(long)]
    lambda2a: Option<f64>,
    /// Coefficient-smoothness penalty weight.
    #[arg(long)]
    lambda2b: Option<f64>,
    /// Shade-smoothness penalty weight.
    #[arg(long)]
    lambda3: Option<f64>,
    /// Config file with keys: lambda2a, lambda2b, lambda3, weight_mode
    /// (eigenvalue_inverse | eigenvalue_inverse_sqrt), norm_mode
    /// (unsquared | squared), abs_tol, rel_tol, max_iter, rho,
    /// adaptive_rho.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the series, labels, and ground-truth files.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the weather generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Config file with keys: latitude, longitude, tilt, azimuth,
    /// capacity_kw, years, interval_s, cloud_prob, seed,
    /// obstruction_elevation (0 disables the obstruction),
    /// obstruction_azimuth_lo, obstruction_azimuth_hi,
    /// obstruction_fraction, aod700, precipitable_water, pressure, albedo.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Estimated per-bin loss table; repeat the flag for several pairs.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Reference per-bin loss table, paired with `--input` by position.
    #[arg(long, required = true)]
    truth: Vec<PathBuf>,
    /// Output path for the metrics table.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Corpus(args) => cmd_corpus(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Reads a `key,value` config file into a map, rejecting duplicates.
fn read_config(path: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    let pairs = io::read_kv(path)
        .map_err(|e| Error::InvalidArgument(format!("config file {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (k, v) in pairs {
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate config key {k:?}"
            )));
        }
    }
    Ok(map)
}

/// Removes and parses one config key; `None` when absent.
fn take<T: FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v.trim().parse::<T>().map(Some).map_err(|e| {
            Error::InvalidArgument(format!("config key {key}: bad value {v:?}: {e}"))
        }),
    }
}

/// Removes and parses one `;`-separated float list; `None` when absent.
fn take_floats(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<Vec<f64>>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => io::split_floats(&v).map(Some).map_err(|e| {
            Error::InvalidArgument(format!("config key {key}: bad value {v:?}: {e}"))
        }),
    }
}

/// Errors on the first leftover (unknown) config key.
fn reject_unknown(map: &BTreeMap<String, String>) -> Result<()> {
    match map.keys().next() {
        None => Ok(()),
        Some(k) => Err(Error::InvalidArgument(format!("unknown config key {k:?}"))),
    }
}

/// Applies the clear-sky atmosphere keys shared by `corpus` and `synth`.
fn take_clearsky(map: &mut BTreeMap<String, String>) -> Result<ClearSkyParams> {
    let mut params = ClearSkyParams::default();
    if let Some(v) = take(map, "aod700")? {
        params.aod700 = v;
    }
    if let Some(v) = take(map, "precipitable_water")? {
        params.precipitable_water = v;
    }
    if let Some(v) = take(map, "pressure")? {
        params.pressure = v;
    }
    if let Some(v) = take(map, "albedo")? {
        params.albedo = v;
    }
    Ok(params)
}

fn cmd_corpus(args: CorpusArgs) -> Result<ExitCode> {
    let mut cfg = read_config(args.config.as_deref())?;
    let mut grids = CorpusGrids::default();
    if let Some(v) = take_floats(&mut cfg, "lats")? {
        grids.lats = v;
    }
    if let Some(v) = take_floats(&mut cfg, "tilts")? {
        grids.tilts = v;
    }
    if let Some(v) = take_floats(&mut cfg, "azimuths")? {
        grids.azimuths = v;
    }
    let params = take_clearsky(&mut cfg)?;
    let k = take(&mut cfg, "k")?.unwrap_or(6usize);
    reject_unknown(&cfg)?;

    let corpus = build_corpus(&grids, &params, k)?;
    corpus
        .save(&args.out)
        .map_err(|e| Error::Artifact(format!("writing {}: {e}", args.out.display())))?;
    println!("corpus {}", args.out.display());
    println!("profiles {}", corpus.n_profiles);
    println!(
        "k_requested {} k_effective {}",
        corpus.k_requested,
        corpus.k_effective()
    );
    println!("captured_fraction {:.6}", corpus.captured_fraction());
    println!("eigenvalues {}", io::join_floats(&corpus.lambda));
    println!("params_hash {}", corpus.params_hash);
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let mut cfg = read_config(args.config.as_deref())?;
    let mut params = SdParams::default();
    if let Some(v) = take(&mut cfg, "lambda2a")? {
        params.lambda_2a = v;
    }
    if let Some(v) = take(&mut cfg, "lambda2b")? {
        params.lambda_2b = v;
    }
    if let Some(v) = take(&mut cfg, "lambda3")? {
        params.lambda_3 = v;
    }
    if let Some(v) = take::<String>(&mut cfg, "weight_mode")? {
        params.weight_mode = match v.trim() {
            "eigenvalue_inverse" => WeightMode::EigenvalueInverse,
            "eigenvalue_inverse_sqrt" => WeightMode::EigenvalueInverseSqrt,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "config key weight_mode: expected eigenvalue_inverse or \
                     eigenvalue_inverse_sqrt, got {other:?}"
                )))
            }
        };
    }
    if let Some(v) = take::<String>(&mut cfg, "norm_mode")? {
        params.norm_mode = match v.trim() {
            "unsquared" => NormMode::Unsquared,
            "squared" => NormMode::Squared,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "config key norm_mode: expected unsquared or squared, got {other:?}"
                )))
            }
        };
    }
    if let Some(v) = take(&mut cfg, "abs_tol")? {
        params.abs_tol = v;
    }
    if let Some(v) = take(&mut cfg, "rel_tol")? {
        params.rel_tol = v;
    }
    if let Some(v) = take(&mut cfg, "max_iter")? {
        params.max_iter = v;
    }
    if let Some(v) = take(&mut cfg, "rho")? {
        params.rho = v;
    }
    if let Some(v) = take(&mut cfg, "adaptive_rho")? {
        params.adaptive_rho = v;
    }
    reject_unknown(&cfg)?;
    // Flags win over config file values.
    if let Some(v) = args.lambda2a {
        params.lambda_2a = v;
    }
    if let Some(v) = args.lambda2b {
        params.lambda_2b = v;
    }
    if let Some(v) = args.lambda3 {
        params.lambda_3 = v;
    }

    let corpus = ClearSkyCorpus::load(&args.corpus).map_err(|e| {
        Error::Artifact(format!("corpus artifact {}: {e}", args.corpus.display()))
    })?;
    let file = std::fs::File::open(&args.input)
        .map_err(|e| Error::Artifact(format!("input series {}: {e}", args.input.display())))?;
    let series = parse_series(std::io::BufReader::new(file))?;

    let prep = PrepConfig::default();
    let (prepared, analysis) = analyze_series(&series, &prep, &corpus, params)?;

    std::fs::create_dir_all(&args.out)?;
    prepared.signal.save(
        &args.out.join("signal.csv"),
        &args.out.join("signal_meta.txt"),
    )?;
    analysis.decomposition.save(&args.out)?;
    analysis.report.save_summary(&args.out.join("summary.txt"))?;
    analysis.report.save_bins(&args.out.join("bins.csv"))?;

    for w in &analysis.warnings {
        eprintln!("warning: {w}");
    }
    println!("yearly_loss_kwh {:.3}", analysis.report.yearly_loss);
    println!("yearly_energy_kwh {:.3}", analysis.report.yearly_energy);
    println!("loss_fraction_pct {:.3}", analysis.report.loss_fraction);
    println!("converged {}", analysis.decomposition.converged);
    println!("iterations {}", analysis.decomposition.iterations);
    println!("params_hash {}", analysis.report.params_hash);
    if analysis.warnings.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut cfg = read_config(args.config.as_deref())?;
    let mut g = SystemGeometry {
        latitude: 34.0,
        longitude: -118.0,
        tilt: 20.0,
        azimuth: 180.0,
        capacity_kw: 5.0,
    };
    if let Some(v) = take(&mut cfg, "latitude")? {
        g.latitude = v;
    }
    if let Some(v) = take(&mut cfg, "longitude")? {
        g.longitude = v;
    }
    if let Some(v) = take(&mut cfg, "tilt")? {
        g.tilt = v;
    }
    if let Some(v) = take(&mut cfg, "azimuth")? {
        g.azimuth = v;
    }
    if let Some(v) = take(&mut cfg, "capacity_kw")? {
        g.capacity_kw = v;
    }
    let years: u32 = take(&mut cfg, "years")?.unwrap_or(2);
    let interval_s: u32 = take(&mut cfg, "interval_s")?.unwrap_or(300);
    let cloud_prob: f64 = take(&mut cfg, "cloud_prob")?.unwrap_or(0.35);
    let elevation: f64 = take(&mut cfg, "obstruction_elevation")?.unwrap_or(0.0);
    let azimuth_lo: f64 = take(&mut cfg, "obstruction_azimuth_lo")?.unwrap_or(150.0);
    let azimuth_hi: f64 = take(&mut cfg, "obstruction_azimuth_hi")?.unwrap_or(210.0);
    let fraction: f64 = take(&mut cfg, "obstruction_fraction")?.unwrap_or(0.7);
    let seed_cfg: Option<u64> = take(&mut cfg, "seed")?;
    let csp = take_clearsky(&mut cfg)?;
    reject_unknown(&cfg)?;
    let seed = args.seed.or(seed_cfg).unwrap_or(42);

    let obs = if elevation > 0.0 {
        Obstruction {
            bands: vec![ObstructionBand {
                azimuth_lo,
                azimuth_hi,
                elevation_deg: elevation,
                beam_block_fraction: fraction,
            }],
        }
    } else {
        Obstruction::none()
    };
    obs.validate()?;

    let mut canonical = String::new();
    let mut kv = |k: &str, v: String| writeln!(canonical, "{k},{v}").expect("string write");
    kv("latitude", format!("{}", g.latitude));
    kv("longitude", format!("{}", g.longitude));
    kv("tilt", format!("{}", g.tilt));
    kv("azimuth", format!("{}", g.azimuth));
    kv("capacity_kw", format!("{}", g.capacity_kw));
    kv("years", years.to_string());
    kv("interval_s", interval_s.to_string());
    kv("cloud_prob", format!("{cloud_prob}"));
    kv("obstruction_elevation", format!("{elevation}"));
    kv("obstruction_azimuth_lo", format!("{azimuth_lo}"));
    kv("obstruction_azimuth_hi", format!("{azimuth_hi}"));
    kv("obstruction_fraction", format!("{fraction}"));
    kv("seed", seed.to_string());
    kv("aod700", format!("{}", csp.aod700));
    kv("precipitable_water", format!("{}", csp.precipitable_water));
    kv("pressure", format!("{}", csp.pressure));
    kv("albedo", format!("{}", csp.albedo));
    let hash = io::params_hash(&canonical);

    let clear_sky = simulate_system(&g, years, interval_s, &csp)?;
    let (shaded, acct) = inject_shade(&clear_sky, &g, &obs, &csp)?;
    let (noisy, clear) = inject_weather(&shaded, cloud_prob, seed)?;
    let truth = ground_truth(&acct, &clear)?;

    std::fs::create_dir_all(&args.out)?;
    save_series(&args.out.join("series.csv"), &noisy, &hash)?;
    save_labels(&args.out.join("labels.csv"), &clear, &hash)?;
    save_bin_table(
        &args.out.join("truth_bins.csv"),
        &truth.per_bin_loss_ref,
        &truth.per_bin_energy_ref,
        &hash,
    )?;
    io::write_kv(
        &args.out.join("truth_summary.txt"),
        &[
            (
                "yearly_loss_kwh".to_string(),
                format!("{:.6}", truth.yearly_loss_ref),
            ),
            (
                "yearly_energy_kwh".to_string(),
                format!("{:.6}", truth.yearly_energy_ref),
            ),
            (
                "loss_fraction_pct".to_string(),
                format!("{:.6}", 100.0 * truth.yearly_loss_ref / truth.yearly_energy_ref),
            ),
            ("seed".to_string(), seed.to_string()),
            ("params_hash".to_string(), hash.clone()),
        ],
    )?;

    println!("series {}", args.out.join("series.csv").display());
    println!("days {}", clear.len());
    println!("true_yearly_loss_kwh {:.3}", truth.yearly_loss_ref);
    println!("true_yearly_energy_kwh {:.3}", truth.yearly_energy_ref);
    println!(
        "true_loss_fraction_pct {:.3}",
        100.0 * truth.yearly_loss_ref / truth.yearly_energy_ref
    );
    println!("params_hash {hash}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode> {
    if args.input.len() != args.truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} estimate tables but {} reference tables; pass --input and \
             --truth the same number of times",
            args.input.len(),
            args.truth.len()
        )));
    }
    let mut canonical = String::new();
    let mut rows = Vec::new();
    for (input, truth) in args.input.iter().zip(&args.truth) {
        let (loss_est, _) = load_bin_table(input)
            .map_err(|e| Error::Artifact(format!("estimate table {}: {e}", input.display())))?;
        let (loss_ref, energy_ref) = load_bin_table(truth)
            .map_err(|e| Error::Artifact(format!("reference table {}: {e}", truth.display())))?;
        let yearly_energy = yearly_from_bins(&energy_ref);
        let m = metrics(&loss_est, &loss_ref, yearly_energy)?;
        writeln!(canonical, "pair,{},{}", input.display(), truth.display())
            .expect("string write");
        rows.push((input, truth, m));
    }
    let hash = io::params_hash(&canonical);

    let mut table = format!("# params_hash {hash}\n");
    table.push_str("input,truth,rmse_kwh,re_pct\n");
    println!("input,truth,rmse_kwh,re_pct");
    for (input, truth, m) in &rows {
        let line = format!(
            "{},{},{:.6},{:.6}",
            input.display(),
            truth.display(),
            m.rmse,
            m.re
        );
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    std::fs::write(&args.out, table)
        .map_err(|e| Error::Artifact(format!("writing {}: {e}", args.out.display())))?;
    Ok(ExitCode::SUCCESS)
}
