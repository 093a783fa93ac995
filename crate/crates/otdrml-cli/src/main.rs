//! `otdrml` — command-line driver for simulation, dataset construction,
//! training, evaluation, and detector-bound curves.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
//! failure. Errors print one machine-parsable line on stderr:
//! `otdrml: error[<kind>]: <message>`.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use otdrml::ErrorClass;

#[derive(Parser)]
#[command(name = "otdrml", version, about = "OTDR reflective-event ML toolkit")]
struct Cli {
    /// Cap the worker-thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy traces and write their ground-truth summary.
    Simulate(SimulateArgs),
    /// Build labeled sequence datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train the multi-task detection network.
    Train(TrainArgs),
    /// Run evaluation sweeps against a trained model.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Optimum-detector bound curve: closed form plus Monte Carlo oracle.
    Bound(BoundArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation config file (TOML or JSON, SimConfig field names).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of traces to simulate.
    #[arg(long)]
    traces: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Root RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the first N full traces as CSV.
    #[arg(long, default_value_t = 0)]
    dump: usize,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Build the mixed training dataset (8 sequences per trace).
    Build(DatasetBuildArgs),
    /// Build evaluation variants with constrained positive patterns.
    Variants(DatasetVariantsArgs),
}

#[derive(Args)]
struct DatasetBuildArgs {
    /// Simulation config file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of traces to build from.
    #[arg(long)]
    traces: usize,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Root RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DatasetVariantsArgs {
    /// Simulation config file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which variant(s) to build.
    #[arg(long, value_parser = ["whole", "partial", "mixed", "all"])]
    kind: String,
    /// Number of traces per variant.
    #[arg(long)]
    traces: usize,
    /// Output directory; each variant lands in a subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Root RNG seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `dataset build`.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoint, history, and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Model/training config file (TOML or JSON, ModelConfig field names).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Loss weights as `l1,l2,l3` (detection, position, reflectance).
    #[arg(long, value_parser = parse_lambda)]
    lambda: Option<Lambda>,
    /// Initialization/shuffle/dropout seed.
    #[arg(long)]
    seed: Option<u64>,
}

/// Loss-weight triple as parsed from `--lambda`.
#[derive(Clone, Copy, Debug)]
struct Lambda([f64; 3]);

fn parse_lambda(text: &str) -> Result<Lambda, String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated weights, got {text:?}"));
    }
    let mut w = [0.0f64; 3];
    for (slot, part) in w.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad weight {part:?}: {e}"))?;
    }
    Ok(Lambda(w))
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Detection P_d per SNR bin at calibrated false-alarm levels.
    Detect(EvalDetectArgs),
    /// Position RMSE per SNR bin over dataset variants.
    Localize(EvalCommonArgs),
    /// Reflectance RMSE per SNR bin.
    Reflectance(EvalCommonArgs),
    /// ML vs GLRT vs analytic and Monte Carlo bounds at equal P_FA.
    Compare(EvalCompareArgs),
}

#[derive(Args)]
struct EvalDetectArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Single false-alarm level (default: the 0.01/0.05/0.1 ladder).
    #[arg(long)]
    pfa: Option<f64>,
}

#[derive(Args)]
struct EvalCommonArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory. For `localize`: a parent directory holding
    /// `whole`/`partial`/`mixed` subdirectories from `dataset variants`.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// False-alarm level for the detection gate.
    #[arg(long, default_value_t = 0.1)]
    pfa: f64,
}

#[derive(Args)]
struct EvalCompareArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Whole-variant dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Common false-alarm level for every detector.
    #[arg(long, default_value_t = 0.1)]
    pfa: f64,
    /// Monte Carlo trials per SNR bin for the matched-filter bound.
    #[arg(long, default_value_t = 100_000)]
    mc_trials: usize,
    /// Monte Carlo seed (default: the dataset's root seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BoundArgs {
    /// False-alarm probability, in (0, 0.5].
    #[arg(long, default_value_t = 0.1)]
    pfa: f64,
    /// SNR grid as `lo:hi:step` in dB, endpoints inclusive.
    #[arg(long, default_value = "0:30:0.5", value_parser = parse_snr_spec)]
    snr: SnrSpec,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Monte Carlo trials per grid point for the matched-filter oracle.
    #[arg(long, default_value_t = 100_000)]
    mc_trials: usize,
    /// Monte Carlo seed.
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// Simulation config file; sets the pulse template for the oracle.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Inclusive SNR grid specification `lo:hi:step`.
#[derive(Clone, Copy, Debug)]
struct SnrSpec {
    lo: f64,
    hi: f64,
    step: f64,
}

impl SnrSpec {
    fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

fn parse_snr_spec(text: &str) -> Result<SnrSpec, String> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected lo:hi:step, got {text:?}"));
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|e| format!("bad number {p:?}: {e}")))
        .collect::<Result<_, String>>()?;
    let (lo, hi, step) = (nums[0], nums[1], nums[2]);
    if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
        return Err("grid bounds and step must be finite".into());
    }
    if step <= 0.0 {
        return Err(format!("step must be positive, got {step}"));
    }
    if hi < lo {
        return Err(format!("hi {hi} is below lo {lo}"));
    }
    Ok(SnrSpec { lo, hi, step })
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful outcomes; anything else is a
            // usage error and exits 1 (2 and 3 are reserved for data and
            // numeric failures).
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("otdrml: error[config]: thread pool: {e}");
            std::process::exit(2);
        }
    }

    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Dataset(DatasetCmd::Build(args)) => commands::dataset_build(args),
        Command::Dataset(DatasetCmd::Variants(args)) => commands::dataset_variants(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(EvalCmd::Detect(args)) => commands::eval_detect(args),
        Command::Eval(EvalCmd::Localize(args)) => commands::eval_localize(args),
        Command::Eval(EvalCmd::Reflectance(args)) => commands::eval_reflectance(args),
        Command::Eval(EvalCmd::Compare(args)) => commands::eval_compare(args),
        Command::Bound(args) => commands::bound(args),
    };

    if let Err(e) = result {
        eprintln!("otdrml: error[{}]: {e}", e.kind());
        std::process::exit(match e.class() {
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        });
    }
}
