//! `vfarb`: generate hindsight value curves, train predictors, backtest and
//! compare arbitrage runs.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use config::{ConfigError, RunConfig, StorageSection};
use vfarb_core::controller::write_dispatch_log;
use vfarb_core::dp::DEFAULT_SEGMENTS;
use vfarb_core::error::ErrorClass;
use vfarb_core::metrics::{compare, format_table, read_reports, write_reports};
use vfarb_core::prices::{load_rtp, write_prices};
use vfarb_core::trainer::{write_epoch_log, write_seed_log};
use vfarb_core::{
    build_dataset, compute_metrics, load_prices, perfect_foresight_profit, run_backtest, synth_prices, train_select,
    CurveSource, MlpModel, PriceSchema, PriceSeries, RunLabels, SynthProfile, TrainConfig, ValueFunctionSeries,
};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "vfarb", version, about = "Storage price arbitrage with predicted SoC value functions")]
struct Cli {
    /// TOML config with [storage], [train] and [schema] tables; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic real-time and day-ahead price pair.
    Synth(SynthArgs),
    /// Compute hindsight-optimal marginal value curves for a real-time series.
    GenValues(GenValuesArgs),
    /// Train value-curve predictors over several seeds and keep the best.
    Train(TrainArgs),
    /// Dispatch against a model or hindsight curves and score the run.
    Backtest(BacktestArgs),
    /// Merge metric reports into one table.
    Compare(CompareArgs),
}

#[derive(Args, Default)]
struct StorageFlags {
    /// Power rating, MW [default: 0.5]
    #[arg(long)]
    power: Option<f64>,
    /// Energy capacity, MWh [default: 1]
    #[arg(long)]
    energy: Option<f64>,
    /// One-way charge efficiency [default: 0.9]
    #[arg(long)]
    eta_charge: Option<f64>,
    /// One-way discharge efficiency [default: 0.9]
    #[arg(long)]
    eta_discharge: Option<f64>,
    /// Discharge cost, $/MWh [default: 10]
    #[arg(long)]
    cost: Option<f64>,
    /// Initial state of charge, MWh [default: 0]
    #[arg(long)]
    soc0: Option<f64>,
}

impl StorageFlags {
    fn section(&self) -> StorageSection {
        StorageSection {
            power_mw: self.power,
            energy_mwh: self.energy,
            eta_charge: self.eta_charge,
            eta_discharge: self.eta_discharge,
            marginal_cost: self.cost,
            soc0: self.soc0,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    days: usize,
    #[arg(long, default_value_t = 5)]
    period_minutes: u32,
    /// Real-time output CSV.
    #[arg(long)]
    rtp: PathBuf,
    /// Day-ahead output CSV.
    #[arg(long)]
    dap: PathBuf,
}

#[derive(Args)]
struct GenValuesArgs {
    #[arg(long)]
    rtp: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    segments: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    storage: StorageFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Settings-table row, 1 to 4 [default: 3]
    #[arg(long)]
    setting: Option<u8>,
    #[arg(long)]
    rtp: PathBuf,
    #[arg(long)]
    dap: PathBuf,
    /// Precomputed value curves; generated from the prices when omitted.
    #[arg(long)]
    values: Option<PathBuf>,
    /// Number of seeds, trained as 0..N [default: 10]
    #[arg(long)]
    seeds: Option<usize>,
    /// Override the setting's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Model output file; seed and epoch logs are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    storage: StorageFlags,
}

#[derive(Args)]
struct BacktestArgs {
    #[arg(long, required_unless_present = "hindsight", conflicts_with = "hindsight")]
    model: Option<PathBuf>,
    /// Dispatch against these value curves instead of a model.
    #[arg(long)]
    hindsight: Option<PathBuf>,
    #[arg(long)]
    rtp: PathBuf,
    #[arg(long)]
    dap: PathBuf,
    /// Metrics report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-period dispatch CSV.
    #[arg(long)]
    dispatch_log: Option<PathBuf>,
    /// Setting label in the report [default: "model" or "hindsight"]
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    storage: StorageFlags,
}

#[derive(Args)]
struct CompareArgs {
    /// Report CSVs; later files win on duplicate labels.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Merged report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(core) = cause.downcast_ref::<vfarb_core::Error>() {
            return match core.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Input => EXIT_INPUT,
                ErrorClass::Numeric => EXIT_NUMERIC,
            };
        }
    }
    EXIT_OTHER
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::GenValues(a) => gen_values(a, &file),
        Command::Train(a) => train(a, &file),
        Command::Backtest(a) => backtest(a, &file),
        Command::Compare(a) => compare_reports(a),
    }
}

fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(vfarb_core::Error::Input(format!("input file {} not found", p.display())).into());
        }
    }
    Ok(())
}

fn schema(file: &RunConfig) -> PriceSchema {
    file.schema.clone().unwrap_or_default()
}

fn load(rtp: &Path, dap: &Path, file: &RunConfig) -> Result<PriceSeries> {
    require_files(&[rtp, dap])?;
    Ok(load_prices(rtp, dap, &schema(file))?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let series = synth_prices(a.seed, a.days, a.period_minutes, &SynthProfile::default())?;
    write_prices(&series, &a.rtp, &a.dap)?;
    println!("wrote {} periods to {} and {} days to {}", series.len(), a.rtp.display(), a.days, a.dap.display());
    Ok(())
}

fn gen_values(a: GenValuesArgs, file: &RunConfig) -> Result<()> {
    require_files(&[&a.rtp])?;
    let trace = load_rtp(&a.rtp, &schema(file))?;
    let storage = file.storage_with(&a.storage.section());
    let params = storage.params(trace.period_minutes as f64 / 60.0)?;
    let started = Instant::now();
    let series = ValueFunctionSeries::generate(&trace.values, &params, a.segments)?;
    let elapsed = started.elapsed();
    series.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "generated {} curves of {} segments in {:.2} s -> {}",
        series.len(),
        series.segments(),
        elapsed.as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn train(a: TrainArgs, file: &RunConfig) -> Result<()> {
    let prices = load(&a.rtp, &a.dap, file)?;
    let storage = file.storage_with(&a.storage.section());
    let params = storage.params(prices.period_hours())?;
    let setting = a.setting.or(file.train.setting).unwrap_or(3);
    let mut config = TrainConfig::setting(setting, params)?;
    config.soc0 = storage.soc0(&params)?;
    if let Some(n) = a.seeds.or(file.train.seeds) {
        config.n_seeds = n;
    }
    if let Some(e) = a.epochs.or(file.train.epochs) {
        if e == 0 {
            return Err(ConfigError::Invalid("epoch count must be positive".into()).into());
        }
        config.epochs = e;
    }

    let values = match &a.values {
        Some(p) => {
            require_files(&[p])?;
            let v = ValueFunctionSeries::read(p)?;
            if (v.capacity() - params.energy_mwh()).abs() > 1e-9 * params.energy_mwh() {
                return Err(vfarb_core::Error::Input(format!(
                    "{} was generated for {} MWh, asset has {} MWh",
                    p.display(),
                    v.capacity(),
                    params.energy_mwh()
                ))
                .into());
            }
            v
        }
        None => {
            info!("generating value curves for {} periods", prices.len());
            ValueFunctionSeries::generate(prices.rtp(), &params, DEFAULT_SEGMENTS)?
        }
    };
    let spec = config.feature_spec(prices.period_minutes())?;
    let dataset = build_dataset(&prices, &values, &spec, config.label_segments)?;
    info!(
        "training setting {setting}: {} samples, {} inputs, hidden {}, {} epochs, {} seeds",
        dataset.len(),
        dataset.input_dim(),
        config.hidden,
        config.epochs,
        config.n_seeds
    );
    let selection = train_select(&config, &dataset, &prices)?;
    selection.best.model.save(&a.out)?;
    let seed_log = sibling(&a.out, ".seeds.csv");
    let epoch_log = sibling(&a.out, ".epochs.csv");
    write_seed_log(&seed_log, &selection.runs)?;
    write_epoch_log(&epoch_log, &selection.runs)?;
    println!(
        "selected seed {} (training profit {:.2}) -> {}; logs {} and {}",
        selection.best.seed,
        selection.best.training_profit,
        a.out.display(),
        seed_log.display(),
        epoch_log.display()
    );
    Ok(())
}

fn backtest(a: BacktestArgs, file: &RunConfig) -> Result<()> {
    let prices = load(&a.rtp, &a.dap, file)?;
    let storage = file.storage_with(&a.storage.section());
    let params = storage.params(prices.period_hours())?;
    let soc0 = storage.soc0(&params)?;

    let (result, setting) = match (&a.model, &a.hindsight) {
        (Some(m), _) => {
            require_files(&[m])?;
            let model = MlpModel::load(m)?;
            (run_backtest(&prices, &params, CurveSource::Model(&model), soc0)?, "model")
        }
        (None, Some(h)) => {
            require_files(&[h])?;
            let series = ValueFunctionSeries::read(h)?;
            (run_backtest(&prices, &params, CurveSource::Hindsight(&series), soc0)?, "hindsight")
        }
        (None, None) => unreachable!("clap requires --model or --hindsight"),
    };
    let optimal = perfect_foresight_profit(prices.rtp(), &params, soc0)?;
    let labels = RunLabels {
        zone: prices.zone().to_string(),
        setting: a.label.clone().unwrap_or_else(|| setting.to_string()),
        duration_hours: params.duration_hours(),
        marginal_cost: params.marginal_cost(),
    };
    let report = compute_metrics(&result.state.log, optimal, prices.period_hours(), &labels);
    write_reports(&a.out, std::slice::from_ref(&report))?;
    if let Some(p) = &a.dispatch_log {
        write_dispatch_log(p, &result.state.log)?;
    }
    print!("{}", format_table(std::slice::from_ref(&report)));
    println!("profit {:.2} of optimal {:.2} over {} periods", report.profit, report.optimal_profit, report.periods);
    Ok(())
}

fn compare_reports(a: CompareArgs) -> Result<()> {
    require_files(&a.reports.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let mut all = Vec::new();
    for p in &a.reports {
        all.extend(read_reports(p)?);
    }
    let merged = compare(all);
    if let Some(out) = &a.out {
        write_reports(out, &merged)?;
    }
    print!("{}", format_table(&merged));
    Ok(())
}
