use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppgen::dataset::Dataset;
use ppgen::hemodynamics::{load_pressure_waves, DynamicsPrior};
use ppgen::inference::{evaluate, infer, MisspecModel, NpeModel};
use ppgen::rng;
use ppgen::transport::{simulate, Mode, SlabGeometry};
use ppgen_nn::TensorFile;

use ppgen_cli::pipeline::{misspec_from_file, run_pipeline, RunManifest, Stage};
use ppgen_cli::store::{Store, STORE_ENV};
use ppgen_cli::{report, tables, CliError, ExperimentConfig, Profile, Result};

#[derive(Parser)]
#[command(name = "ppgen", version, about = "Biophysical PPG simulation and hybrid amortized inference")]
struct Cli {
    /// Artifact store root.
    #[arg(long, env = STORE_ENV, default_value = "ppgen-store", global = true)]
    store: PathBuf,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one Monte Carlo simulation and print detector readings as CSV.
    McRun(McRunArgs),
    /// Build the optical lookup tables.
    LutBuild(ExperimentArgs),
    /// Train the light-transport surrogates (builds tables first if needed).
    SurrogateTrain(ExperimentArgs),
    /// Sample blood-volume waveforms from the dynamics prior.
    BvGen(BvGenArgs),
    /// Generate simulated training sets and observation sets.
    DatasetGen(ExperimentArgs),
    /// Pretrain the posterior networks.
    NpeTrain(ExperimentArgs),
    /// Fit the misspecification offsets and the Real-only baseline.
    HaiFit(ExperimentArgs),
    /// Posterior means for a dataset file, written as CSV.
    Infer(InferArgs),
    /// Score estimates against the labels of a dataset file.
    Evaluate(EvaluateArgs),
    /// Write correlation and MAPE tables and bar charts for a finished run.
    Report(ReportArgs),
    /// Run every stage and write the report.
    Pipeline(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; overrides are merged over its profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale profile used when no config file is given.
    #[arg(long, value_enum, default_value_t = Profile::Desk, conflicts_with = "config")]
    profile: Profile,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::preset(self.profile)),
        }
    }
}

#[derive(Args)]
struct McRunArgs {
    /// Absorption per layer (mm^-1), comma separated.
    #[arg(long, value_delimiter = ',', required_unless_present = "scatter_only")]
    mu_a: Vec<f64>,
    /// Scattering coefficient (mm^-1).
    #[arg(long)]
    mu_s: f64,
    #[arg(long, default_value_t = 0.9)]
    g: f64,
    #[arg(long, default_value_t = 100_000)]
    photons: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record path lengths without absorption.
    #[arg(long)]
    scatter_only: bool,
}

#[derive(Args)]
struct BvGenArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    timesteps: usize,
    /// CSV of pressure waves (`sample_rate,p0,...`); one output pulse per row.
    #[arg(long)]
    pressure: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained posterior network (tensor file).
    #[arg(long)]
    npe: PathBuf,
    /// Learned offset (tensor file); none means no correction.
    #[arg(long)]
    misspec: Option<PathBuf>,
    /// Dataset tensor file with the pulses to invert.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    estimates: PathBuf,
    /// Dataset tensor file holding the true parameters.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Report this manifest instead of the one for the config.
    #[arg(long, conflicts_with_all = ["config", "profile"])]
    manifest: Option<PathBuf>,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_tensors(path: &Path) -> Result<TensorFile> {
    if !path.exists() {
        return Err(CliError::Usage(format!("no such file: {}", path.display())));
    }
    Ok(TensorFile::load(path)?)
}

fn mc_run(a: &McRunArgs) -> Result<()> {
    let geom = SlabGeometry::default();
    let mode = if a.scatter_only {
        Mode::ScatterOnly
    } else {
        Mode::Absorbing {
            mu_a: a.mu_a.as_slice().try_into().map_err(|_| CliError::Usage("--mu-a needs 3 values".into()))?,
        }
    };
    let reading = simulate(&geom, a.mu_s, a.g, mode, a.photons, a.seed)?.reading();
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(["detector", "spacing_mm", "fraction", "std_error"])?;
    for (i, ((f, e), s)) in reading.fractions.iter().zip(&reading.std_errors).zip(&geom.spacings).enumerate() {
        w.write_record([i.to_string(), s.to_string(), f.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn bv_gen(a: &BvGenArgs) -> Result<()> {
    let prior = DynamicsPrior::default();
    let pulses = match &a.pressure {
        Some(p) => load_pressure_waves(p)?
            .iter()
            .enumerate()
            .map(|(i, w)| prior.from_wave(&mut rng::indexed(a.seed, i as u64), w))
            .collect::<ppgen::Result<Vec<_>>>()?,
        None => (0..a.n)
            .map(|i| prior.sample(&mut rng::indexed(a.seed, i as u64), a.timesteps))
            .collect::<ppgen::Result<Vec<_>>>()?,
    };
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(output(&a.out)?);
    for (i, (q2, q3)) in pulses.iter().enumerate() {
        for (name, q) in [("dBV2", q2), ("dBV3", q3)] {
            w.write_record([i.to_string(), name.to_string()].into_iter().chain(q.iter().map(f64::to_string)))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn staged(a: &ExperimentArgs, store: &Store, until: Stage) -> Result<RunManifest> {
    let cfg = a.load()?;
    let m = run_pipeline(&cfg, store, until)?;
    println!("manifest {}", store.manifest_path(&m.config_hash).display());
    for s in m.of_stage(until) {
        for art in &s.artifacts {
            println!("{}\t{}", s.name, store.resolve(art).display());
        }
    }
    Ok(m)
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let npe = NpeModel::from_tensor_file(&load_tensors(&a.npe)?)?;
    let (r, n, _) = npe.shape();
    let misspec = match &a.misspec {
        Some(p) => misspec_from_file(&load_tensors(p)?)?,
        None => MisspecModel::zeros(r, n),
    };
    let data = Dataset::from_tensor_file(&load_tensors(&a.data)?)?;
    let est: Vec<_> = infer(&data.pulses, &npe, &misspec)?.into_iter().map(|p| p.mean).collect();
    tables::write_estimates(output(&a.out)?, &est)
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    let file = File::open(&a.estimates).map_err(|e| CliError::Usage(format!("{}: {e}", a.estimates.display())))?;
    let est = tables::read_estimates(file)?;
    let data = Dataset::from_tensor_file(&load_tensors(&a.data)?)?;
    tables::write_eval_csv(output(&a.out)?, &evaluate(&est, &data.thetas)?)
}

fn run_report(a: &ReportArgs, store: &Store) -> Result<()> {
    let manifest = match &a.manifest {
        Some(p) => RunManifest::load(p)?,
        None => {
            let cfg = a.experiment.load()?;
            let path = store.manifest_path(&ppgen_cli::pipeline::config_hash(&cfg)?);
            if !path.exists() {
                return Err(CliError::Usage(format!("no run recorded for this config ({})", path.display())));
            }
            RunManifest::load(&path)?
        }
    };
    let bundle = report::report(store, &manifest)?;
    println!("{}", bundle.dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let store = || Store::open(&cli.store);
    match &cli.command {
        Command::McRun(a) => mc_run(a),
        Command::BvGen(a) => bv_gen(a),
        Command::Infer(a) => run_infer(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::LutBuild(a) => staged(a, &store()?, Stage::Lut).map(drop),
        Command::SurrogateTrain(a) => staged(a, &store()?, Stage::Surrogate).map(drop),
        Command::DatasetGen(a) => staged(a, &store()?, Stage::Dataset).map(drop),
        Command::NpeTrain(a) => staged(a, &store()?, Stage::Npe).map(drop),
        Command::HaiFit(a) => staged(a, &store()?, Stage::Hai).map(drop),
        Command::Report(a) => run_report(a, &store()?),
        Command::Pipeline(a) => {
            let store = store()?;
            let m = staged(a, &store, Stage::Evaluate)?;
            println!("{}", report::report(&store, &m)?.dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = ["info", "debug", "trace"][cli.verbose.min(2) as usize];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
