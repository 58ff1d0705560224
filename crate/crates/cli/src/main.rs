//! Command-line front end: data generation, training, planning, tracking,
//! the model-comparison benchmark and its report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DVector;

use stabdyn::demo::build_dataset;
use stabdyn::harness::{
    emit_report, read_results_csv, run_benchmark, train_models, write_open_loop_csv, ModelKind, TrainedModel,
};
use stabdyn::io::{
    load_model, load_models, model_file_name, read_dataset_csv, save_model, write_dataset_csv, write_nominal_csv,
    write_trajectory_csv, ExperimentConfig,
};
use stabdyn::plant::Pvtol;
use stabdyn::tracking::{track_closed_loop, tvlqr_gains, LqrWeights};
use stabdyn::trainer::write_history_csv;
use stabdyn::trajopt::{cheb_grid, solve_trajopt, transfer_time, NlpConfig};
use stabdyn::Error;

#[derive(Parser)]
#[command(name = "stabdyn", version, about = "Learn stabilizable PVTOL dynamics and benchmark them")]
struct Cli {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON with schema_version).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate demonstrations and write dataset.csv.
    GenData,
    /// Fit models on a subsample of the dataset.
    Train(TrainArgs),
    /// Plan a transfer to hover with a learned model.
    Trajopt(PlanArgs),
    /// Plan with a learned model and track the plan on the true plant.
    Track(PlanArgs),
    /// Run every model on the benchmark initial conditions.
    Bench(BenchArgs),
    /// Summaries and box plot from a results CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset CSV [default: <out>/dataset.csv].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated model kinds (N-R, R-R, CCM-R).
    #[arg(long, default_value = "N-R,R-R,CCM-R", value_delimiter = ',')]
    models: Vec<String>,
}

#[derive(Args)]
struct PlanArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Initial state px,pz,phi,vx,vz,phidot.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x0: Vec<f64>,
    /// Horizon in s [default: from the hover distance].
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory holding the model files [default: <out>].
    #[arg(long)]
    models_dir: Option<PathBuf>,
    #[arg(long, default_value = "N-R,R-R,CCM-R", value_delimiter = ',')]
    models: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSV [default: <out>/results.csv].
    #[arg(long)]
    results: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Solver(_) | Error::Singular(_) | Error::Certificate { .. } | Error::Integration { .. } => 3,
        _ => 2,
    }
}

fn parse_kinds(names: &[String]) -> Result<Vec<ModelKind>, Error> {
    names
        .iter()
        .map(|n| ModelKind::parse(n.trim()).ok_or_else(|| Error::Config(format!("unknown model kind `{n}`"))))
        .collect()
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn initial_state(x0: &[f64]) -> Result<DVector<f64>, Error> {
    if x0.len() != 6 || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("--x0 needs six finite numbers".into()));
    }
    Ok(DVector::from_column_slice(x0))
}

fn plan(cfg: &ExperimentConfig, model: &TrainedModel, args: &PlanArgs) -> Result<stabdyn::trajopt::NominalTrajectory, Error> {
    let x0 = initial_state(&args.x0)?;
    let horizon = args.horizon.unwrap_or_else(|| transfer_time(x0.rows(0, 2).norm()));
    let grid = cheb_grid(cfg.bench.nodes)?;
    let nom = solve_trajopt(&model.dynamics, &x0, &DVector::zeros(6), horizon, &grid, &NlpConfig::default())?;
    info!(
        "trajopt {}: cost {:.4} collocation residual {:.2e} over T = {horizon:.2} s",
        nom.status.label(),
        nom.cost,
        nom.collocation_residual
    );
    Ok(nom)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    ensure_dir(&cli.out)?;
    match &cli.cmd {
        Command::GenData => {
            let data = build_dataset(&cfg.demo, &cfg.plant)?;
            write_dataset_csv(&cli.out.join("dataset.csv"), &data)?;
            cfg.save(&cli.out.join("config.json"))?;
            println!("{} tuples -> {}", data.len(), cli.out.join("dataset.csv").display());
        }
        Command::Train(args) => {
            let path = args.data.clone().unwrap_or_else(|| cli.out.join("dataset.csv"));
            let pool = read_dataset_csv(&path)?;
            let kinds = parse_kinds(&args.models)?;
            let started = Instant::now();
            let (models, history) = train_models(&pool, cfg.n_train, cfg.n_constraint, &cfg.trainer, &kinds)?;
            for m in &models {
                let p = cli.out.join(model_file_name(m.kind, m.n_train));
                save_model(&p, m)?;
                println!("{} -> {}", m.kind.label(), p.display());
            }
            if !history.is_empty() {
                write_history_csv(&cli.out.join(format!("history_N{}.csv", cfg.n_train)), &history)?;
            }
            println!("trained in {:.1} s", started.elapsed().as_secs_f64());
        }
        Command::Trajopt(args) => {
            let model = load_model(&args.model)?;
            let nom = plan(&cfg, &model, args)?;
            let p = cli.out.join("nominal.csv");
            write_nominal_csv(&p, &nom)?;
            println!("{} cost {:.6} -> {}", nom.status.label(), nom.cost, p.display());
        }
        Command::Track(args) => {
            let model = load_model(&args.model)?;
            let nom = plan(&cfg, &model, args)?;
            let gains = tvlqr_gains(&model.dynamics, &nom, &LqrWeights::pvtol())?;
            let x0 = initial_state(&args.x0)?;
            let realized = track_closed_loop(&Pvtol::new(cfg.plant), &nom, &gains, &x0, cfg.bench.sim_dt)?;
            write_nominal_csv(&cli.out.join("nominal.csv"), &nom)?;
            write_trajectory_csv(&cli.out.join("realized.csv"), &realized)?;
            let rms = stabdyn::harness::rms_error(&realized, &nom)?;
            let diverged = stabdyn::harness::classify_stability(&realized, &nom, cfg.bench.divergence_threshold);
            println!("rms {rms:.4} diverged {diverged}");
        }
        Command::Bench(args) => {
            let dir = args.models_dir.clone().unwrap_or_else(|| cli.out.clone());
            let kinds = parse_kinds(&args.models)?;
            let models = load_models(&dir, &kinds, cfg.n_train)?;
            let started = Instant::now();
            let rows = run_benchmark(&models, &cfg.plant, &cfg.bench)?;
            emit_report(&rows, &cli.out)?;
            write_open_loop_csv(&cli.out.join("open_loop.csv"), &rows)?;
            for k in &kinds {
                let n = rows.iter().filter(|r| r.model == *k).count();
                let bad = rows.iter().filter(|r| r.model == *k && r.diverged).count();
                println!("{}: {bad}/{n} unstable", k.label());
            }
            println!("benchmark in {:.1} s -> {}", started.elapsed().as_secs_f64(), cli.out.display());
        }
        Command::Report(args) => {
            let path = args.results.clone().unwrap_or_else(|| cli.out.join("results.csv"));
            let rows = read_results_csv(&path)?;
            emit_report(&rows, &cli.out)?;
            println!("report -> {}", cli.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
