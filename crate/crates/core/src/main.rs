use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pulsepinn::artifacts::{read_report, validate_run, write_diagnostics, write_run, write_sweep};
use pulsepinn::config::{ModelKind, RunConfig};
use pulsepinn::losses::LossWeights;
use pulsepinn::pinn::{diagnostics, Activation, InitScheme, PinnModel};
use pulsepinn::system::Gate;
use pulsepinn::trainer::{sweep, train, SweepGrid};
use pulsepinn::validator::DEFAULT_SUBSTEPS;
use pulsepinn::{Error, Result};

#[derive(Parser)]
#[command(name = "pulsepinn", version, about = "Physics-informed pulse design for two-qubit gates")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run directory.
    Train(RunFlags),
    /// Re-simulate a run's pulses with the RK4 integrator.
    Validate(ValidateArgs),
    /// Train a grid of runs and write summary.csv.
    Sweep(SweepArgs),
    /// Write activation/gradient statistics of an untrained model.
    Diagnose(RunFlags),
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    gate: Option<Gate>,
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long)]
    gamma_abs: Option<f64>,
    #[arg(long)]
    gamma_em: Option<f64>,
    #[arg(long)]
    omega0: Option<f64>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    init: Option<InitScheme>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    t_final: Option<f64>,
    /// Overrides PULSEPINN_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Eight comma-separated numbers `re0,im0,…,re3,im3`.
    #[arg(long, allow_hyphen_values = true)]
    x0_override: Option<String>,
    /// `fid,model,trace`.
    #[arg(long)]
    loss_weights: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_list(field: &str, raw: &str, len: usize) -> Result<Vec<f64>> {
    let vals = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::config(field, e.to_string()))?;
    if vals.len() != len {
        return Err(Error::config(field, format!("expected {len} numbers, got {}", vals.len())));
    }
    Ok(vals)
}

impl RunFlags {
    /// Config file, then `PULSEPINN_SEED`, then explicit flags.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => base,
        };
        c.apply_env()?;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        set!(model, gate, theta, gamma_abs, gamma_em, omega0, activation, init, epochs, lr, n_steps, t_final, seed, out_dir);
        if let Some(raw) = &self.x0_override {
            let v = parse_list("x0_override", raw, 8)?;
            c.x0_override = Some([[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]]);
        }
        if let Some(raw) = &self.loss_weights {
            let v = parse_list("loss_weights", raw, 3)?;
            c.loss_weights = LossWeights {
                fid: v[0],
                model: v[1],
                trace: v[2],
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct ValidateArgs {
    run_dir: PathBuf,
    /// Second run whose pulses are compared against this one.
    #[arg(long)]
    paired: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SUBSTEPS)]
    substeps: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep grid; list flags override its axes.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long, value_delimiter = ',')]
    gates: Option<Vec<Gate>>,
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    omega0s: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    activations: Option<Vec<Activation>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Concurrent runs; defaults to the available cores.
    #[arg(long)]
    workers: Option<usize>,
}

fn cmd_train(flags: &RunFlags) -> Result<ExitCode> {
    let config = flags.resolve(RunConfig::default())?;
    let record = train(&config)?;
    write_run(&config.out_dir, &record)?;
    match &record.abort {
        None => {
            println!(
                "{} {}: fidelity {:.6} after {} epochs ({:.1}s) -> {}",
                config.model,
                config.gate,
                record.final_fidelity.unwrap_or(f64::NAN),
                record.history.len(),
                record.wall_clock_s,
                config.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Some(abort) => {
            eprintln!("error: run aborted at epoch {}: {}", abort.epoch, abort.reason);
            eprintln!("partial artifacts written to {}", config.out_dir.display());
            Ok(ExitCode::from(if abort.numerical { 3 } else { 1 }))
        }
    }
}

fn cmd_validate(args: &ValidateArgs) -> Result<ExitCode> {
    let report = validate_run(&args.run_dir, args.paired.as_deref(), args.substeps)?;
    println!(
        "state fidelity {:.6}, final populations {:?}",
        report.state_fidelity, report.final_populations
    );
    if let Some(f) = report.crosscheck_fidelity {
        println!("crosscheck fidelity {f:.6}");
    }
    if let Ok(r) = read_report(&args.run_dir) {
        log::info!("trainer reported fidelity {:?}", r.final_fidelity);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let mut grid = match &args.grid {
        Some(path) => serde_json::from_str::<SweepGrid>(&std::fs::read_to_string(path)?)?,
        None => SweepGrid::default(),
    };
    grid.base = args.run.resolve(grid.base.clone())?;
    if args.grid.is_none() {
        grid.seeds = vec![grid.base.seed];
        grid.omega0s = vec![grid.base.omega0];
        grid.activations = vec![grid.base.activation];
    }
    if let Some(v) = &args.gates {
        grid.gates = v.clone();
    }
    if let Some(v) = &args.gammas {
        grid.gammas = v.clone();
    }
    if let Some(v) = &args.omega0s {
        grid.omega0s = v.clone();
    }
    if let Some(v) = &args.activations {
        grid.activations = v.clone();
    }
    if let Some(v) = &args.seeds {
        grid.seeds = v.clone();
    }
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let entries = sweep(&grid, workers)?;
    write_sweep(&grid.base.out_dir, &entries)?;
    let failed = entries.iter().filter(|e| e.outcome.is_err()).count();
    println!(
        "{} runs, {} failed; summary in {}",
        entries.len(),
        failed,
        grid.base.out_dir.join(pulsepinn::artifacts::SUMMARY_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(flags: &RunFlags) -> Result<ExitCode> {
    let config = flags.resolve(RunConfig {
        out_dir: PathBuf::from("runs/diagnostics"),
        ..RunConfig::default()
    })?;
    let model = PinnModel::new(config.activation, config.omega0, config.init, config.seed);
    let diags = diagnostics(&model, &config.grid())?;
    write_diagnostics(&config.out_dir, &diags)?;
    println!("diagnostics for {} layers -> {}", diags.len(), config.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Train(flags) => cmd_train(flags),
        Command::Validate(args) => cmd_validate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Diagnose(flags) => cmd_diagnose(flags),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Config { .. } | Error::UnknownGate(_) | Error::Json(_) | Error::NegativeRate(_) => 2,
                e if e.is_numerical() => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
