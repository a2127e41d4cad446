use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nqs::driver::{
    self, bench_scaling, run_ed, select_init, train, transfer, Checkpoint, DriverError, RunConfig, ScalingMode,
};

#[derive(Parser)]
#[command(
    name = "nqs",
    version,
    about = "Neural-network quantum states: VMC training and exact checks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sampling threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Print the effective configuration, defaults included, and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the SR optimization loop.
    Train,
    /// Reuse a checkpoint's parameters on the configured (larger) lattice.
    Transfer {
        /// Source checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Target lattice; defaults to the configured one.
        #[arg(long)]
        lx: Option<usize>,
        #[arg(long)]
        ly: Option<usize>,
    },
    /// Pick the best (parameters, chain) pair among random initializations.
    SelectInit {
        /// Number of candidates; defaults to `selection.candidates`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Exact ground state of the configured model.
    Ed,
    /// Strong- or weak-scaling timing of one SR step.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        worker_counts: Vec<usize>,
        #[arg(long, default_value = "strong")]
        mode: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Print the contents of a checkpoint.
    InspectCkpt { path: PathBuf },
}

fn load_config(common: &Common) -> Result<RunConfig, DriverError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(r) = &common.resume {
        cfg.resume_from = Some(r.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), DriverError> {
    let mut cfg = load_config(&cli.common)?;
    let out = &cli.common.out_dir;
    if let Command::Transfer { lx, ly, .. } = &cli.command {
        cfg.lattice.lx = lx.unwrap_or(cfg.lattice.lx);
        cfg.lattice.ly = ly.unwrap_or(cfg.lattice.ly);
    }
    if cli.common.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match cli.command {
        Command::Train => {
            let outcome = train(&cfg, out)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "step = {}\ne_mean_per_site = {:.10}\ne_stderr = {:.3e}\ncheckpoint = {}\nlog = {}",
                    last.step,
                    last.e_mean_per_site,
                    last.e_stderr,
                    outcome.checkpoint_path.display(),
                    outcome.log_path.display()
                );
            }
        }
        Command::Transfer { from, .. } => {
            let source = Checkpoint::load(&from)?;
            let outcome = transfer(&cfg, &source, &source.network, Some(out))?;
            println!(
                "lattice = {}x{}\ninitial_e_mean_per_site = {:.10}\ne_stderr = {:.3e}\ncheckpoint = {}",
                outcome.checkpoint.lx,
                outcome.checkpoint.ly,
                outcome.initial_estimate.e_mean_per_site,
                outcome.initial_estimate.e_stderr,
                out.join(driver::CHECKPOINT_FILE).display()
            );
        }
        Command::SelectInit { k } => {
            let k = k.unwrap_or(cfg.selection.candidates);
            let outcome = select_init(&cfg, k, Some(out))?;
            let s = &outcome.selection;
            println!(
                "candidate = {}\nchain = {}\nmean_energy_per_site = {:.10}\ncheckpoint = {}",
                s.candidate,
                s.chain,
                s.mean_energy,
                out.join(driver::CHECKPOINT_FILE).display()
            );
        }
        Command::Ed => print!("{}", run_ed(&cfg)?.to_text()),
        Command::Bench {
            worker_counts,
            mode,
            reps,
        } => {
            let mode = match mode.as_str() {
                "strong" => ScalingMode::Strong,
                "weak" => ScalingMode::Weak,
                other => return Err(DriverError::Config(format!("unknown scaling mode {other:?}"))),
            };
            let rows = bench_scaling(&cfg, &worker_counts, mode, reps)?;
            std::fs::create_dir_all(out).map_err(|e| DriverError::io(out, e))?;
            let path = out.join("bench.csv");
            driver::bench::write_report(&path, &rows)?;
            print!(
                "{}",
                std::fs::read_to_string(&path).map_err(|e| DriverError::io(&path, e))?
            );
        }
        Command::InspectCkpt { path } => println!("{}", Checkpoint::load(&path)?.describe()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
