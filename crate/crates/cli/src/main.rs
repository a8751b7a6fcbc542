use clap::{Args, Parser, Subcommand};
use haarcol_cli::config::{self, parse_config, Mode};
use haarcol_cli::exec::{self, EXIT_CONFIG};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "haarcol",
    version,
    about = "Haar collocation solver for coupled degenerate reaction-diffusion systems",
    after_help = "Run `haarcol presets` for the conductivity, ionic, stimulus, and anchor presets."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Advance one configured problem and write field snapshots
    Simulate(ModeArgs),
    /// Compare several step sizes against a finer reference run
    ErrorTable(ModeArgs),
    /// Sweep resolution levels against the finest as reference
    GridValidation(ModeArgs),
    /// Fit the temporal convergence order over a step-size sweep
    TemporalOrder(ModeArgs),
    /// Measure wavelet coefficient decay of a named test function
    CoeffDecay(ModeArgs),
    /// List the named presets the config format accepts
    Presets,
}

#[derive(Args)]
struct ModeArgs {
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to out_dir from the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Upper bound on concurrent runs (sweeps run sequentially for
    /// reproducible output; the value is recorded in the manifest)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Probe points overriding the config, formatted like the probes key
    #[arg(long)]
    seed_probes: Option<String>,
}

fn run_mode(mode: Mode, args: &ModeArgs) -> u8 {
    let text = match std::fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return EXIT_CONFIG as u8;
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return EXIT_CONFIG as u8;
        }
    };
    if let Some(probes) = &args.seed_probes {
        let patched = format!(
            "[problem]\ndim = {}\ndomain = {}\nt_final = 1\n[numerics]\nj = 1\ndt = 1\n[outputs]\nprobes = {probes}\n",
            cfg.problem.dim,
            cfg.problem
                .domain
                .iter()
                .map(|&(lo, hi)| format!("{lo:e},{hi:e}"))
                .collect::<Vec<_>>()
                .join(";")
        );
        match parse_config(&patched) {
            Ok(parsed) => cfg.outputs.probes = parsed.outputs.probes,
            Err(e) => {
                eprintln!("error: --seed-probes: {e}");
                return EXIT_CONFIG as u8;
            }
        }
    }
    let out_dir = match args.out.clone().or_else(|| {
        cfg.outputs.out_dir.as_ref().map(PathBuf::from)
    }) {
        Some(dir) => dir,
        None => {
            eprintln!("error: no output directory; pass --out or set out_dir in [outputs]");
            return EXIT_CONFIG as u8;
        }
    };
    exec::execute(mode, &cfg, &out_dir, args.jobs) as u8
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Simulate(args) => run_mode(Mode::Simulate, args),
        Command::ErrorTable(args) => run_mode(Mode::ErrorTable, args),
        Command::GridValidation(args) => run_mode(Mode::GridValidation, args),
        Command::TemporalOrder(args) => run_mode(Mode::TemporalOrder, args),
        Command::CoeffDecay(args) => run_mode(Mode::CoeffDecay, args),
        Command::Presets => {
            print!("{}", config::describe_presets());
            0
        }
    };
    ExitCode::from(code)
}
