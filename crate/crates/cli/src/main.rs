use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irene::engine::Mode;
use irene::experiment::{
    emit_plot_data, run_single, run_sweep, write_run, write_sweep, ExperimentConfig, RunReport, SweepResult,
};
use irene::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "irene", version, about = "Train encoders that hide a private attribute")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Added to every seed in the config.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// 80 epochs with decay at 40 and 60 instead of the scaled schedule.
    #[arg(long)]
    full_protocol: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration, once per seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides `mode` in the config.
        #[arg(long)]
        mode: Option<Mode>,
        /// Overrides `data.rho` in the config.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Run every (rho, mode, seed) cell of the sweep section.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Turn a sweep table into per-panel plot tables.
    Plotdata {
        /// `sweep.csv` written by the sweep command.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print configuration.
    Config {
        #[arg(long, required = true)]
        print_defaults: bool,
        #[arg(long)]
        full_protocol: bool,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if common.full_protocol {
        config = config.full_protocol();
    }
    config = config.with_seed_offset(common.seed_offset);
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn run(common: Common, mode: Option<Mode>, rho: Option<f64>) -> ExitCode {
    let mut config = match load(&common) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(m) = mode {
        config.mode = m;
    }
    if let Some(r) = rho {
        config.data.rho = r;
        if let Err(e) = config.validate() {
            return fail(&e);
        }
    }
    println!("config {} mode {} rho {}", config.hash(), config.mode, config.data.rho);
    for &seed in &config.seeds {
        let outcome = match run_single(&config, config.mode, seed) {
            Ok(o) => o,
            Err(e) => return fail(&e),
        };
        let report = RunReport::new(&config, config.mode, seed, outcome.eval.clone());
        if let Err(e) = write_run(&config.output, &report, &outcome.trace) {
            return fail(&e);
        }
        let r = &outcome.eval;
        println!(
            "seed {seed}: target {:.4} leakage {:.4} (probe {:.4}, chance {:.4}) mi {:.5}",
            r.target_accuracy, r.leakage_accuracy_cotrained, r.leakage_accuracy_probe, r.chance_level, r.mi_proxy_final
        );
    }
    ExitCode::SUCCESS
}

fn sweep(common: Common, workers: usize) -> ExitCode {
    let config = match load(&common) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let result = match run_sweep(&config, workers) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    match write_sweep(&config.output, &result) {
        Ok((rows, agg)) => println!("wrote {} and {}", rows.display(), agg.display()),
        Err(e) => return fail(&e),
    }
    let failures = result.failures();
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failures} of {} runs failed; see the error column", result.rows.len());
        ExitCode::from(EXIT_PARTIAL)
    }
}

fn plotdata(input: PathBuf, out: PathBuf) -> ExitCode {
    let file = match File::open(&input) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: cannot open {}: {e}", input.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match SweepResult::read_csv(file) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match emit_plot_data(&result, &out) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run { common, mode, rho } => run(common, mode, rho),
        Command::Sweep { common, workers } => sweep(common, workers),
        Command::Plotdata { input, out } => plotdata(input, out),
        Command::Config { full_protocol, .. } => {
            let config = ExperimentConfig::default();
            let config = if full_protocol { config.full_protocol() } else { config };
            print!("{}", config.to_toml());
            ExitCode::SUCCESS
        }
    }
}
