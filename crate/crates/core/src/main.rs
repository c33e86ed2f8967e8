use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfedavgm::runner::{self, presets, render, ExitStatus};

#[derive(Parser)]
#[command(name = "dfedavgm", version, about = "Decentralized federated averaging with momentum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a TOML config.
    Run { config: PathBuf },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Run a built-in sweep (bits_sweep, epochs_sweep, algo_compare).
    Preset {
        name: presets::Preset,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Draw SVG charts for every run CSV in a directory.
    Render { dir: PathBuf },
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status.code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap's own usage-error code (2) would collide with the divergence code
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit(ExitStatus::Validation) } else { exit(ExitStatus::Success) };
        }
    };
    if let Err(e) = runner::init_worker_pool() {
        log::error!("{e}");
        return exit(ExitStatus::Validation);
    }
    match cli.command {
        Command::Run { config } => exit(runner::run_from_config(&config)),
        Command::Validate { config } => match runner::load_config(&config) {
            Ok(cfg) => {
                println!("{}: {} experiment(s) ok", config.display(), cfg.experiments.len());
                exit(ExitStatus::Success)
            }
            Err(e) => {
                log::error!("{e}");
                exit(e.exit_status())
            }
        },
        Command::Preset { name, out } => match presets::run_preset(name, &out) {
            Ok(report) => {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                let all_ok = report.entries.iter().all(|e| e.completed);
                exit(if all_ok { ExitStatus::Success } else { ExitStatus::Divergence })
            }
            Err(e) => {
                log::error!("{e}");
                exit(e.exit_status())
            }
        },
        Command::Render { dir } => match render::render_dir(&dir) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                exit(ExitStatus::Success)
            }
            Err(e) => {
                log::error!("{e}");
                exit(e.exit_status())
            }
        },
    }
}
