use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mugrpo::config::{parse_config, parse_config_str, preset_json, preset_names};
use mugrpo::runner::{resolve_output_dir, run_with_threads};
use mugrpo::selfcheck;

/// Staged high-staleness policy optimization laboratory.
#[derive(Debug, Parser)]
#[command(name = "mugrpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    Run {
        config: PathBuf,
        /// Override a key, e.g. `--set update.lr=0.1` or `--set schedule.staleness=8`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads (defaults to all cores); outputs do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
        /// Write here instead of the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// List presets, or print one fully resolved.
    Presets { name: Option<String> },
    /// Run the built-in consistency checks.
    Verify,
}

/// Prints to stdout, ignoring errors such as a closed pipe.
fn say(text: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn fail(err: &mugrpo::Error) -> ExitCode {
    eprintln!("error: {err}");
    let mut source = std::error::Error::source(err);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
    ExitCode::from(if err.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run {
            config,
            overrides,
            threads,
            output_dir,
        } => {
            let cfg = match parse_config(&config, &overrides) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if threads == Some(0) {
                eprintln!("error: --threads must be at least 1");
                return ExitCode::from(EXIT_CONFIG);
            }
            let dir = output_dir.unwrap_or_else(|| resolve_output_dir(&cfg));
            match run_with_threads(&cfg, &dir, threads) {
                Ok(summary) => {
                    for line in &summary.headline {
                        say(line);
                    }
                    say(format!("wrote {} files to {}", summary.files.len(), summary.output_dir.display()));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Presets { name: None } => {
            for name in preset_names() {
                say(name);
            }
            ExitCode::SUCCESS
        }
        Command::Presets { name: Some(name) } => {
            let resolved = preset_json(&name).and_then(|_| parse_config_str(&format!(r#"{{"preset": "{name}"}}"#), &[]));
            match resolved {
                Ok(cfg) => {
                    say(cfg.to_json().trim_end());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Verify => {
            let results = selfcheck::run_all();
            let mut all = true;
            for r in &results {
                say(format_args!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail));
                all &= r.passed;
            }
            if all {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}
