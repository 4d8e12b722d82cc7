mod args;
mod commands;

use args::Cli;
use clap::{CommandFactory, Parser};
use std::ffi::OsString;
use std::process::ExitCode;

pub const THREADS_ENV: &str = "MACRID_THREADS";

/// A failed run, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<macrid::Error> for Failure {
    fn from(e: macrid::Error) -> Self {
        use macrid::Error;
        match e {
            e if e.is_numeric() => Failure::Numeric(e.to_string()),
            e @ (Error::Precondition(_) | Error::Dimension(_)) => Failure::Usage(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn threads() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => s
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive count, got {s:?}"))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = threads()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .format_timestamp(None)
        .init();
    commands::dispatch(&cli, rayon::current_num_threads())
}

/// Rewrites `--json FILE` to `--json=FILE` so that a bare `--json` never
/// swallows the subcommand or the next flag.
fn normalize_json(args: impl IntoIterator<Item = OsString>) -> Vec<OsString> {
    let subcommands: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let mut out: Vec<OsString> = Vec::new();
    let mut args = args.into_iter().peekable();
    while let Some(a) = args.next() {
        if a == "--json" {
            if let Some(next) = args.peek().and_then(|n| n.to_str()) {
                if !next.starts_with('-') && !subcommands.iter().any(|s| s == next) {
                    out.push(format!("--json={next}").into());
                    args.next();
                    continue;
                }
            }
        }
        out.push(a);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(normalize_json(std::env::args_os())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
