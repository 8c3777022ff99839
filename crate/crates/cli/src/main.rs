//! `depthlab` command-line front end.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use depthlab::Error;

use config::{keys, RunConfig, SUBCOMMANDS};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn cli() -> Command {
    let mut cmd = Command::new("depthlab")
        .about("Depth- and width-scaled residual networks: training, limits and checks")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key = value file; flags override it"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .default_value("depthlab-out")
                    .help("output directory"),
            )
            .arg(
                Arg::new("workers")
                    .long("workers")
                    .value_name("N")
                    .help("parallel tasks [default: $DEPTHLAB_WORKERS or 1]"),
            );
        for k in keys(name) {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(k.name)
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", k.help, k.default)),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn workers(m: &ArgMatches) -> depthlab::Result<usize> {
    let (raw, source) = match m.get_one::<String>("workers") {
        Some(v) => (v.clone(), "workers"),
        None => match std::env::var("DEPTHLAB_WORKERS") {
            Ok(v) => (v, "DEPTHLAB_WORKERS"),
            Err(_) => return Ok(1),
        },
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::Config(format!(
            "key '{source}': '{raw}' is not a positive integer"
        ))),
    }
}

fn resolve(name: &str, m: &ArgMatches) -> depthlab::Result<(RunConfig, Option<String>)> {
    let mut cfg = RunConfig::defaults(name);
    let mut original = None;
    if let Some(path) = m.get_one::<String>("config") {
        let path = PathBuf::from(path);
        cfg.apply_file(&path)?;
        original = std::fs::read_to_string(&path).ok();
    }
    for k in keys(name) {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok((cfg, original))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Precondition(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Diverged(_) => EXIT_DIVERGED,
        _ => EXIT_FAILED,
    }
}

fn run(argv: Vec<OsString>) -> u8 {
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let Some((name, m)) = matches.subcommand() else {
        return EXIT_CONFIG;
    };
    let out = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    let prepared = workers(m).and_then(|w| resolve(name, m).map(|c| (w, c)));
    let (workers, (cfg, original)) = match prepared {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    match commands::execute(name, &cfg, original.as_deref(), &out, workers) {
        Ok(outcome) => outcome.code(),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}
