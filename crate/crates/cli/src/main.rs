//! `caldm`: phantom generation, staged training, sampling, evaluation and
//! memory profiling for the cascaded latent diffusion volume synthesizer.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use caldm::error::Error;
use caldm::eval::memory::CountingAllocator;
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{RunConfig, KEYS};

#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator;

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-phantoms", "write `count` synthetic phantoms and their labels to `dataset`"),
    ("train", "train one stage (`--stage`) from the dataset into `checkpoints`"),
    ("sample", "synthesize `count` volumes from a bundle manifest into `out`"),
    ("eval", "Intra-FID, Inter-FID and TV of `syn` against `real`"),
    ("profile", "peak memory of both decoding strategies over `ladder`"),
];

fn cli() -> Command {
    let mut cmd = Command::new("caldm")
        .about("Cascaded latent diffusion synthesis of 3D volumes")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_parser(clap::value_parser!(PathBuf))
                .help("key=value configuration file"),
        )
        .arg(
            Arg::new("no-refine")
                .long("no-refine")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("skip slice refinement (same as refine=false)"),
        );
    for (key, default, help) in KEYS {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        let mut arg = Arg::new(*key).long(*key).global(true).value_name("VALUE").help(help);
        if key.contains('_') {
            arg = arg.alias(key.replace('_', "-"));
        }
        cmd = cmd.arg(arg);
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> caldm::error::Result<RunConfig> {
    let mut overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|(k, _, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    if m.get_flag("no-refine") {
        overrides.push(("refine".into(), "false".into()));
    }
    RunConfig::resolve(m.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides)
}

/// 1 for invalid input, 2 for missing prerequisites, 3 for failures at run time.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Validation(_) | Error::Config(_) => 1,
        Error::Dependency(_) | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let run = || -> caldm::error::Result<()> {
        let cfg = resolve(sub)?;
        match name {
            "gen-phantoms" => commands::gen_phantoms(&cfg),
            "train" => commands::train(&cfg),
            "sample" => commands::sample(&cfg),
            "eval" => commands::eval(&cfg),
            "profile" => commands::profile(&cfg),
            _ => unreachable!("clap rejects unknown subcommands"),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
