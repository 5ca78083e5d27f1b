//! `gsqg`: solvers, identity checks and transport experiments for
//! traveling generalized SQG vortex pairs.

mod commands;
mod config;
mod error;
mod output;

use std::collections::BTreeMap;
use std::process::ExitCode;

use clap::error::ErrorKind;

use crate::config::{parse_config_text, RunConfig};
use crate::error::CliError;
use crate::output::RunDir;

fn settings(args: Vec<String>) -> Result<RunConfig, CliError> {
    let matches = match config::cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            std::process::exit(0);
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
    };
    let (command, sub) = matches.subcommand().expect("subcommand required");
    let mut map = BTreeMap::new();
    if let Some(path) = sub.get_one::<String>("config") {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
        map = parse_config_text(&text).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
    }
    for id in sub.ids() {
        let key = id.as_str();
        if key == "config" {
            continue;
        }
        if let Some(v) = sub.get_one::<String>(key) {
            map.insert(key.to_string(), v.clone());
        }
    }
    RunConfig::from_map(command, map).map_err(|e| {
        let mut app = config::cli();
        app.build();
        let usage = app.find_subcommand_mut(command).map(|c| c.render_usage().to_string()).unwrap_or_default();
        CliError::Usage(format!("{e}\n\n{usage}\n\nFor more information, try 'gsqg {command} --help'."))
    })
}

fn main() -> ExitCode {
    let cfg = match settings(std::env::args().collect()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(t) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("cannot start {t} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let mut out = match RunDir::create(&cfg.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = commands::run(&cfg, &mut out);
    if let Err(e) = out.finish(&cfg.echo, &cfg.command, &result) {
        eprintln!("cannot write manifest: {e}");
        return ExitCode::from(1);
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
