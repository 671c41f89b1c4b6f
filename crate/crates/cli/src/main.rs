//! `didmdn`: dataset synthesis, training, inference, evaluation and the
//! ablation protocol.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, ConfigFile};

fn load_config(path: Option<&std::path::Path>) -> Result<ConfigFile, String> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let file = match load_config(cli.config.as_deref()) {
        Ok(f) => f,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(mut a) => {
            a.merge(file.synth);
            commands::synth(a)
        }
        Command::TrainClassifier(mut a) => {
            a.merge(file.train_classifier);
            commands::train_classifier(a)
        }
        Command::TrainDerainer(mut a) => {
            a.merge(file.train_derainer);
            commands::train_derainer(a)
        }
        Command::Derain(mut a) => {
            a.merge(file.derain);
            commands::derain(a)
        }
        Command::Evaluate(mut a) => {
            a.merge(file.evaluate);
            commands::evaluate(a)
        }
        Command::Ablate(mut a) => {
            a.merge(file.ablate);
            commands::ablate(a)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
