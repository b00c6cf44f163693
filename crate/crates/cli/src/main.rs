mod args;
mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;
use thiserror::Error;

use tightbox_core::dataset::DatasetError;
use tightbox_core::evaluation::EvalError;
use tightbox_core::interp::InterpError;
use tightbox_core::model::ModelError;
use tightbox_core::training::TrainError;

use args::{Cli, Command};

/// Failure of a command. Validation errors (bad flags, configs or inputs)
/// exit with 1, runtime errors with 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::Image { .. } => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Dataset(d) => d.into(),
            ModelError::UnsupportedBackbone(_)
            | ModelError::UnsupportedInputSize(_)
            | ModelError::ShapeMismatch { .. }
            | ModelError::Checkpoint { .. } => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Dataset(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(v) => v.into(),
            TrainError::EmptyDataset | TrainError::InvalidConfig(_) | TrainError::SizeMismatch { .. } => {
                Self::Validation(e.to_string())
            }
            TrainError::Io { .. } => Self::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Dataset(d) => d.into(),
            EvalError::Model(m) => m.into(),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<InterpError> for CliError {
    fn from(e: InterpError) -> Self {
        match e {
            InterpError::Model(m) => m.into(),
            InterpError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

fn out_dir(command: &Command) -> Option<PathBuf> {
    match command {
        Command::Synth(a) => Some(a.out.clone()),
        Command::Extract(a) => Some(a.out.clone()),
        Command::Stats(a) => Some(a.out.clone()),
        Command::Train(a) => Some(a.out.clone()),
        Command::Finetune(a) => Some(a.train.out.clone()),
        Command::Eval(a) => Some(a.out.clone()),
        Command::Refine(a) => Some(a.out.clone()),
        Command::TrackInterp(a) => Some(a.out.clone()),
        Command::Serve(_) => None,
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Synth(_) => "synth",
        Command::Extract(_) => "extract",
        Command::Stats(_) => "stats",
        Command::Train(_) => "train",
        Command::Finetune(_) => "finetune",
        Command::Eval(_) => "eval",
        Command::Refine(_) => "refine",
        Command::TrackInterp(_) => "track-interp",
        Command::Serve(_) => "serve",
    }
}

fn write_error_json(dir: &Path, command: &str, err: &CliError) {
    let body = json!({
        "command": command,
        "kind": err.kind(),
        "exit_code": err.exit_code(),
        "message": err.to_string(),
    });
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join("error.json"), body.to_string() + "\n");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let name = command_name(&cli.command);
    let out = out_dir(&cli.command);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("tightbox {name}: {err}");
            if let Some(dir) = out {
                write_error_json(&dir, name, &err);
            }
            ExitCode::from(err.exit_code())
        }
    }
}
