//! The fine-tuning step, delegated to an external command.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use crate::error::{Error, Result};

/// Arguments handed to a trainer for iteration `iteration`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerRequest {
    pub iteration: usize,
    /// Pseudo-label dataset directory.
    pub dataset: PathBuf,
    pub features_in: PathBuf,
    /// Where refreshed features must be written. A `predictions/` directory
    /// next to it, if created, replaces the prediction store for the next iteration.
    pub features_out: PathBuf,
    pub seed: u64,
    /// File receiving the trainer's output, when it produces any.
    pub log: PathBuf,
}

pub trait Trainer {
    /// Runs one fine-tuning step; returns the exit status (0 = success).
    fn train(&self, request: &TrainerRequest) -> Result<i32>;
}

/// Runs `<program> <args..> --dataset D --features-in I --features-out O`.
///
/// The child also sees `FRAGDIFF_ITERATION` and `FRAGDIFF_SEED`.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandTrainer {
    pub argv: Vec<String>,
}

impl CommandTrainer {
    pub fn new(argv: Vec<String>) -> Result<Self> {
        if argv.is_empty() {
            return Err(Error::InvalidConfig("empty trainer command".into()));
        }
        Ok(CommandTrainer { argv })
    }

    pub fn command_line(&self, request: &TrainerRequest) -> Vec<String> {
        let mut out = self.argv.clone();
        for (flag, path) in [
            ("--dataset", &request.dataset),
            ("--features-in", &request.features_in),
            ("--features-out", &request.features_out),
        ] {
            out.push(flag.into());
            out.push(path.display().to_string());
        }
        out
    }
}

fn log_file(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

impl Trainer for CommandTrainer {
    fn train(&self, request: &TrainerRequest) -> Result<i32> {
        let argv = self.command_line(request);
        let log = log_file(&request.log)?;
        let log_err = log.try_clone().map_err(|e| Error::io(&request.log, e))?;
        let status = Command::new(&argv[0])
            .args(&argv[1..])
            .env("FRAGDIFF_ITERATION", request.iteration.to_string())
            .env("FRAGDIFF_SEED", request.seed.to_string())
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .status()
            .map_err(|e| Error::io(Path::new(&argv[0]), e))?;
        // a signal-terminated child has no code
        Ok(status.code().unwrap_or(-1))
    }
}
