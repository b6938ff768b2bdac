//! The `scaledet` command-line tool.
//!
//! Exit codes: 0 on success, 1 when processing fails, 2 on usage errors.

pub mod args;
mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::Error;
use crate::fsutil::write_atomic;

pub use args::{Cli, Command, Ratio};
pub use commands::{parse_adapter, parse_sweep, AdapterSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Provenance record written beside each output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub toolkit_version: String,
    pub wall_clock_seconds: f64,
}

pub(crate) struct RunContext {
    command: &'static str,
    started: Instant,
}

impl RunContext {
    pub(crate) fn manifest(
        &self,
        config: Value,
        seed: Option<u64>,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> RunManifest {
        let show = |p: &&Path| p.to_string_lossy().into_owned();
        RunManifest {
            command: self.command.to_string(),
            config,
            seed,
            inputs: inputs.iter().map(show).collect(),
            outputs: outputs.iter().map(show).collect(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        }
    }
}

/// `out.json` -> `out.json<suffix>`.
pub(crate) fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    bytes.push(b'\n');
    ensure_parent(path)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub(crate) fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Overlays the flags onto the config file values; flags win.
pub(crate) fn merge_config<T>(flags: &T, file: Option<&Map<String, Value>>) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let known = match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("argument structs serialize to objects"),
    };
    let mut merged = Map::new();
    if let Some(file) = file {
        for (k, v) in file {
            if !known.contains_key(k) {
                return Err(usage(format!("unknown config key {k:?}")));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    if let Ok(Value::Object(m)) = serde_json::to_value(flags) {
        for (k, v) in m {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: {e}")))
}

fn load_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match serde_json::from_slice(&bytes) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(usage(format!(
            "{}: config must be a JSON object",
            path.display()
        ))),
        Err(e) => Err(usage(format!("{}: {e}", path.display()))),
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("scaledet: {e}");
            match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Run(_) => EXIT_FAILURE,
            }
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    run_from(std::env::args_os())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut file = match &cli.config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let file_jobs = match file.as_mut().and_then(|m| m.remove("jobs")) {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| usage("config key \"jobs\" must be a positive integer"))?
                as usize,
        ),
    };
    if let Some(n) = cli.jobs.or(file_jobs) {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let file = file.as_ref();
    let ctx = |command| RunContext {
        command,
        started: Instant::now(),
    };
    match &cli.command {
        Command::Stats(a) => commands::stats(&ctx("stats"), merge_config(a, file)?),
        Command::Strip(a) => commands::strip(&ctx("strip"), merge_config(a, file)?),
        Command::SynthDown(a) => commands::synth_down(&ctx("synth-down"), merge_config(a, file)?),
        Command::SynthAug(a) => commands::synth_aug(&ctx("synth-aug"), merge_config(a, file)?),
        Command::Distill(a) => commands::distill(&ctx("distill"), merge_config(a, file)?),
        Command::Infer(a) => commands::infer(&ctx("infer"), merge_config(a, file)?),
        Command::Eval(a) => commands::eval(&ctx("eval"), merge_config(a, file)?),
        Command::FixedPr(a) => commands::fixed_pr(&ctx("fixed-pr"), merge_config(a, file)?),
        Command::Diff(a) => commands::diff(&ctx("diff"), merge_config(a, file)?),
        Command::Report(a) => commands::report(&ctx("report"), merge_config(a, file)?),
    }
}
