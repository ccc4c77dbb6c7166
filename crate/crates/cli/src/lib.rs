//! `fedspa run | compare | verify` — config loading, pipeline invocation and
//! artifact export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use fedspa_core::config::{Experiment, ExperimentConfig, Overrides};
use fedspa_core::orchestrator::Federation;

mod commands;
pub mod output;

pub use commands::{cmd_compare, cmd_run, cmd_verify, VerifyOutcome};

/// Exit codes shared by every subcommand.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVALID_CONFIG: i32 = 1;
    pub const RUNTIME: i32 = 2;
    pub const VERIFY_FAILED: i32 = 3;
}

#[derive(Debug)]
pub enum CliError {
    /// Unreadable, unparsable or semantically invalid config.
    Config(String),
    Runtime(anyhow::Error),
    /// `verify` ran to completion but at least one property failed.
    VerifyFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::INVALID_CONFIG,
            CliError::Runtime(_) => exit::RUNTIME,
            CliError::VerifyFailed(_) => exit::VERIFY_FAILED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "invalid config: {msg}"),
            CliError::Runtime(e) => write!(f, "run failed: {e:#}"),
            CliError::VerifyFailed(names) => write!(f, "verification failed: {}", names.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fedspa_core::Error> for CliError {
    fn from(e: fedspa_core::Error) -> Self {
        match e {
            fedspa_core::Error::Config { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Command-line settings layered over the config file.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

/// A parsed, validated config and where its artifacts go.
pub struct Loaded {
    pub raw: ExperimentConfig,
    pub experiment: Experiment,
    pub out_dir: PathBuf,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load(path: &Path, opts: &Options) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let raw = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let experiment = raw.resolve(
        base,
        Overrides {
            seed: opts.seed,
            jobs: opts.jobs,
        },
    )?;
    // relative output paths from the file are anchored at the file, flags at the cwd
    let out_dir = match (&opts.out, &raw.output_dir) {
        (Some(out), _) => out.clone(),
        (None, Some(dir)) => base.join(dir),
        (None, None) => base.join("out"),
    };
    Ok(Loaded { raw, experiment, out_dir })
}

pub(crate) fn federation(exp: &Experiment) -> Result<Federation, CliError> {
    Ok(Federation::new(exp.dense.clone(), exp.federation.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_map_to_exit_one() {
        let err: CliError = fedspa_core::Error::config("federation.sparsity", "must be in (0, 1)").into();
        assert_eq!(err.exit_code(), exit::INVALID_CONFIG);
        assert!(err.to_string().contains("federation.sparsity"));
        assert_eq!(CliError::Runtime(anyhow::anyhow!("boom")).exit_code(), exit::RUNTIME);
        assert_eq!(CliError::VerifyFailed(vec!["unbiasedness".into()]).exit_code(), exit::VERIFY_FAILED);
    }

    #[test]
    fn parse_rejects_unknown_keys() {
        let ok = "[model]\ndims = [2, 2]\n[federation]\nclients = 1\nsparsity = 0.5\n[data]\n";
        assert!(parse_config(ok).is_ok());
        let bad = ok.replace("clients = 1", "clients = 1\nclient = 2");
        assert!(matches!(parse_config(&bad), Err(CliError::Config(_))));
    }

    #[test]
    fn output_dir_is_anchored_at_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "output_dir = \"res\"\n[model]\ndims = [2, 2]\n[federation]\nclients = 1\nsparsity = 0.5\n[data]\n").unwrap();
        assert_eq!(load(&path, &Options::default()).unwrap().out_dir, dir.path().join("res"));
        let flag = Options {
            out: Some(PathBuf::from("elsewhere")),
            ..Options::default()
        };
        assert_eq!(load(&path, &flag).unwrap().out_dir, PathBuf::from("elsewhere"));
    }
}
