//! Command implementations behind the `w3` binary.

pub mod export;
pub mod manifest;
pub mod run;

use std::fmt;
use std::path::PathBuf;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_ASSERTION: u8 = 4;

/// Environment variable that replaces the default output directory.
pub const OUT_DIR_ENV: &str = "W3_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "w3-out";

/// A failure that maps to a specific process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl Exit {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }

    pub fn assertion(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_ASSERTION,
            message: message.into(),
        }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

/// Exit code for an error raised anywhere below a command.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<w3_core::Error>() {
        Some(w3_core::Error::Diverged { .. }) => EXIT_NUMERIC,
        Some(w3_core::Error::Io(_)) | None => 1,
        Some(_) => EXIT_USAGE,
    }
}

/// `--out` if given, else `$W3_OUT_DIR`, else [`DEFAULT_OUT_DIR`].
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}
