use std::path::Path;

use anyhow::anyhow;
use kcpd_core::Error;
use serde::de::DeserializeOwned;

pub const CONFIG: u8 = 1;
pub const DATA: u8 = 2;

/// An error together with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        Self {
            code: CONFIG,
            error: anyhow!("{msg}"),
        }
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        Self {
            code: DATA,
            error: anyhow!("{msg}"),
        }
    }

    pub fn context(mut self, ctx: impl std::fmt::Display) -> Self {
        self.error = self.error.context(ctx.to_string());
        self
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. }
            | Error::DimensionMismatch { .. }
            | Error::InsufficientData { .. }
            | Error::Degenerate(_)
            | Error::Io(_) => DATA,
            Error::InvalidParameter(_) | Error::Infeasible(_) | Error::Json(_) => CONFIG,
        };
        Self { code, error: e.into() }
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>, Failure> {
    kcpd_core::io::read_csv_path(path).map_err(|e| Failure::from(e).context(path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}
