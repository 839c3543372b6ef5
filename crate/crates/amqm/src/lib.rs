//! Quality-monitoring toolkit for desk-scale additive manufacturing
//! experiments.
//!
//! The crate covers the full loop: a seeded synthetic generator produces
//! labeled layer images over a speed/temperature grid, a small
//! from-scratch convolutional network trains on them, evaluation reports
//! confusion matrices and per-class metrics, a sweep harness maps
//! hyperparameter response curves, and an online monitor turns streamed
//! frames into go/no-go decisions with remedy suggestions. Everything is
//! deterministic given a seed, so runs reproduce byte for byte.

use std::fs;
use std::path::Path;

pub mod error;
pub mod image;
pub mod imagegen;
pub mod metrics;
pub mod monitor;
pub mod nn;
pub mod rng;
pub mod sweep;

pub use error::{Error, Result};

/// Writes a file through a temporary sibling plus rename, so readers
/// never observe a half-written file. Creates parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("path {} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    if let Err(err) = fs::rename(&tmp, path) {
        fs::remove_file(&tmp).ok();
        return Err(err.into());
    }
    Ok(())
}
