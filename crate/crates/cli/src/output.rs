//! Artifact writers shared by the subcommands.
//!
//! CSV layouts (documented in the README):
//!   - fields on the grid: `x,value` (1D) or `x,y,value` (2D)
//!   - measures: `node,control,weight`, one row per positive weight
//!
//! Floats are written with Rust's shortest round-trip formatting, so a rerun
//! with the same seed produces byte-identical files.

use hjb_core::{Error, Grid, MeasurePair, Result};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

/// Where artifacts go: `--output-dir` wins, then the `HJB_OUTPUT_DIR`
/// environment variable; with neither set, nothing is written.
pub fn resolve_output_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os("HJB_OUTPUT_DIR").map(PathBuf::from))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| io_error(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| io_error(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| io_error(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn io_error(detail: String) -> Error {
    Error::Io(std::io::Error::other(detail))
}

/// Grid field as CSV: coordinates of each node followed by its value.
pub fn field_csv(grid: &Grid, values: &[f64]) -> String {
    let mut out = String::new();
    if grid.dim == 1 {
        out.push_str("x,value\n");
    } else {
        out.push_str("x,y,value\n");
    }
    for node in 0..values.len() {
        let x = grid.point(node);
        for coord in &x[..grid.dim] {
            out.push_str(&format!("{coord},"));
        }
        out.push_str(&format!("{}\n", values[node]));
    }
    out
}

/// Node-control measure as CSV. Interior atoms fill all three columns;
/// boundary atoms leave the control column empty.
pub fn measure_csv(measure: &MeasurePair) -> String {
    let mut out = String::from("node,control,weight\n");
    for &(node, control, weight) in &measure.mu1 {
        out.push_str(&format!("{node},{control},{weight}\n"));
    }
    for &(pos, weight) in &measure.mu2 {
        out.push_str(&format!("{pos},,{weight}\n"));
    }
    out
}
