//! TOML problem configurations.
//!
//! A config describes one Bellman boundary-value problem in four sections:
//! `[domain]`, `[controls]`, `[coefficients]`, `[boundary]`. Coefficients are
//! tabulated per grid node and control sample, either inline or as CSV
//! references resolved relative to the config file. The full field-by-field
//! schema lives in `docs/problem-config.md`, next to a worked example.

use hjb_core::{
    BoundaryCondition, Coefficients, ControlSet, Domain, Error, ProblemSpec, Result, SymMat,
};
use serde::Deserialize;
use std::fs;
use std::path::Path;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    /// Display name; defaults to the file stem.
    name: Option<String>,
    domain: DomainSection,
    controls: ControlsSection,
    coefficients: CoefficientsSection,
    boundary: BoundarySection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSection {
    /// "interval" (1D) or "rectangle" (2D).
    kind: String,
    /// Lower corner, one entry per axis.
    lo: Vec<f64>,
    /// Upper corner, one entry per axis.
    hi: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlsSection {
    /// Explicit sample list; each inner array is one control vector.
    samples: Option<Vec<Vec<f64>>>,
    /// 1D shorthand: `count` samples evenly spaced on `[-radius, radius]`.
    radius: Option<f64>,
    count: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientsSection {
    /// Tabulation lattice over the domain closure (x-major in 2D). The
    /// value tables hold one row per lattice node, one entry per control.
    grid_shape: Vec<usize>,
    /// Diffusion rows: per node, per control, `[a11]` (1D) or
    /// `[a11, a22, a12]` (2D). Inline form.
    a: Option<Vec<Vec<Vec<f64>>>>,
    /// Drift rows: per node, per control, `[b1]` or `[b1, b2]`. Inline form.
    b: Option<Vec<Vec<Vec<f64>>>>,
    /// Running-cost rows: per node, one scalar per control. Inline form.
    l: Option<Vec<Vec<f64>>>,
    /// CSV alternatives, columns `node,control,<values...>`; paths are
    /// relative to the config file.
    a_csv: Option<String>,
    b_csv: Option<String>,
    l_csv: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundarySection {
    /// "state_constraint", "dirichlet", or "neumann".
    kind: String,
    /// Constant boundary datum (Dirichlet clamp value or Neumann normal
    /// flux). Defaults to 0; rejected for state constraints.
    g: Option<f64>,
}

/// Load a problem spec from a TOML file. Parse and shape errors come back as
/// config errors naming the offending field (TOML errors carry line/column).
pub fn load_problem(path: &Path) -> Result<ProblemSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ConfigFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;

    let name = cfg.name.clone().unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("problem".into())
    });
    let domain = parse_domain(&cfg.domain)?;
    let dim = domain.dim();
    let controls = parse_controls(&cfg.controls, dim)?;
    let coefficients =
        parse_coefficients(&cfg.coefficients, &domain, controls.len(), path)?;
    let boundary = parse_boundary(&cfg.boundary)?;

    Ok(ProblemSpec { name, domain, controls, coefficients, boundary })
}

fn parse_domain(d: &DomainSection) -> Result<Domain> {
    let dim = match d.kind.as_str() {
        "interval" => 1,
        "rectangle" => 2,
        other => {
            return Err(Error::Config(format!(
                "[domain] kind must be \"interval\" or \"rectangle\", got {other:?}"
            )))
        }
    };
    if d.lo.len() != dim || d.hi.len() != dim {
        return Err(Error::Config(format!(
            "[domain] lo/hi must each have {dim} entries for kind {:?} (got {} and {})",
            d.kind,
            d.lo.len(),
            d.hi.len()
        )));
    }
    for axis in 0..dim {
        if !(d.lo[axis] < d.hi[axis]) {
            return Err(Error::Config(format!(
                "[domain] needs lo < hi on axis {axis}: {} vs {}",
                d.lo[axis], d.hi[axis]
            )));
        }
    }
    Ok(match dim {
        1 => Domain::Interval { lo: d.lo[0], hi: d.hi[0] },
        _ => Domain::Rectangle { lo: [d.lo[0], d.lo[1]], hi: [d.hi[0], d.hi[1]] },
    })
}

fn parse_controls(c: &ControlsSection, _dim: usize) -> Result<ControlSet> {
    match (&c.samples, c.radius, c.count) {
        (Some(samples), None, None) => ControlSet::from_samples(samples.clone()),
        (None, Some(radius), Some(count)) => {
            if radius <= 0.0 || count == 0 {
                return Err(Error::Config(
                    "[controls] radius must be positive and count nonzero".into(),
                ));
            }
            Ok(ControlSet::symmetric_grid_1d(radius, count))
        }
        _ => Err(Error::Config(
            "[controls] give either `samples` or the pair `radius` + `count`".into(),
        )),
    }
}

fn parse_boundary(b: &BoundarySection) -> Result<BoundaryCondition> {
    match b.kind.as_str() {
        "state_constraint" => {
            if b.g.is_some() {
                return Err(Error::Config(
                    "[boundary] state_constraint takes no datum `g`".into(),
                ));
            }
            Ok(BoundaryCondition::state_constraint())
        }
        "dirichlet" => Ok(BoundaryCondition::dirichlet_const(b.g.unwrap_or(0.0))),
        "neumann" => {
            let g = b.g.unwrap_or(0.0);
            Ok(BoundaryCondition::neumann_normal(move |_| g))
        }
        other => Err(Error::Config(format!(
            "[boundary] kind must be \"state_constraint\", \"dirichlet\", or \"neumann\", got {other:?}"
        ))),
    }
}

fn parse_coefficients(
    c: &CoefficientsSection,
    domain: &Domain,
    n_controls: usize,
    config_path: &Path,
) -> Result<Coefficients> {
    let dim = domain.dim();
    if c.grid_shape.len() != dim {
        return Err(Error::Config(format!(
            "[coefficients] grid_shape must have {dim} entries, got {}",
            c.grid_shape.len()
        )));
    }
    if c.grid_shape.iter().any(|&s| s < 2) {
        return Err(Error::Config(
            "[coefficients] grid_shape entries must be at least 2".into(),
        ));
    }
    let n_nodes: usize = c.grid_shape.iter().product();
    let a_width = if dim == 1 { 1 } else { 3 };

    let a_rows = table_from(
        "a",
        &c.a,
        &c.a_csv,
        config_path,
        n_nodes,
        n_controls,
        a_width,
    )?;
    let b_rows = table_from(
        "b",
        &c.b,
        &c.b_csv,
        config_path,
        n_nodes,
        n_controls,
        dim,
    )?;
    let l_nested = c.l.as_ref().map(|rows| {
        rows.iter()
            .map(|r| r.iter().map(|&v| vec![v]).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    });
    let l_rows = table_from("l", &l_nested, &c.l_csv, config_path, n_nodes, n_controls, 1)?;

    let a: Vec<Vec<SymMat>> = a_rows
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|e| if dim == 1 { SymMat::scalar_1d(e[0]) } else { SymMat::full_2d(e[0], e[1], e[2]) })
                .collect()
        })
        .collect();
    let l: Vec<Vec<f64>> = l_rows
        .into_iter()
        .map(|row| row.into_iter().map(|e| e[0]).collect())
        .collect();

    let mut lo = [0.0f64; 2];
    let mut h = [1.0f64; 2];
    let mut shape = [1usize; 2];
    for axis in 0..dim {
        lo[axis] = domain.lo(axis);
        shape[axis] = c.grid_shape[axis];
        h[axis] = (domain.hi(axis) - domain.lo(axis)) / ((c.grid_shape[axis] - 1) as f64);
    }
    Coefficients::tabulated(dim, lo, h, shape, a, b_rows, l)
}

/// Resolve one coefficient table from its inline or CSV source: the result
/// holds `width` values per (node, control) pair, complete and finite.
fn table_from(
    field: &str,
    inline: &Option<Vec<Vec<Vec<f64>>>>,
    csv_ref: &Option<String>,
    config_path: &Path,
    n_nodes: usize,
    n_controls: usize,
    width: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let table = match (inline, csv_ref) {
        (Some(rows), None) => rows.clone(),
        (None, Some(rel)) => {
            let path = config_path.parent().unwrap_or(Path::new(".")).join(rel);
            read_csv_table(field, &path, n_nodes, n_controls, width)?
        }
        (Some(_), Some(_)) => {
            return Err(Error::Config(format!(
                "[coefficients] give `{field}` either inline or as `{field}_csv`, not both"
            )))
        }
        (None, None) => {
            return Err(Error::Config(format!(
                "[coefficients] missing `{field}` (inline) or `{field}_csv` (file reference)"
            )))
        }
    };
    if table.len() != n_nodes {
        return Err(Error::Config(format!(
            "[coefficients] `{field}` must have one row per lattice node ({n_nodes}), got {}",
            table.len()
        )));
    }
    for (node, row) in table.iter().enumerate() {
        if row.len() != n_controls {
            return Err(Error::Config(format!(
                "[coefficients] `{field}` row {node} must have one entry per control \
                 ({n_controls}), got {}",
                row.len()
            )));
        }
        for (ci, entry) in row.iter().enumerate() {
            if entry.len() != width {
                return Err(Error::Config(format!(
                    "[coefficients] `{field}` node {node}, control {ci}: expected {width} \
                     value(s), got {}",
                    entry.len()
                )));
            }
            if entry.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "[coefficients] `{field}` node {node}, control {ci}: non-finite value"
                )));
            }
        }
    }
    Ok(table)
}

/// CSV columns: `node,control,v1[,v2,...]`. A first line that fails to parse
/// numerically is treated as a header. Every (node, control) pair must appear
/// exactly once.
fn read_csv_table(
    field: &str,
    path: &Path,
    n_nodes: usize,
    n_controls: usize,
    width: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table = vec![vec![Vec::new(); n_controls]; n_nodes];
    let mut seen = vec![vec![false; n_controls]; n_nodes];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            continue; // header
        }
        let fail = |what: &str| {
            Error::Config(format!("{}:{}: {what}", path.display(), lineno + 1))
        };
        if cells.len() != 2 + width {
            return Err(fail(&format!(
                "expected `node,control` plus {width} value column(s), got {} cells",
                cells.len()
            )));
        }
        let node: usize =
            cells[0].parse().map_err(|_| fail("node index is not an integer"))?;
        let control: usize =
            cells[1].parse().map_err(|_| fail("control index is not an integer"))?;
        if node >= n_nodes || control >= n_controls {
            return Err(fail(&format!(
                "index out of range (node < {n_nodes}, control < {n_controls})"
            )));
        }
        if seen[node][control] {
            return Err(fail(&format!("duplicate entry for node {node}, control {control}")));
        }
        let mut vals = Vec::with_capacity(width);
        for cell in &cells[2..] {
            vals.push(
                cell.parse::<f64>().map_err(|_| fail("value column is not a number"))?,
            );
        }
        table[node][control] = vals;
        seen[node][control] = true;
    }
    for (node, row) in seen.iter().enumerate() {
        for (control, &s) in row.iter().enumerate() {
            if !s {
                return Err(Error::Config(format!(
                    "{}: missing `{field}` entry for node {node}, control {control}",
                    path.display()
                )));
            }
        }
    }
    Ok(table)
}
