use mlh_core::{MoHConfig, TrainConfig};

use crate::error::CliError;

/// One grid cell: the `key = value` overrides applied on top of the base config.
pub type Cell = Vec<(String, String)>;

/// Parses `key = v1, v2, ...` lines and expands their cartesian product, the
/// last key varying fastest. A grid without keys has no cells.
pub fn parse_grid(text: &str) -> Result<Vec<Cell>, CliError> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    let mut probe = TrainConfig::new(MoHConfig::new(1, 1));
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: String| CliError::Grid(format!("line {}: {m}", lineno + 1));
        let (key, values) = line
            .split_once('=')
            .ok_or_else(|| bad("expected key = v1, v2, ...".into()))?;
        let key = key.trim().to_string();
        if axes.iter().any(|(k, _)| *k == key) {
            return Err(bad(format!("duplicate key {key:?}")));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(bad(format!("empty value for {key}")));
        }
        for v in &values {
            probe.set(&key, v).map_err(bad)?;
        }
        axes.push((key, values));
    }
    if axes.is_empty() {
        return Ok(Vec::new());
    }
    let mut cells: Vec<Cell> = vec![Vec::new()];
    for (key, values) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    Ok(cells)
}
