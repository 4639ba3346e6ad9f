//! File plumbing: network loading, list parsing, atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pfnet::network::NetworkSpec;
use pfnet::{DMatrix, DVector, Network};
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

/// Wraps any serializable payload with the schema version.
#[derive(Serialize)]
pub struct Versioned<'a, T: Serialize> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn versioned<T: Serialize>(body: &T) -> Versioned<'_, T> {
    Versioned { schema_version: SCHEMA_VERSION, body }
}

pub fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    NetworkSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_network(path: &Path) -> Result<Network> {
    Ok(read_spec(path)?.to_network()?)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(pfnet::linalg::from_rows(&rows, "routing matrix")?)
}

/// `"1, 2.5,0"` → `[1.0, 2.5, 0.0]`.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().with_context(|| format!("`{}` is not a number", x.trim())))
        .collect()
}

pub fn parse_vector(s: &str, len: usize, what: &str) -> Result<DVector<f64>> {
    let v = parse_list(s)?;
    if v.len() != len {
        bail!("{what} has {} entries, expected {len}", v.len());
    }
    Ok(DVector::from_vec(v))
}

/// Numeric rows of a CSV file; a non-numeric first line is taken as a header.
pub fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_list(line) {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(e.context(format!("{}:{}", path.display(), i + 1))),
        }
    }
    Ok(rows)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&versioned(body))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn print_json<T: Serialize>(body: &T) -> Result<()> {
    say(&serde_json::to_string_pretty(&versioned(body))?)
}

/// `println!` that treats a closed stdout (e.g. `| head`) as success.
pub fn say(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

pub fn csv_line(values: impl IntoIterator<Item = f64>) -> String {
    let mut line = values.into_iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}
