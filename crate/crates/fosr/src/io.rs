//! Long-format CSV: one row per observation.

use std::io::{Read, Write};
use std::path::Path;

use fosr_core::data::{from_rows, FunctionalDataset, ObservationRow};

use crate::error::{CliError, Result};

/// Column names for the long table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub id: String,
    pub time: String,
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            id: "id".into(),
            time: "time".into(),
            y: "y".into(),
            x: Vec::new(),
            z: Vec::new(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CliError::Format(format!("column '{name}' not found")))
}

fn number(record: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<f64>().map_err(|_| {
        CliError::Format(format!(
            "line {line}: column '{name}' has non-numeric value '{raw}'"
        ))
    })
}

/// Reads a long table. Non-finite numbers are kept so validation can report
/// them; structural problems (missing columns, unparsable cells) are errors.
pub fn read_long_csv<R: Read>(reader: R, cols: &ColumnSpec) -> Result<FunctionalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id = column(&headers, &cols.id)?;
    let time = column(&headers, &cols.time)?;
    let y = column(&headers, &cols.y)?;
    let xi = cols
        .x
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let zi = cols
        .z
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push(ObservationRow {
            id: record.get(id).unwrap_or("").to_string(),
            time: number(&record, time, &cols.time, line)?,
            response: number(&record, y, &cols.y, line)?,
            x: xi
                .iter()
                .zip(&cols.x)
                .map(|(&k, n)| number(&record, k, n, line))
                .collect::<Result<_>>()?,
            z: zi
                .iter()
                .zip(&cols.z)
                .map(|(&k, n)| number(&record, k, n, line))
                .collect::<Result<_>>()?,
        });
    }
    Ok(from_rows(rows, &cols.x, &cols.z)?)
}

pub fn load_long_csv(path: &Path, cols: &ColumnSpec) -> Result<FunctionalDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    read_long_csv(file, cols)
}

/// Writes `ds` in long format with columns `id,time,y,x1..,z1..`. Values use
/// the shortest representation that parses back to the same bits.
pub fn write_long_csv<W: Write>(writer: W, ds: &FunctionalDataset) -> Result<ColumnSpec> {
    let cols = ColumnSpec {
        x: (1..=ds.p()).map(|k| format!("x{k}")).collect(),
        z: (1..=ds.q()).map(|k| format!("z{k}")).collect(),
        ..ColumnSpec::default()
    };
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![cols.id.clone(), cols.time.clone(), cols.y.clone()];
    header.extend(cols.x.iter().cloned());
    header.extend(cols.z.iter().cloned());
    w.write_record(&header)?;
    for s in ds.subjects() {
        for (t, y) in s.times.iter().zip(&s.responses) {
            let mut rec = vec![s.id.clone(), t.to_string(), y.to_string()];
            rec.extend(s.x.iter().map(f64::to_string));
            rec.extend(s.z.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| CliError::Output(e.to_string()))?;
    Ok(cols)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes via a temporary sibling and a rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Output(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let out = |e: std::io::Error| CliError::Output(format!("{}: {e}", path.display()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(out)?;
        f.write_all(bytes).map_err(out)?;
        f.sync_all().map_err(out)?;
    }
    std::fs::rename(&tmp, path).map_err(out)
}
