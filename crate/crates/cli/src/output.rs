//! Output sinks. CSV starts with `#` header lines, JSON carries a leading `meta`
//! object, binary path files a fixed 32-byte header.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const PATHS_MAGIC: &[u8; 8] = b"VDPATHS1";

/// Provenance written at the top of every artifact.
#[derive(Debug, Clone)]
pub struct Meta {
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub timestamp: Option<u64>,
}

impl Meta {
    /// Hash the raw config bytes together with the command line that shapes the output.
    pub fn new(command: &str, raw_config: &[u8], seed: Option<u64>, deterministic: bool) -> Self {
        let mut h = Sha256::new();
        h.update(raw_config);
        h.update([0u8]);
        h.update(command.as_bytes());
        let config_sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let timestamp = if deterministic {
            None
        } else {
            SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
        };
        Self { command: command.to_string(), config_sha256, seed, timestamp }
    }

    fn csv_header(&self) -> String {
        let mut s = format!("# vd {}\n# config_sha256: {}\n", self.command, self.config_sha256);
        match self.seed {
            Some(seed) => s.push_str(&format!("# seed: {seed}\n")),
            None => s.push_str("# seed: none\n"),
        }
        if let Some(t) = self.timestamp {
            s.push_str(&format!("# timestamp: {t}\n"));
        }
        s
    }

    fn json(&self) -> Value {
        let mut m = Map::new();
        m.insert("command".into(), json!(self.command));
        m.insert("config_sha256".into(), json!(self.config_sha256));
        m.insert("seed".into(), json!(self.seed));
        if let Some(t) = self.timestamp {
            m.insert("timestamp".into(), json!(t));
        }
        Value::Object(m)
    }
}

fn sink(out: Option<&Path>) -> std::io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

/// RFC-4180 field: quoted only when needed.
fn field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shortest representation that round-trips, so no precision is lost.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub struct Csv {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, meta: &Meta, out: Option<&Path>) -> std::io::Result<()> {
        let mut w = sink(out)?;
        w.write_all(meta.csv_header().as_bytes())?;
        let head: Vec<String> = self.columns.iter().map(|c| field(c)).collect();
        w.write_all(format!("{}\r\n", head.join(",")).as_bytes())?;
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|c| field(c)).collect();
            w.write_all(format!("{}\r\n", cells.join(",")).as_bytes())?;
        }
        w.flush()
    }
}

pub fn write_json(meta: &Meta, body: Value, out: Option<&Path>) -> std::io::Result<()> {
    let mut m = Map::new();
    m.insert("meta".into(), meta.json());
    match body {
        Value::Object(b) => m.extend(b),
        other => {
            m.insert("result".into(), other);
        }
    }
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &Value::Object(m)).map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Magic, then n_paths, n_nodes, dim as little-endian u64, then the path values
/// (path-major, node-major inside a path) as little-endian f64. The CSV sidecar
/// `<file>.meta.csv` records the provenance header.
pub fn write_paths_binary(meta: &Meta, n_paths: usize, n_nodes: usize, dim: usize, values: &[f64], out: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(out)?);
    w.write_all(PATHS_MAGIC)?;
    for x in [n_paths, n_nodes, dim] {
        w.write_all(&(x as u64).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let mut side = PathBuf::from(out);
    side.as_mut_os_string().push(".meta.csv");
    let mut csv = Csv::new(&["key", "value"]);
    csv.push(vec!["n_paths".into(), n_paths.to_string()]);
    csv.push(vec!["n_nodes".into(), n_nodes.to_string()]);
    csv.push(vec!["dim".into(), dim.to_string()]);
    csv.write(meta, Some(&side))
}
