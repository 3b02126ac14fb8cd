//! CSV and JSON artifacts with a reproducibility header.
//!
//! CSV files open with `#`-prefixed metadata lines; JSON files wrap their
//! payload as `{"meta": .., "data": ..}`. Metadata holds the tool version,
//! the subcommand, its flags, the seed and the SHA-256 of the instance file,
//! and nothing time-dependent, so equal inputs give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub format_version: String,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub instance_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    pub flags: BTreeMap<String, String>,
}

impl Meta {
    pub fn new(command: &str) -> Self {
        Meta {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            format_version: FORMAT_VERSION.into(),
            command: command.into(),
            ..Meta::default()
        }
    }

    pub fn instance(mut self, bytes: &[u8]) -> Self {
        self.instance_sha256 = Some(sha256_hex(bytes));
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn flag(mut self, key: &str, value: impl ToString) -> Self {
        self.flags.insert(key.into(), value.to_string());
        self
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Plot-ready numeric table.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid("csv", format!("{other:?}")),
    }
}

pub fn write_csv(path: &Path, meta: &Meta, table: &Table) -> Result<()> {
    let mut out = Vec::new();
    for line in serde_json::to_string_pretty(meta)?.lines() {
        writeln!(out, "# {line}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&table.header).map_err(csv_err)?;
        for row in &table.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Header and rows of a CSV written by [`write_csv`], metadata skipped.
pub fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(csv_err))
        .collect::<Result<_>>()?;
    Ok(Table { header, rows })
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    meta: Meta,
    data: T,
}

pub fn write_json<T: Serialize>(path: &Path, meta: &Meta, data: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(&Envelope { meta: meta.clone(), data })?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Payload and metadata of a JSON artifact.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(Meta, T)> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let env: Envelope<T> = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::invalid(format!("{}: {}", path.display(), e.path()), e.into_inner().to_string()))?;
    Ok((env.meta, env.data))
}

/// Shortest representation that parses back to the same float.
pub fn num(x: f64) -> String {
    format!("{x}")
}
