//! Append-only trial ledger.
//!
//! Every line is `"{sha256hex} {body}"` where `body` is one JSON record and
//! the checksum covers the exact body text. Readers verify each line, so a
//! truncated or hand-edited trace surfaces as [`TraceError::Corrupt`]
//! instead of silently feeding bad history to the optimizer.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::orchestrator::TrialRecord;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("trial ordinal {ordinal} not above previous {previous}")]
    NonMonotonicOrdinal { ordinal: u64, previous: u64 },
    #[error("trace encode: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Formats one checksummed ledger line (without the trailing newline).
pub(crate) fn ledger_line<T: Serialize>(record: &T) -> Result<String, TraceError> {
    let body = serde_json::to_string(record)?;
    Ok(format!("{} {}", sha256_hex(body.as_bytes()), body))
}

/// Parses and verifies every line of a checksummed ledger file.
pub(crate) fn read_ledger<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, TraceError> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_ledger_line(&line, idx + 1)?);
    }
    Ok(out)
}

pub(crate) fn parse_ledger_line<T: DeserializeOwned>(
    line: &str,
    line_no: usize,
) -> Result<T, TraceError> {
    let corrupt = |reason: String| TraceError::Corrupt {
        line: line_no,
        reason,
    };
    let (checksum, body) = line
        .split_once(' ')
        .ok_or_else(|| corrupt("missing checksum separator".into()))?;
    let actual = sha256_hex(body.as_bytes());
    if actual != checksum {
        return Err(corrupt(format!(
            "checksum mismatch: line says {checksum}, body hashes to {actual}"
        )));
    }
    serde_json::from_str(body).map_err(|e| corrupt(format!("bad record: {e}")))
}

/// Persistent (or in-memory) store of every trial the optimizer has run,
/// queryable by configuration digest and by architecture signature so later
/// runs can reuse exemplars.
#[derive(Debug)]
pub struct TraceRepository {
    path: Option<PathBuf>,
    records: Vec<TrialRecord>,
}

impl TraceRepository {
    /// Opens (creating if absent) a trace file and verifies its contents.
    pub fn open<P: AsRef<Path>>(path: P) -> Result<Self, TraceError> {
        let path = path.as_ref().to_path_buf();
        let records = if path.exists() {
            let records: Vec<TrialRecord> = read_ledger(&path)?;
            let mut previous: Option<u64> = None;
            for r in &records {
                if let Some(p) = previous {
                    if r.ordinal <= p {
                        return Err(TraceError::NonMonotonicOrdinal {
                            ordinal: r.ordinal,
                            previous: p,
                        });
                    }
                }
                previous = Some(r.ordinal);
            }
            records
        } else {
            File::create(&path)?;
            Vec::new()
        };
        Ok(TraceRepository {
            path: Some(path),
            records,
        })
    }

    /// A repository that never touches disk; used by tests and dry runs.
    pub fn in_memory() -> Self {
        TraceRepository {
            path: None,
            records: Vec::new(),
        }
    }

    pub fn append(&mut self, record: TrialRecord) -> Result<(), TraceError> {
        if let Some(last) = self.records.last() {
            if record.ordinal <= last.ordinal {
                return Err(TraceError::NonMonotonicOrdinal {
                    ordinal: record.ordinal,
                    previous: last.ordinal,
                });
            }
        }
        if let Some(path) = &self.path {
            let line = ledger_line(&record)?;
            let mut file = OpenOptions::new().append(true).open(path)?;
            writeln!(file, "{line}")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_ordinal(&self) -> u64 {
        self.records.last().map(|r| r.ordinal + 1).unwrap_or(0)
    }

    /// All trials of one exact configuration.
    pub fn query_digest(&self, digest: &str) -> Vec<&TrialRecord> {
        self.records.iter().filter(|r| r.digest == digest).collect()
    }

    /// All trials of any configuration for a given architecture, regardless
    /// of model name.
    pub fn query_signature(&self, signature: &str) -> Vec<&TrialRecord> {
        self.records
            .iter()
            .filter(|r| r.arch_signature == signature)
            .collect()
    }
}
