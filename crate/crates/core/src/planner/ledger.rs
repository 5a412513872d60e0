use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::ChatMessage;

/// One planner exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub timestamp: String,
    pub tag: String,
    pub prompt: Vec<ChatMessage>,
    pub raw_response: String,
    pub parse_result: String,
}

/// Append-only JSON-lines log of every planner request and response.
pub struct RunLedger {
    file: Option<Mutex<BufWriter<File>>>,
    entries: Mutex<Vec<LedgerEntry>>,
}

impl RunLedger {
    pub fn in_memory() -> Self {
        Self {
            file: None,
            entries: Mutex::new(Vec::new()),
        }
    }

    /// Open `path` for appending, creating it if needed.
    pub fn append_to(path: &Path) -> io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(Mutex::new(BufWriter::new(f))),
            entries: Mutex::new(Vec::new()),
        })
    }

    pub fn record(&self, tag: &str, prompt: &[ChatMessage], raw_response: &str, parse_result: &str) {
        let entry = LedgerEntry {
            timestamp: chrono::Utc::now().to_rfc3339(),
            tag: tag.to_string(),
            prompt: prompt.to_vec(),
            raw_response: raw_response.to_string(),
            parse_result: parse_result.to_string(),
        };
        if let Some(file) = &self.file {
            let mut w = file.lock().expect("ledger lock poisoned");
            let line = serde_json::to_string(&entry).expect("ledger entry serializes");
            // the ledger is an audit aid; a failed write must not abort a run
            if writeln!(w, "{line}").and_then(|_| w.flush()).is_err() {
                log_write_failure();
            }
        }
        self.entries.lock().expect("ledger lock poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("ledger lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn log_write_failure() {
    eprintln!("warning: failed to append to run ledger");
}
