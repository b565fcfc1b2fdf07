//! Append-only event log, one JSON record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::ServiceError;
use crate::events::EventRecord;

#[derive(Debug)]
pub struct EventLog {
    file: Option<File>,
    path: Option<PathBuf>,
    records: Vec<EventRecord>,
}

impl EventLog {
    /// A log that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            file: None,
            path: None,
            records: Vec::new(),
        }
    }

    /// Opens (or creates) a log file and reads back every complete record.
    ///
    /// A final line without a trailing newline is a write torn by a crash;
    /// it is cut off so the next append starts on a clean line. Any other
    /// unreadable line is an error.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let mut reader = BufReader::new(&file);
        let mut records: Vec<EventRecord> = Vec::new();
        let mut good_len = 0u64;
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                break;
            }
            let rec: EventRecord = serde_json::from_str(line.trim_end()).map_err(|e| {
                ServiceError::Storage(format!("{}:{line_no}: {e}", path.display()))
            })?;
            if records.last().is_some_and(|last| last.seq >= rec.seq) {
                return Err(ServiceError::Storage(format!(
                    "{}:{line_no}: sequence number {} does not increase",
                    path.display(),
                    rec.seq
                )));
            }
            records.push(rec);
            good_len += n as u64;
        }
        drop(reader);
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok(Self {
            file: Some(file),
            path: Some(path.to_owned()),
            records,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn next_seq(&self) -> u64 {
        self.records.last().map_or(1, |r| r.seq + 1)
    }

    pub fn append(&mut self, record: EventRecord) -> Result<(), ServiceError> {
        if let Some(file) = &mut self.file {
            let mut line = serde_json::to_string(&record).map_err(|e| ServiceError::Storage(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.records.push(record);
        Ok(())
    }
}
