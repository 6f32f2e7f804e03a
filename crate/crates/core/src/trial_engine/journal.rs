//! Append-only response journal, one JSON record per line.
//!
//! A record is written with a single `write` on an `O_APPEND` handle and then
//! synced, so concurrent appenders never interleave within a record. A crash
//! can leave at most one torn line at the tail; replay skips it and opening
//! for append trims it.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use super::ResponseRecord;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("journal {path}: corrupt record on line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replay {
    pub records: Vec<ResponseRecord>,
    /// An incomplete final line was found and ignored.
    pub torn_tail: bool,
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: Mutex<File>,
}

impl Journal {
    /// Opens (creating if needed) for appending, trimming a torn tail.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JournalError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| JournalError::Io { path: path.clone(), source };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io_err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err)?;
        if let Some(&last) = bytes.last() {
            if last != b'\n' {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                file.set_len(keep as u64).map_err(io_err)?;
                file.seek(SeekFrom::End(0)).map_err(io_err)?;
                file.sync_data().map_err(io_err)?;
            }
        }
        Ok(Self { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &ResponseRecord) -> Result<(), JournalError> {
        let mut line = serde_json::to_vec(record).expect("response records always serialize");
        line.push(b'\n');
        let file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        let mut f: &File = &file;
        f.write_all(&line)
            .and_then(|()| f.sync_data())
            .map_err(|source| JournalError::Io { path: self.path.clone(), source })
    }

    /// Reads every complete record. A missing file replays as empty.
    pub fn replay(path: impl AsRef<Path>) -> Result<Replay, JournalError> {
        let path = path.as_ref();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Replay::default()),
            Err(source) => return Err(JournalError::Io { path: path.into(), source }),
        };
        let mut reader = BufReader::new(file);
        let mut out = Replay::default();
        let mut buf = String::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            let n = reader
                .read_line(&mut buf)
                .map_err(|source| JournalError::Io { path: path.into(), source })?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !buf.ends_with('\n') {
                out.torn_tail = true;
                break;
            }
            let text = buf.trim_end();
            if text.is_empty() {
                continue;
            }
            let rec = serde_json::from_str(text).map_err(|e| JournalError::Corrupt {
                path: path.into(),
                line: line_no,
                message: e.to_string(),
            })?;
            out.records.push(rec);
        }
        Ok(out)
    }
}
