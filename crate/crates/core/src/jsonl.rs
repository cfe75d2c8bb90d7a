//! Small helpers for the JSONL files every stage reads and writes.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// One parsed line, or the 1-based line number and parse error.
pub type LineResult<T> = Result<T, (usize, serde_json::Error)>;

/// Reads non-blank lines of `path` and parses each as `T`.
pub fn read_lines<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<LineResult<T>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| (i + 1, e)));
    }
    Ok(out)
}

/// Reads records written by [`Appender`], tolerating a truncated final line
/// left behind by an interrupted run. Any other bad line is an error.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines = read_lines::<T>(path)?;
    let n = lines.len();
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.into_iter().enumerate() {
        match line {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == n => log::warn!("ignoring truncated last line of {}", path.display()),
            Err((line_no, e)) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{line_no}: {e}", path.display()),
                ))
            }
        }
    }
    Ok(out)
}

pub fn to_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("records serialize");
    s.push('\n');
    s
}

/// Writes `records` to `path` atomically (temp file + rename).
pub fn write_all<T: Serialize>(path: &Path, records: &[T]) -> io::Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&to_line(r));
    }
    write_atomic(path, buf.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Append-only JSONL writer. Each call writes whole lines and flushes, so an
/// interruption loses at most the batch being written.
pub struct Appender {
    file: File,
}

impl Appender {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        // Drop a partial last line left by an interrupted write.
        if file.metadata()?.len() > 0 {
            let bytes = fs::read(path)?;
            if bytes.last() != Some(&b'\n') {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                file.set_len(keep as u64)?;
            }
        }
        Ok(Self { file })
    }

    pub fn append<T: Serialize>(&mut self, records: &[T]) -> io::Result<()> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&to_line(r));
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_tail_is_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"a\":1}\n{\"a\":2}\n{\"a\":").unwrap();
        let v: Vec<serde_json::Value> = read_records(&p).unwrap();
        assert_eq!(v.len(), 2);
        let mut app = Appender::open(&p).unwrap();
        app.append(&[serde_json::json!({"a": 3})]).unwrap();
        let v: Vec<serde_json::Value> = read_records(&p).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"a\":1}\nnope\n{\"a\":2}\n").unwrap();
        assert!(read_records::<serde_json::Value>(&p).is_err());
    }
}
