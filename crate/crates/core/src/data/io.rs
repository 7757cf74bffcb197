use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::skeleton::SkeletonSequence;
use crate::error::{Error, Result};

/// Parses one sequence per non-blank line and validates each record.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<SkeletonSequence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: SkeletonSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        seq.validate().map_err(|e| match e {
            Error::Validation { field, message } => Error::Validation {
                field,
                message: format!("line {lineno}: {message}"),
            },
            other => other,
        })?;
        out.push(seq);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<SkeletonSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

pub fn write_jsonl_to<W: Write>(mut writer: W, seqs: &[SkeletonSequence]) -> Result<()> {
    for s in seqs {
        let line = serde_json::to_string(s).map_err(|e| Error::Contract(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<writer>", e))
}

pub fn write_jsonl(path: impl AsRef<Path>, seqs: &[SkeletonSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl_to(BufWriter::new(file), seqs)
}
