//! JSON Lines corpus format: one object per sentence,
//! `{"src": [...], "tgt": [...], "arcs": [[head, dep, "label"], ...]}`
//! with 0-based indices, arcs stored head -> dependent.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SgcnError};

use super::RawSentence;

pub fn write_jsonl(path: &Path, sentences: &[RawSentence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sentences {
        serde_json::to_writer(&mut w, s)
            .map_err(|e| SgcnError::Data(format!("jsonl write: {e}")))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawSentence>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: RawSentence = serde_json::from_str(&line).map_err(|e| SgcnError::Parse {
            line: lineno + 1,
            msg: format!("bad jsonl record: {e}"),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Plain parallel text: one whitespace-tokenized sentence per line.
pub fn read_tokenized_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect())
}
