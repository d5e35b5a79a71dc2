//! Minimal CoNLL-U reader: columns ID, FORM, HEAD and DEPREL are consumed,
//! everything else is passed over. Multiword ranges (`1-2`) and empty nodes
//! (`3.1`) are skipped. HEAD = 0 (root) produces no arc.

use std::fs;
use std::path::Path;

use crate::error::{Result, SgcnError};

/// Tokens plus arcs (head, dependent, label), 0-based, head -> dependent.
pub type ConlluSentence = (Vec<String>, Vec<(usize, usize, String)>);

pub fn load_conllu(path: &Path) -> Result<Vec<ConlluSentence>> {
    let text = fs::read_to_string(path)?;
    parse_conllu(&text)
}

pub fn parse_conllu(text: &str) -> Result<Vec<ConlluSentence>> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    // (dependent index, head as written (1-based, 0 = root), label, line no)
    let mut pending: Vec<(usize, usize, String, usize)> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>,
                     pending: &mut Vec<(usize, usize, String, usize)>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let n = tokens.len();
        let mut arcs = Vec::new();
        for (dep, head, label, line) in pending.drain(..) {
            if head > n {
                return Err(SgcnError::Parse {
                    line,
                    msg: format!("HEAD {head} out of range for sentence of {n} tokens"),
                });
            }
            if head != 0 {
                arcs.push((head - 1, dep, label));
            }
        }
        sentences.push((std::mem::take(tokens), arcs));
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim_end();
        if line.is_empty() {
            flush(&mut tokens, &mut pending)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 8 {
            return Err(SgcnError::Parse {
                line: lineno,
                msg: format!("expected at least 8 tab-separated columns, got {}", cols.len()),
            });
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            continue; // multiword token range or empty node
        }
        let idx: usize = id.parse().map_err(|_| SgcnError::Parse {
            line: lineno,
            msg: format!("non-integer token ID {id:?}"),
        })?;
        if idx == 0 || idx != tokens.len() + 1 {
            return Err(SgcnError::Parse {
                line: lineno,
                msg: format!("unexpected token ID {idx} (expected {})", tokens.len() + 1),
            });
        }
        let head: usize = cols[6].parse().map_err(|_| SgcnError::Parse {
            line: lineno,
            msg: format!("non-integer HEAD {:?}", cols[6]),
        })?;
        tokens.push(cols[1].to_string());
        pending.push((idx - 1, head, cols[7].to_string(), lineno));
    }
    flush(&mut tokens, &mut pending)?;
    Ok(sentences)
}
