//! TREC interchange: qrels `qid 0 docid rel`, runs `qid Q0 docid rank score tag`.

use std::fmt::Write as _;
use std::path::Path;

use ebadapt_core::metrics::{Qrels, Run};

use super::{read_text, write_file};
use crate::error::{Error, Result};

pub fn parse_qrels(path: &Path, text: &str) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let at = |d: &str| Error::format(path, format!("line {}: {d}", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 4 {
            return Err(at(&format!("expected 4 fields, found {}", f.len())));
        }
        let rel: u32 = f[3].parse().map_err(|_| at(&format!("bad relevance `{}`", f[3])))?;
        qrels.insert(f[0], f[2], rel).map_err(|e| at(&e.to_string()))?;
    }
    Ok(qrels)
}

/// Queries, then documents, in lexicographic order.
pub fn format_qrels(qrels: &Qrels) -> String {
    let mut s = String::new();
    for (q, docs) in qrels.iter() {
        for (d, rel) in docs {
            writeln!(s, "{q} 0 {d} {rel}").unwrap();
        }
    }
    s
}

/// Ranks are recomputed from scores; the rank column must still be an integer.
pub fn parse_run(path: &Path, text: &str) -> Result<Run> {
    let mut grouped: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    let mut pos = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let at = |d: &str| Error::format(path, format!("line {}: {d}", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(at(&format!("expected 6 fields, found {}", f.len())));
        }
        f[3].parse::<u64>().map_err(|_| at(&format!("bad rank `{}`", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| at(&format!("bad score `{}`", f[4])))?;
        let slot = *pos.entry(f[0].to_string()).or_insert_with(|| {
            grouped.push((f[0].to_string(), Vec::new()));
            grouped.len() - 1
        });
        grouped[slot].1.push((f[2].to_string(), score));
    }
    let mut run = Run::new();
    for (q, docs) in grouped {
        run.insert(&q, docs).map_err(|e| Error::format(path, format!("query {q}: {e}")))?;
    }
    Ok(run)
}

/// Scores are printed in shortest round-trip form, so parsing the output
/// recovers every `f64` exactly.
pub fn format_run(run: &Run, tag: &str) -> String {
    let mut s = String::new();
    for (q, docs) in run.iter() {
        for (rank, (d, score)) in docs.iter().enumerate() {
            writeln!(s, "{q} Q0 {d} {} {score:?} {tag}", rank + 1).unwrap();
        }
    }
    s
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(path, &read_text(path)?)
}

pub fn save_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    write_file(path, format_qrels(qrels).as_bytes())
}

pub fn load_run(path: &Path) -> Result<Run> {
    parse_run(path, &read_text(path)?)
}

pub fn save_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    write_file(path, format_run(run, tag).as_bytes())
}
