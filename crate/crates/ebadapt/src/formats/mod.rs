//! On-disk formats. Every emitter has a parser that recovers the original.

mod binary;
pub mod checkpoint;
pub mod index;
pub mod tables;
pub mod trec;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ebadapt_core::tokenizer::Tokenizer;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "not valid UTF-8"))
}

/// Creates parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

/// Adaptation corpus line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub next: String,
}

/// Document or query line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

/// Contrastive training line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query_id: String,
    pub query: String,
    pub positive_id: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<TextRecord>,
}

pub fn format_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_jsonl(path, &read_text(path)?)
}

pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_file(path, format_jsonl(records).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    format_version: u32,
    vocab: Vec<String>,
}

pub fn format_tokenizer(tok: &Tokenizer) -> String {
    let f = TokenizerFile {
        format_version: 1,
        vocab: tok.vocab().to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&f).expect("vocab serializes");
    s.push('\n');
    s
}

pub fn parse_tokenizer(path: &Path, text: &str) -> Result<Tokenizer> {
    let f: TokenizerFile = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    if f.format_version != 1 {
        return Err(Error::format(path, format!("unsupported tokenizer version {}", f.format_version)));
    }
    Tokenizer::from_vocab(f.vocab).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    parse_tokenizer(path, &read_text(path)?)
}

pub fn save_tokenizer(path: &Path, tok: &Tokenizer) -> Result<()> {
    write_file(path, format_tokenizer(tok).as_bytes())
}

/// Writes to stdout, ignoring a closed pipe.
pub fn print(s: &str) {
    let _ = std::io::stdout().write_all(s.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let recs = vec![
            PairRecord {
                query_id: "q1".into(),
                query: "who \"is\" it ?".into(),
                positive_id: "d1".into(),
                positive: "it is".into(),
                negatives: vec![TextRecord {
                    id: "d2".into(),
                    text: "not it".into(),
                }],
            },
            PairRecord {
                query_id: "q2".into(),
                query: "x".into(),
                positive_id: "d2".into(),
                positive: "y".into(),
                negatives: vec![],
            },
        ];
        let s = format_jsonl(&recs);
        let p = Path::new("pairs.jsonl");
        assert_eq!(parse_jsonl::<PairRecord>(p, &s).unwrap(), recs);
        let e = parse_jsonl::<CorpusRecord>(p, "{\"id\":\"a\",\"text\":\"b\",\"next\":\"c\"}\n{\"id\":\"a\"}\n").unwrap_err();
        assert!(e.to_string().starts_with("pairs.jsonl: line 2:"), "{e}");
    }

    #[test]
    fn tokenizer_round_trip() {
        let tok = Tokenizer::build(["ba de ba", "fi"], 100);
        let s = format_tokenizer(&tok);
        assert_eq!(parse_tokenizer(Path::new("t"), &s).unwrap(), tok);
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
