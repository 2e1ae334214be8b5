//! CSV outputs: loss curves and side-by-side comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use ebadapt_core::adapt::LossPoint;
use serde::{Deserialize, Serialize};

use super::{read_text, write_file};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct AdaptRow {
    step: usize,
    ebae_loss: f64,
    ebar_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct FinetuneRow {
    step: usize,
    loss: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(String::new(), |p| format!("line {}: ", p.line()));
    Error::format(path, format!("{line}{e}"))
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("ascii csv")
}

fn from_csv<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}

/// `step,ebae_loss,ebar_loss`
pub fn format_adapt_curve(curve: &[LossPoint]) -> String {
    if curve.is_empty() {
        return "step,ebae_loss,ebar_loss\n".into();
    }
    to_csv(curve.iter().map(|p| AdaptRow {
        step: p.step,
        ebae_loss: p.ebae,
        ebar_loss: p.ebar,
    }))
}

pub fn parse_adapt_curve(path: &Path, text: &str) -> Result<Vec<LossPoint>> {
    let rows: Vec<AdaptRow> = from_csv(path, text)?;
    Ok(rows
        .into_iter()
        .map(|r| LossPoint {
            step: r.step,
            ebae: r.ebae_loss,
            ebar: r.ebar_loss,
        })
        .collect())
}

/// `step,loss`
pub fn format_finetune_curve(curve: &[(usize, f64)]) -> String {
    if curve.is_empty() {
        return "step,loss\n".into();
    }
    to_csv(curve.iter().map(|&(step, loss)| FinetuneRow { step, loss }))
}

pub fn parse_finetune_curve(path: &Path, text: &str) -> Result<Vec<(usize, f64)>> {
    let rows: Vec<FinetuneRow> = from_csv(path, text)?;
    Ok(rows.into_iter().map(|r| (r.step, r.loss)).collect())
}

/// Rows keyed by an integer budget with one value per named column, such as
/// `N,initial,adapted,finetuned`.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub key: String,
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once(self.key.as_str()).chain(self.columns.iter().map(String::as_str)).collect();
        w.write_record(&header).expect("in-memory write");
        for (k, vals) in &self.rows {
            let rec: Vec<String> = std::iter::once(k.to_string()).chain(vals.iter().map(|v| format!("{v:?}"))).collect();
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("ascii csv")
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let mut fields = header.iter().map(String::from);
        let key = fields.next().ok_or_else(|| Error::format(path, "empty header"))?;
        let columns: Vec<String> = fields.collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let at = |f: &str| Error::format(path, format!("line {}: bad number `{f}`", i + 2));
            let k = rec[0].parse().map_err(|_| at(&rec[0]))?;
            let vals = rec.iter().skip(1).map(|f| f.parse::<f64>().map_err(|_| at(f))).collect::<Result<_>>()?;
            rows.push((k, vals));
        }
        Ok(Comparison { key, columns, rows })
    }

    /// Fixed-width text rendering under a caption line.
    pub fn render(&self, caption: &str) -> String {
        let mut s = String::new();
        writeln!(s, "{caption}").unwrap();
        write!(s, "{:>8}", self.key).unwrap();
        for c in &self.columns {
            write!(s, " {c:>12}").unwrap();
        }
        s.push('\n');
        for (k, vals) in &self.rows {
            write!(s, "{k:>8}").unwrap();
            for v in vals {
                write!(s, " {v:>12.4}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn load_comparison(path: &Path) -> Result<Comparison> {
    Comparison::parse(path, &read_text(path)?)
}

pub fn save_comparison(path: &Path, c: &Comparison) -> Result<()> {
    write_file(path, c.to_csv().as_bytes())
}
