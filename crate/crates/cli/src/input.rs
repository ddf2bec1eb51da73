//! Loose readers for the small input files the commands accept.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase()
}

/// Rows of a JSONL or CSV file as JSON objects.
pub fn records(path: &Path) -> Result<Vec<serde_json::Map<String, Value>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match extension(path).as_str() {
        "jsonl" | "ndjson" | "json" => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).with_context(|| format!("{} line {}: expected a JSON object", path.display(), i + 1))
            })
            .collect(),
        "csv" => {
            let mut rdr = csv::Reader::from_reader(text.as_bytes());
            let headers = rdr.headers()?.clone();
            rdr.records()
                .map(|r| {
                    let r = r?;
                    Ok(headers.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), Value::String(v.to_string()))).collect())
                })
                .collect()
        }
        _ => bail!("{}: expected a .jsonl or .csv file", path.display()),
    }
}

fn field(rec: &serde_json::Map<String, Value>, names: &[&str]) -> Option<String> {
    names.iter().find_map(|n| match rec.get(*n)? {
        Value::String(s) => Some(s.clone()),
        Value::Null => None,
        other => Some(other.to_string()),
    })
}

/// `(id, text)` pairs. Structured files use the first present of
/// `text_fields`; any other file is one text per nonempty line, with
/// 1-based line numbers as ids.
pub fn id_texts(path: &Path, text_fields: &[&str]) -> Result<Vec<(String, String)>> {
    match extension(path).as_str() {
        "jsonl" | "ndjson" | "json" | "csv" => records(path)?
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let id = field(rec, &["id"]).unwrap_or_else(|| (i + 1).to_string());
                let text = field(rec, text_fields)
                    .with_context(|| format!("{} row {}: none of {text_fields:?} present", path.display(), i + 1))?;
                Ok((id, text))
            })
            .collect(),
        _ => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| ((i + 1).to_string(), l.to_string()))
                .collect())
        }
    }
}

/// Typed CSV rows.
pub fn csv_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    rdr.deserialize().collect::<Result<Vec<T>, _>>().with_context(|| format!("parsing {}", path.display()))
}

/// Joins predictions and references on id, in reference order.
pub fn join_by_id(pred: Vec<(String, String)>, refs: Vec<(String, String)>) -> Result<Vec<(String, String, String)>> {
    let mut by_id: BTreeMap<String, String> = BTreeMap::new();
    for (id, text) in pred {
        if by_id.insert(id.clone(), text).is_some() {
            bail!("duplicate prediction id {id:?}");
        }
    }
    let out: Vec<(String, String, String)> = refs
        .into_iter()
        .map(|(id, reference)| match by_id.remove(&id) {
            Some(candidate) => Ok((id, candidate, reference)),
            None => bail!("no prediction for id {id:?}"),
        })
        .collect::<Result<_>>()?;
    if let Some(extra) = by_id.keys().next() {
        bail!("prediction {extra:?} has no reference");
    }
    Ok(out)
}
