//! Tidy plot tables from generation or property-prediction JSON lines.
//!
//! Output is `molecule,property,value,source` with `source` one of
//! `input`, `generated` or `corpus-mean`. When any property has both an
//! input and a generated value, a blank line and a
//! `property,n,r2,rmse` summary table follow.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::{CliError, CliResult};

pub const HEADER: &str = "molecule,property,value,source";
pub const SUMMARY_HEADER: &str = "property,n,r2,rmse";

/// Values for one molecule: targets or true values (`input`) and model
/// outputs (`generated`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    pub molecule: String,
    pub input: BTreeMap<String, f64>,
    pub generated: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub property: String,
    pub n: usize,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
}

fn schema(line: usize, msg: &str) -> CliError {
    CliError::data(format!("schema error: {msg}"), Some(&format!("line {line}")))
}

fn number_map(v: &Value, key: &str, line: usize) -> CliResult<BTreeMap<String, f64>> {
    let obj = v
        .get(key)
        .and_then(Value::as_object)
        .ok_or_else(|| schema(line, &format!("`{key}` must be an object")))?;
    let mut out = BTreeMap::new();
    for (name, val) in obj {
        match val {
            Value::Null => {}
            Value::Number(n) => {
                out.insert(name.clone(), n.as_f64().unwrap_or(f64::NAN));
            }
            _ => return Err(schema(line, &format!("`{key}.{name}` must be a number or null"))),
        }
    }
    Ok(out)
}

/// Accepts generation records (`smiles`, `valid`, `properties`,
/// `conditioning`) and prediction records (`smiles`, `predicted`, `actual`).
pub fn parse_records(text: &str) -> CliResult<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| schema(n, &e.to_string()))?;
        let molecule = v
            .get("smiles")
            .and_then(Value::as_str)
            .ok_or_else(|| schema(n, "`smiles` must be a string"))?
            .to_string();
        let record = if v.get("predicted").is_some() {
            Record {
                molecule,
                input: number_map(&v, "actual", n)?,
                generated: number_map(&v, "predicted", n)?,
            }
        } else if v.get("properties").is_some() {
            let valid = v.get("valid").and_then(Value::as_bool).unwrap_or(true);
            Record {
                molecule,
                input: match v.get("conditioning") {
                    Some(_) => number_map(&v, "conditioning", n)?,
                    None => BTreeMap::new(),
                },
                generated: if valid { number_map(&v, "properties", n)? } else { BTreeMap::new() },
            }
        } else {
            return Err(schema(n, "expected `predicted` or `properties`"));
        };
        out.push(record);
    }
    Ok(out)
}

/// `r² = 1 - SS_res / SS_tot` (undefined for fewer than two points or
/// constant inputs) and RMSE over `(input, generated)` pairs.
pub fn r2_rmse(pairs: &[(f64, f64)]) -> (Option<f64>, Option<f64>) {
    if pairs.is_empty() {
        return (None, None);
    }
    let n = pairs.len() as f64;
    let ss_res: f64 = pairs.iter().map(|(y, p)| (y - p).powi(2)).sum();
    let mean = pairs.iter().map(|(y, _)| y).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(y, _)| (y - mean).powi(2)).sum();
    let r2 = (pairs.len() >= 2 && ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    (r2, Some((ss_res / n).sqrt()))
}

pub fn summarize(records: &[Record]) -> Vec<Summary> {
    let mut pairs: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        for (name, &y) in &r.input {
            if let Some(&p) = r.generated.get(name) {
                pairs.entry(name).or_default().push((y, p));
            }
        }
    }
    pairs
        .into_iter()
        .map(|(name, p)| {
            let (r2, rmse) = r2_rmse(&p);
            Summary {
                property: name.to_string(),
                n: p.len(),
                r2,
                rmse,
            }
        })
        .collect()
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Renders the tidy table; `corpus_means` rows are added for properties
/// that occur in `records`.
pub fn to_csv(records: &[Record], corpus_means: &[(String, f64)]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        for (source, values) in [("input", &r.input), ("generated", &r.generated)] {
            for (name, v) in values {
                seen.insert(name.as_str());
                out.push_str(&format!("{},{},{v:?},{source}\n", field(&r.molecule), field(name)));
            }
        }
    }
    for (name, mean) in corpus_means {
        if seen.contains(name.as_str()) {
            out.push_str(&format!(",{},{mean:?},corpus-mean\n", field(name)));
        }
    }
    let summary = summarize(records);
    if !summary.is_empty() {
        out.push('\n');
        out.push_str(SUMMARY_HEADER);
        out.push('\n');
        for s in summary {
            out.push_str(&format!("{},{},{},{}\n", field(&s.property), s.n, num(s.r2), num(s.rmse)));
        }
    }
    out
}
