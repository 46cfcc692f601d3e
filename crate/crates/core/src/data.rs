//! Corpus loading: SMILES files, property vectors and token ids.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};
use spmm_chem::molgraph::canonicalize;
use spmm_chem::propcalc::IngestedTable;
use spmm_chem::{parse_smiles, Normalizer, PropertySpec, PropertyVector, Vocab};

use crate::error::SpmmError;

/// First whitespace-separated field of every non-empty, non-comment line.
pub fn read_smiles_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub smiles: String,
    pub canonical: String,
    pub ids: Vec<u32>,
    pub raw: Vec<Option<f64>>,
    pub pv: PropertyVector,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub molecules: Vec<Molecule>,
    /// Input line index and reason for every dropped entry.
    pub skipped: Vec<(usize, String)>,
}

/// Parses, computes raw properties and drops what does not parse.
pub fn raw_properties(
    smiles: &[String],
    spec: &PropertySpec,
    ingested: Option<&IngestedTable>,
) -> (Vec<(String, String, Vec<Option<f64>>)>, Vec<(usize, String)>) {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in smiles.iter().enumerate() {
        match parse_smiles(s) {
            Ok(g) => kept.push((s.clone(), canonicalize(&g), spec.raw_values(&g, ingested))),
            Err(e) => skipped.push((i, e.to_string())),
        }
    }
    (kept, skipped)
}

/// Full corpus preparation. Entries whose SMILES do not tokenize or exceed
/// `max_len` are skipped.
pub fn build_corpus(
    smiles: &[String],
    spec: &PropertySpec,
    ingested: Option<&IngestedTable>,
    vocab: &Vocab,
    normalizer: &Normalizer,
    max_len: usize,
) -> Corpus {
    let mut molecules = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in smiles.iter().enumerate() {
        let g = match parse_smiles(s) {
            Ok(g) => g,
            Err(e) => {
                skipped.push((i, e.to_string()));
                continue;
            }
        };
        let ids = match vocab.tokenize(s) {
            Ok(t) => t.ids,
            Err(e) => {
                skipped.push((i, e.to_string()));
                continue;
            }
        };
        if ids.len() > max_len {
            skipped.push((i, format!("{} tokens exceed max_len {max_len}", ids.len())));
            continue;
        }
        let raw = spec.raw_values(&g, ingested);
        let pv = normalizer.vector(&raw);
        molecules.push(Molecule {
            smiles: s.clone(),
            canonical: canonicalize(&g),
            ids,
            raw,
            pv,
        });
    }
    Corpus { molecules, skipped }
}

/// Sorted unique canonical forms, one per line, and their SHA-256.
pub fn corpus_digest<'a>(canonicals: impl IntoIterator<Item = &'a str>) -> (String, String) {
    let set: BTreeSet<&str> = canonicals.into_iter().collect();
    let mut text = String::new();
    for s in set {
        text.push_str(s);
        text.push('\n');
    }
    let hash = sha256_hex(text.as_bytes());
    (text, hash)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical set from a digest file, verified against `expected_sha`.
pub fn read_digest(text: &str, expected_sha: Option<&str>) -> Result<BTreeSet<String>, SpmmError> {
    if let Some(sha) = expected_sha {
        let found = sha256_hex(text.as_bytes());
        if found != sha {
            return Err(SpmmError::Data(format!("corpus digest hash {found} does not match {sha}")));
        }
    }
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}
