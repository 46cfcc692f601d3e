//! Property vectors: builtin graph descriptors, ingested columns,
//! normalization and `[UNK]` masking.

use std::collections::HashMap;
use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::molgraph::{canonical_smiles, BondOrder, MolGraph, SmilesError};

/// Builtin descriptors in their fixed order, with long-form aliases.
pub const BUILTIN: &[(&str, &str)] = &[
    ("MW", "molecular_weight"),
    ("#atom", "atom_count_with_H"),
    ("#heavy_atom", "heavy_atom_count"),
    ("#bond", "bond_count"),
    ("#ring", "ring_count"),
    ("#aromatic_ring", "aromatic_ring_count"),
    ("NumHDonors", "HB_donor_count"),
    ("NumHAcceptors", "HB_acceptor_count"),
    ("#rotatable_bond", "rotatable_bond_count"),
    ("formal_charge", "formal_charge_sum"),
    ("#halogen", "halogen_count"),
    ("#heteroatom", "heteroatom_count"),
];

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum PropertyError {
    #[error("need at least two molecules to fit a normalizer, got {0}")]
    EmptyCorpus(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("expected {expected} property columns, found {found} (line {line})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        line: usize,
    },
    #[error("unknown property '{0}'")]
    UnknownProperty(String),
    #[error("duplicate property name '{0}'")]
    DuplicateName(String),
    #[error("invalid SMILES on line {line}: {source}")]
    Smiles { line: usize, source: SmilesError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropertySource {
    Builtin,
    Ingested,
}

/// Ordered property names. Position in this list is the property's identity
/// inside a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertySpec {
    names: Vec<String>,
    sources: Vec<PropertySource>,
}

impl Default for PropertySpec {
    fn default() -> Self {
        PropertySpec::builtin()
    }
}

impl PropertySpec {
    /// The twelve graph-computable descriptors.
    pub fn builtin() -> PropertySpec {
        PropertySpec {
            names: BUILTIN.iter().map(|(n, _)| n.to_string()).collect(),
            sources: vec![PropertySource::Builtin; BUILTIN.len()],
        }
    }

    /// A spec from explicit names; names matching a builtin descriptor (or
    /// its alias) are computed, everything else is ingested.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<PropertySpec, PropertyError> {
        let mut spec = PropertySpec {
            names: Vec::new(),
            sources: Vec::new(),
        };
        for name in names {
            let name = name.as_ref().trim();
            let (name, source) = match builtin_index(name) {
                Some(i) => (BUILTIN[i].0.to_string(), PropertySource::Builtin),
                None => (name.to_string(), PropertySource::Ingested),
            };
            if spec.names.contains(&name) {
                return Err(PropertyError::DuplicateName(name));
            }
            spec.names.push(name);
            spec.sources.push(source);
        }
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn source(&self, i: usize) -> PropertySource {
        self.sources[i]
    }

    /// Position of a property by name or builtin alias.
    pub fn position(&self, name: &str) -> Option<usize> {
        let name = name.trim();
        self.names.iter().position(|n| n == name).or_else(|| {
            let b = builtin_index(name)?;
            self.names.iter().position(|n| n == BUILTIN[b].0)
        })
    }

    /// Raw values for one molecule: builtin slots computed from the graph,
    /// ingested slots looked up by canonical SMILES (unknown when absent).
    pub fn raw_values(&self, graph: &MolGraph, ingested: Option<&IngestedTable>) -> Vec<Option<f64>> {
        let builtin = compute_builtin(graph);
        let row = ingested.and_then(|t| t.get_graph(graph));
        self.names
            .iter()
            .enumerate()
            .map(|(i, name)| match self.sources[i] {
                PropertySource::Builtin => Some(builtin[builtin_index(name).unwrap()]),
                PropertySource::Ingested => row
                    .zip(ingested)
                    .and_then(|(r, t)| t.column(name).and_then(|c| r[c])),
            })
            .collect()
    }

    /// One name per line.
    pub fn to_file_string(&self) -> String {
        self.names.iter().fold(String::new(), |mut s, n| {
            writeln!(s, "{n}").unwrap();
            s
        })
    }

    pub fn from_file_string(text: &str) -> Result<PropertySpec, PropertyError> {
        let names: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        PropertySpec::from_names(&names)
    }
}

fn builtin_index(name: &str) -> Option<usize> {
    BUILTIN.iter().position(|(n, alias)| *n == name || *alias == name)
}

/// Builtin descriptors in [`BUILTIN`] order.
pub fn compute_builtin(g: &MolGraph) -> Vec<f64> {
    let atoms = g.atoms();
    let is_heavy = |i: usize| !atoms[i].element.is_hydrogen();
    let hydrogens: u32 = atoms.iter().map(|a| a.total_h()).sum();
    let hydrogen_atoms = atoms.iter().filter(|a| a.element.is_hydrogen()).count();
    let heavy = atoms.len() - hydrogen_atoms;
    let h_mass = crate::molgraph::Element::from_symbol("H").unwrap().mass();
    // Summed from element counts so the value does not depend on atom order.
    let mut counts: std::collections::BTreeMap<crate::molgraph::Element, u32> = Default::default();
    for a in atoms {
        *counts.entry(a.element).or_default() += 1;
    }
    let mw: f64 = counts.iter().map(|(e, &c)| e.mass() * c as f64).sum::<f64>() + hydrogens as f64 * h_mass;
    let heavy_bonds = g.bonds().iter().filter(|b| is_heavy(b.a) && is_heavy(b.b)).count();
    let aromatic_rings = g
        .rings()
        .iter()
        .filter(|r| r.iter().all(|&a| atoms[a].aromatic))
        .count();
    let is_n_or_o = |a: &crate::molgraph::Atom| matches!(a.element.atomic_number(), 7 | 8);
    let donors = atoms.iter().filter(|a| is_n_or_o(a) && a.total_h() >= 1).count();
    let acceptors = atoms.iter().filter(|a| is_n_or_o(a)).count();
    let rotatable = g
        .bonds()
        .iter()
        .enumerate()
        .filter(|(i, b)| {
            b.order == BondOrder::Single
                && !g.is_ring_bond(*i)
                && is_heavy(b.a)
                && is_heavy(b.b)
                && g.heavy_degree(b.a) >= 2
                && g.heavy_degree(b.b) >= 2
        })
        .count();
    let charge: i32 = atoms.iter().map(|a| a.formal_charge).sum();
    let halogens = atoms.iter().filter(|a| a.element.is_halogen()).count();
    let hetero = atoms
        .iter()
        .filter(|a| !a.element.is_carbon() && !a.element.is_hydrogen())
        .count();
    vec![
        mw,
        (atoms.len() as u32 + hydrogens) as f64,
        heavy as f64,
        heavy_bonds as f64,
        g.cycle_rank() as f64,
        aromatic_rings as f64,
        donors as f64,
        acceptors as f64,
        rotatable as f64,
        charge as f64,
        halogens as f64,
        hetero as f64,
    ]
}

/// Per-property mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits over known values only. Standard deviations use the n-1
    /// denominator and are floored at 1e-8.
    pub fn fit(rows: &[Vec<Option<f64>>]) -> Result<Normalizer, PropertyError> {
        if rows.len() < 2 {
            return Err(PropertyError::EmptyCorpus(rows.len()));
        }
        let dim = rows[0].len();
        let mut mean = vec![0.0; dim];
        let mut std = vec![1.0; dim];
        for j in 0..dim {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean[j] = m;
            std[j] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, i: usize, raw: f64) -> f64 {
        (raw - self.mean[i]) / self.std[i]
    }

    pub fn denormalize(&self, i: usize, z: f64) -> f64 {
        z * self.std[i] + self.mean[i]
    }

    pub fn vector(&self, raw: &[Option<f64>]) -> PropertyVector {
        let known: Vec<bool> = raw.iter().map(Option::is_some).collect();
        let raw_vals: Vec<f64> = raw.iter().map(|v| v.unwrap_or(0.0)).collect();
        let normalized = raw_vals
            .iter()
            .enumerate()
            .map(|(i, &v)| if known[i] { self.normalize(i, v) } else { 0.0 })
            .collect();
        PropertyVector {
            raw: raw_vals,
            normalized,
            known,
        }
    }

    /// `name<TAB>mean<TAB>std` per property.
    pub fn to_file_string(&self, spec: &PropertySpec) -> String {
        let mut out = String::new();
        for (i, name) in spec.names().iter().enumerate() {
            writeln!(out, "{name}\t{:?}\t{:?}", self.mean[i], self.std[i]).unwrap();
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<(PropertySpec, Normalizer), PropertyError> {
        let mut names = Vec::new();
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| PropertyError::Parse {
                line: n + 1,
                msg: msg.to_string(),
            };
            if parts.len() != 3 {
                return Err(bad("expected name, mean, std"));
            }
            names.push(parts[0]);
            mean.push(parts[1].parse().map_err(|_| bad("bad mean"))?);
            std.push(parts[2].parse().map_err(|_| bad("bad std"))?);
        }
        Ok((PropertySpec::from_names(&names)?, Normalizer { mean, std }))
    }
}

/// A property vector with per-slot known flags. Unknown slots carry no value.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub known: Vec<bool>,
}

impl PropertyVector {
    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    /// A vector with every slot unknown.
    pub fn unknown(dim: usize) -> PropertyVector {
        PropertyVector {
            raw: vec![0.0; dim],
            normalized: vec![0.0; dim],
            known: vec![false; dim],
        }
    }

    /// Flips each known slot to unknown with probability `rate`.
    pub fn mask<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> PropertyVector {
        let mut out = self.clone();
        for i in 0..out.len() {
            // Draw for every slot so the stream does not depend on the pattern.
            let u: f64 = rng.random();
            if out.known[i] && u < rate {
                out.known[i] = false;
                out.raw[i] = 0.0;
                out.normalized[i] = 0.0;
            }
        }
        out
    }

    pub fn mask_seeded(&self, rate: f64, seed: u64) -> PropertyVector {
        self.mask(rate, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Property table read from CSV, keyed by canonical SMILES.
#[derive(Debug, Clone, Default)]
pub struct IngestedTable {
    columns: Vec<String>,
    rows: HashMap<String, Vec<Option<f64>>>,
}

impl IngestedTable {
    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, canonical: &str) -> Option<&[Option<f64>]> {
        self.rows.get(canonical).map(Vec::as_slice)
    }

    fn get_graph(&self, g: &MolGraph) -> Option<&[Option<f64>]> {
        self.get(&crate::molgraph::canonicalize(g))
    }
}

/// Reads `smiles,prop1,...,propP` CSV text. Empty cells are unknown. When a
/// spec is given, the header must list exactly its properties.
pub fn ingest_properties(text: &str, spec: Option<&PropertySpec>) -> Result<IngestedTable, PropertyError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(PropertyError::Parse {
            line: 1,
            msg: "missing header".into(),
        });
    };
    let header: Vec<&str> = header.split(',').map(str::trim).collect();
    if header.first() != Some(&"smiles") {
        return Err(PropertyError::Parse {
            line: 1,
            msg: "first column must be 'smiles'".into(),
        });
    }
    let columns: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
    if let Some(spec) = spec {
        if columns.len() != spec.len() {
            return Err(PropertyError::DimensionMismatch {
                expected: spec.len(),
                found: columns.len(),
                line: 1,
            });
        }
        for c in &columns {
            if spec.position(c).is_none() {
                return Err(PropertyError::UnknownProperty(c.clone()));
            }
        }
    }
    let mut rows = HashMap::new();
    for (n, line) in lines {
        let line_no = n + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() + 1 {
            return Err(PropertyError::DimensionMismatch {
                expected: columns.len(),
                found: cells.len() - 1,
                line: line_no,
            });
        }
        let canonical = canonical_smiles(cells[0]).map_err(|source| PropertyError::Smiles { line: line_no, source })?;
        let values = cells[1..]
            .iter()
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|_| PropertyError::Parse {
                        line: line_no,
                        msg: format!("non-numeric cell '{c}'"),
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.insert(canonical, values);
    }
    Ok(IngestedTable { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, randomize_smiles};

    fn props(s: &str) -> Vec<f64> {
        compute_builtin(&parse_smiles(s).unwrap())
    }

    fn get(s: &str, name: &str) -> f64 {
        props(s)[builtin_index(name).unwrap()]
    }

    #[test]
    fn benzene() {
        let p = props("c1ccccc1");
        assert!((p[0] - 78.114).abs() < 1e-9, "MW {}", p[0]);
        assert_eq!(&p[1..], &[12.0, 6.0, 6.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn methane_and_ammonium() {
        assert!((get("C", "MW") - 16.043).abs() < 1e-9);
        assert_eq!(get("C", "#ring"), 0.0);
        assert_eq!(get("C", "#rotatable_bond"), 0.0);
        assert_eq!(get("[NH4+]", "formal_charge_sum"), 1.0);
    }

    #[test]
    fn lipinski_style_counts() {
        // Ethanol: one donor O, one acceptor, no rotatable (terminal atoms).
        assert_eq!(get("CCO", "NumHDonors"), 1.0);
        assert_eq!(get("CCO", "NumHAcceptors"), 1.0);
        assert_eq!(get("CCO", "#rotatable_bond"), 0.0);
        assert_eq!(get("CCCC", "#rotatable_bond"), 1.0);
        assert_eq!(get("c1ccccc1CCl", "#rotatable_bond"), 1.0);
        assert_eq!(get("c1ccccc1CCl", "#halogen"), 1.0);
        assert_eq!(get("OC(=O)c1ccncc1", "#heteroatom"), 3.0);
        assert_eq!(get("c1ccc2ccccc2c1", "#aromatic_ring"), 2.0);
        assert_eq!(get("C1CCc2ccccc2C1", "#aromatic_ring"), 1.0);
        assert_eq!(get("C1CCc2ccccc2C1", "#ring"), 2.0);
    }

    #[test]
    fn invariant_under_rewriting() {
        for s in ["CC(=O)Oc1ccccc1C(=O)O", "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "C1CC2CCC1CC2"] {
            let g = parse_smiles(s).unwrap();
            let p = compute_builtin(&g);
            for seed in 0..20 {
                assert_eq!(props(&randomize_smiles(&g, seed)), p);
            }
        }
    }

    #[test]
    fn normalizer_fit() {
        let rows = vec![vec![Some(0.0), Some(5.0)], vec![Some(2.0), Some(5.0)]];
        let n = Normalizer::fit(&rows).unwrap();
        assert_eq!(n.mean, vec![1.0, 5.0]);
        assert!((n.std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(n.std[1], 1e-8);
        assert_eq!(n.normalize(1, 5.0), 0.0);
        for x in [-3.5, 0.0, 1.0, 1234.5] {
            assert!((n.denormalize(0, n.normalize(0, x)) - x).abs() < 1e-9);
        }
        assert!(matches!(Normalizer::fit(&rows[..1]), Err(PropertyError::EmptyCorpus(1))));
    }

    #[test]
    fn masking() {
        let pv = PropertyVector {
            raw: vec![1.0; 10_000],
            normalized: vec![1.0; 10_000],
            known: vec![true; 10_000],
        };
        assert_eq!(pv.mask_seeded(0.0, 3), pv);
        assert!(pv.mask_seeded(1.0, 3).known.iter().all(|k| !k));
        let half = pv.mask_seeded(0.5, 3);
        let frac = half.known.iter().filter(|k| !**k).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
        assert_eq!(half, pv.mask_seeded(0.5, 3));
    }

    #[test]
    fn ingest() {
        let spec = PropertySpec::from_names(&["MW", "logP"]).unwrap();
        assert_eq!(spec.source(1), PropertySource::Ingested);
        let t = ingest_properties("smiles,MW,logP\nOCC,46.07,\nc1ccccc1,78.1,2.1\n", Some(&spec)).unwrap();
        let key = canonical_smiles("CCO").unwrap();
        assert_eq!(t.get(&key).unwrap(), &[Some(46.07), None]);
        let raw = spec.raw_values(&parse_smiles("c1ccccc1").unwrap(), Some(&t));
        assert_eq!(raw[1], Some(2.1));
        let err = ingest_properties("smiles,MW,logP\nCCO,1\n", Some(&spec)).unwrap_err();
        assert!(matches!(err, PropertyError::DimensionMismatch { line: 2, .. }));
        let err = ingest_properties("smiles,MW\nCCO,1\n", Some(&spec)).unwrap_err();
        assert!(matches!(err, PropertyError::DimensionMismatch { .. }));
        let err = ingest_properties("smiles,MW,logP\nCCO,x,1\n", Some(&spec)).unwrap_err();
        assert!(matches!(err, PropertyError::Parse { line: 2, .. }));
    }

    #[test]
    fn spec_file_round_trip() {
        let spec = PropertySpec::builtin();
        assert_eq!(PropertySpec::from_file_string(&spec.to_file_string()).unwrap(), spec);
        assert_eq!(spec.position("molecular_weight"), Some(0));
        let n = Normalizer { mean: vec![0.1; 12], std: vec![3.3; 12] };
        let (s2, n2) = Normalizer::from_file_string(&n.to_file_string(&spec)).unwrap();
        assert_eq!((s2, n2), (spec, n));
    }
}
