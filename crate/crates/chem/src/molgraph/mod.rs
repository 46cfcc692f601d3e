//! SMILES strings as molecular graphs.
//!
//! The grammar covers the organic subset, bracket atoms with isotope,
//! chirality, H count, charge and class (isotope, chirality and class are
//! discarded), bond symbols `- = # : / \` (`/` and `\` read as single bonds),
//! ring closures `0-9` and `%nn`, branches and dot-separated fragments.
//!
//! Aromaticity is syntactic: lowercase atoms and `:` bonds. There is no
//! perception or kekulization pass.

mod canon;
mod element;
mod graph;
mod parse;
mod write;

pub use canon::{canonicalize, randomize_smiles};
pub use element::{Element, ElementInfo};
pub use graph::{Atom, Bond, BondOrder, MolGraph};
pub use parse::parse_smiles;
pub use write::write_smiles;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SmilesError {
    #[error("empty SMILES")]
    Empty,
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("valence exceeded on atom {atom} ({element}, valence {valence})")]
    Valence {
        atom: usize,
        element: &'static str,
        valence: u32,
    },
    #[error("aromatic atom {atom} is not in a ring")]
    AromaticOutsideRing { atom: usize },
}

/// Parses and canonicalizes in one step.
pub fn canonical_smiles(s: &str) -> Result<String, SmilesError> {
    parse_smiles(s).map(|g| canonicalize(&g))
}

/// Validity predicate used by the generation metrics.
pub fn is_valid_smiles(s: &str) -> bool {
    parse_smiles(s).is_ok()
}
