//! Chemistry side of the SPMM toolkit.
//!
//! * [`molgraph`]: SMILES parsing with valence checks, ring perception,
//!   canonical and randomized SMILES writing.
//! * [`tokenizer`]: byte-pair-encoding vocabularies over SMILES strings.
//! * [`propcalc`]: property vectors, normalization and `[UNK]` masking.

pub mod molgraph;
pub mod propcalc;
pub mod tokenizer;

pub use molgraph::{parse_smiles, Atom, Bond, BondOrder, MolGraph, SmilesError};
pub use tokenizer::{TokenSequence, Vocab};
pub use propcalc::{Normalizer, PropertySpec, PropertyVector};


