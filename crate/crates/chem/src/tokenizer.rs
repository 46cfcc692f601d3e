//! Byte-pair-encoding vocabularies over SMILES.
//!
//! SMILES are first split into units: bracket atoms (`[nH+]`), two-letter
//! organic atoms (`Cl`, `Br`), `%nn` ring labels and single characters.
//! Bracket units never take part in a merge. Training repeatedly merges the
//! most frequent adjacent pair (ties go to the lexicographically smallest
//! pair) until the vocabulary reaches its budget or no pair is left.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

/// Units always present in a vocabulary, whatever the corpus.
const FIXED_ALPHABET: &[&str] = &[
    "B", "C", "N", "O", "P", "S", "F", "I", "Cl", "Br", "b", "c", "n", "o", "p", "s", "(", ")", ".",
    "=", "#", "-", ":", "/", "\\", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("budget {budget} is below the base vocabulary size {base}")]
    BudgetTooSmall { budget: usize, base: usize },
    #[error("unknown character sequence '{unit}' in '{smiles}'")]
    UnknownCharacter { unit: String, smiles: String },
    #[error("token id {0} is not in the vocabulary")]
    InvalidId(u32),
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
}

/// Splits a SMILES string into pre-tokenization units.
pub fn split_units(s: &str) -> Vec<&str> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let len = match bytes[i] {
            b'[' => bytes[i..].iter().position(|&b| b == b']').map_or(bytes.len() - i, |p| p + 1),
            b'C' if bytes.get(i + 1) == Some(&b'l') => 2,
            b'B' if bytes.get(i + 1) == Some(&b'r') => 2,
            b'%' if bytes.len() >= i + 3 && bytes[i + 1..i + 3].iter().all(u8::is_ascii_digit) => 3,
            _ => s[i..].chars().next().map_or(1, char::len_utf8),
        };
        out.push(&s[i..i + len]);
        i += len;
    }
    out
}

fn is_bracket(unit: &str) -> bool {
    unit.starts_with('[')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRule {
    pub left: u32,
    pub right: u32,
    pub merged: u32,
    /// Corpus frequency of the pair when the rule was acquired (0 when loaded
    /// from a file).
    pub frequency: usize,
}

/// Subword table plus ordered merge rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<MergeRule>,
    base_size: usize,
}

/// Token ids of one SMILES, usually framed by `[CLS]` ... `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_model_ready(&self) -> bool {
        self.ids.first() == Some(&CLS_ID) && self.ids.last() == Some(&SEP_ID) && self.ids.len() >= 2
    }
}

impl Vocab {
    fn with_base<'a>(units: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut alphabet: Vec<String> = FIXED_ALPHABET.iter().map(|s| s.to_string()).collect();
        alphabet.extend(units.into_iter().map(str::to_string));
        alphabet.sort();
        alphabet.dedup();
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            merges: Vec::new(),
            base_size: 0,
        };
        for t in [PAD, CLS, SEP].into_iter().map(str::to_string).chain(alphabet) {
            vocab.push_token(t);
        }
        vocab.base_size = vocab.tokens.len();
        vocab
    }

    fn push_token(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Size of the vocabulary before any merge for this corpus: specials
    /// plus the unit alphabet.
    pub fn base_size_for<'a>(corpus: impl IntoIterator<Item = &'a str>) -> usize {
        Vocab::with_base(corpus.into_iter().flat_map(split_units)).base_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id <= SEP_ID
    }

    /// Trains a vocabulary of at most `budget` entries (specials included).
    pub fn train<S: AsRef<str>>(corpus: &[S], budget: usize) -> Result<Vocab, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut vocab = Vocab::with_base(corpus.iter().flat_map(|s| split_units(s.as_ref())));
        if budget < vocab.base_size {
            return Err(TokenizerError::BudgetTooSmall {
                budget,
                base: vocab.base_size,
            });
        }
        // Identical strings are trained once with a multiplicity.
        let mut words: BTreeMap<&str, usize> = BTreeMap::new();
        for s in corpus {
            *words.entry(s.as_ref()).or_default() += 1;
        }
        let mut words: Vec<(Vec<u32>, usize)> = words
            .into_iter()
            .map(|(s, count)| {
                let ids = split_units(s).into_iter().map(|u| vocab.index[u]).collect();
                (ids, count)
            })
            .collect();
        let mergeable: Vec<bool> = vocab.tokens.iter().map(|t| !is_bracket(t)).collect();
        let mut mergeable = mergeable;

        while vocab.len() < budget {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (ids, mult) in &words {
                for w in ids.windows(2) {
                    if mergeable[w[0] as usize] && mergeable[w[1] as usize] {
                        *counts.entry((w[0], w[1])).or_default() += mult;
                    }
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let key = |p: &(u32, u32)| (vocab.tokens[p.0 as usize].clone(), vocab.tokens[p.1 as usize].clone());
                    // Smaller pair wins ties, so compare reversed.
                    key(pb).cmp(&key(pa))
                })
            });
            let Some(((left, right), frequency)) = best else {
                break;
            };
            let text = format!("{}{}", vocab.tokens[left as usize], vocab.tokens[right as usize]);
            let merged = vocab.push_token(text);
            if mergeable.len() < vocab.len() {
                mergeable.push(true);
            }
            let rule = MergeRule {
                left,
                right,
                merged,
                frequency,
            };
            for (ids, _) in &mut words {
                apply_rule(ids, &rule);
            }
            vocab.merges.push(rule);
        }
        Ok(vocab)
    }

    /// Units → ids, then every merge rule in acquisition order. No framing.
    pub fn encode(&self, smiles: &str) -> Result<Vec<u32>, TokenizerError> {
        let mut ids = split_units(smiles)
            .into_iter()
            .map(|u| {
                self.index
                    .get(u)
                    .copied()
                    .filter(|&id| id as usize >= 3 && (id as usize) < self.base_size)
                    .ok_or_else(|| TokenizerError::UnknownCharacter {
                        unit: u.to_string(),
                        smiles: smiles.to_string(),
                    })
            })
            .collect::<Result<Vec<u32>, _>>()?;
        for rule in &self.merges {
            if ids.len() < 2 {
                break;
            }
            apply_rule(&mut ids, rule);
        }
        Ok(ids)
    }

    /// `[CLS]` + subwords + `[SEP]`.
    pub fn tokenize(&self, smiles: &str) -> Result<TokenSequence, TokenizerError> {
        let mut ids = vec![CLS_ID];
        ids.extend(self.encode(smiles)?);
        ids.push(SEP_ID);
        Ok(TokenSequence { ids })
    }

    /// Concatenates subwords, skipping special tokens.
    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        self.decode(&seq.ids)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::InvalidId(id))?;
            if !self.is_special(id) {
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// `subword<TAB>id` lines in id order, then `#merge left right` lines.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{tok}\t{id}").unwrap();
        }
        for rule in &self.merges {
            writeln!(
                out,
                "#merge {} {}",
                self.tokens[rule.left as usize], self.tokens[rule.right as usize]
            )
            .unwrap();
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Vocab, TokenizerError> {
        let mut tokens = Vec::new();
        let mut merge_lines = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let fail = |msg: &str| TokenizerError::Format {
                line: line_no,
                msg: msg.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some((tok, id)) = line.split_once('\t') {
                if !merge_lines.is_empty() {
                    return Err(fail("subword entry after merge rules"));
                }
                let id: usize = id.parse().map_err(|_| fail("bad id"))?;
                if id != tokens.len() {
                    return Err(fail("ids must be consecutive from 0"));
                }
                tokens.push(tok.to_string());
            } else if let Some(rest) = line.strip_prefix("#merge ") {
                let (a, b) = rest.split_once(' ').ok_or_else(|| fail("merge needs two subwords"))?;
                merge_lines.push((line_no, a.to_string(), b.to_string()));
            } else {
                return Err(fail("unrecognized line"));
            }
        }
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != CLS || tokens[2] != SEP {
            return Err(TokenizerError::Format {
                line: 1,
                msg: "vocabulary must start with [PAD], [CLS], [SEP]".into(),
            });
        }
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != tokens.len() {
            return Err(TokenizerError::Format {
                line: 0,
                msg: "duplicate subword".into(),
            });
        }
        let mut merges = Vec::new();
        // Base entries are those not produced by any merge.
        let mut produced = vec![false; tokens.len()];
        for (line, a, b) in merge_lines {
            let lookup = |t: &str| {
                index.get(t).copied().ok_or_else(|| TokenizerError::Format {
                    line,
                    msg: format!("unknown subword '{t}' in merge"),
                })
            };
            let left = lookup(&a)?;
            let right = lookup(&b)?;
            let merged = lookup(&format!("{a}{b}"))?;
            produced[merged as usize] |= merged as usize >= 3;
            merges.push(MergeRule {
                left,
                right,
                merged,
                frequency: 0,
            });
        }
        let base_size = produced.iter().position(|&p| p).unwrap_or(tokens.len());
        Ok(Vocab {
            tokens,
            index,
            merges,
            base_size,
        })
    }
}

fn apply_rule(ids: &mut Vec<u32>, rule: &MergeRule) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == rule.left && ids[i + 1] == rule.right {
            out.push(rule.merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn units() {
        assert_eq!(split_units("C[nH+]Cl%12Br"), vec!["C", "[nH+]", "Cl", "%12", "Br"]);
        assert_eq!(split_units("c1ccccc1"), vec!["c", "1", "c", "c", "c", "c", "c", "1"]);
    }

    #[test]
    fn first_merge_is_cc() {
        let corpus = ["CCO", "CCN", "CCC"];
        let base = Vocab::base_size_for(corpus);
        let v = Vocab::train(&corpus, base + 1).unwrap();
        assert_eq!(v.merges().len(), 1);
        assert_eq!(v.token(v.merges()[0].merged), Some("CC"));
        assert_eq!(v.merges()[0].frequency, 4);
        let t = v.encode("CCO").unwrap();
        assert_eq!(t.iter().map(|&i| v.token(i).unwrap()).collect::<Vec<_>>(), vec!["CC", "O"]);
    }

    #[test]
    fn base_budget_means_no_merges() {
        let corpus = ["CCO", "c1ccccc1"];
        let base = Vocab::base_size_for(corpus);
        let v = Vocab::train(&corpus, base).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), base);
        assert_eq!(
            Vocab::train(&corpus, base - 1).unwrap_err(),
            TokenizerError::BudgetTooSmall { budget: base - 1, base }
        );
        assert_eq!(Vocab::train::<&str>(&[], 10).unwrap_err(), TokenizerError::EmptyCorpus);
    }

    #[test]
    fn benzene_becomes_one_token() {
        let corpus = vec!["c1ccccc1"; 5];
        let v = Vocab::train(&corpus, 200).unwrap();
        assert_eq!(v.encode("c1ccccc1").unwrap().len(), 1);
    }

    #[test]
    fn bracket_units_stay_alone() {
        let corpus = ["C[nH]C", "C[nH]C", "C[nH]C"];
        let v = Vocab::train(&corpus, 100).unwrap();
        for id in 0..v.len() as u32 {
            let t = v.token(id).unwrap();
            if t.contains('[') {
                assert_eq!(split_units(t).len(), 1, "{t} merges across a bracket");
            }
        }
    }

    #[test]
    fn unknown_and_invalid() {
        let v = Vocab::train(&["CCO"], 60).unwrap();
        assert!(matches!(v.encode("C[Fe]"), Err(TokenizerError::UnknownCharacter { .. })));
        assert_eq!(
            v.detokenize(&TokenSequence { ids: vec![9999] }),
            Err(TokenizerError::InvalidId(9999))
        );
    }

    #[test]
    fn file_round_trip() {
        let corpus = ["CCO", "CC(=O)O", "c1ccccc1", "C[nH+]C"];
        let v = Vocab::train(&corpus, 60).unwrap();
        let text = v.to_file_string();
        let back = Vocab::from_file_string(&text).unwrap();
        assert_eq!(back.to_file_string(), text);
        for s in corpus {
            assert_eq!(back.encode(s).unwrap(), v.encode(s).unwrap());
        }
    }

    proptest! {
        #[test]
        fn lossless(words in proptest::collection::vec("[CNO=()1c]{1,12}", 1..8)) {
            let v = Vocab::train(&words, 70).unwrap();
            for w in &words {
                let seq = v.tokenize(w).unwrap();
                prop_assert!(seq.is_model_ready());
                prop_assert_eq!(&v.detokenize(&seq).unwrap(), w);
            }
            prop_assert!(v.len() <= 70);
        }
    }
}
