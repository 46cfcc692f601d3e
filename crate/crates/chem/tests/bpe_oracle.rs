use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spmm_chem::Vocab;

const UNITS: &[&str] = &["C", "c", "N", "n", "O", "(", ")", "=", "1", "2", "Cl", "Br", "[nH]", "[O-]", "%10"];

/// Independent unit scanner.
fn units(s: &str) -> Vec<String> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let len = match b[i] {
            b'[' => s[i..].find(']').unwrap() + 1,
            b'%' => 3,
            b'C' if b.get(i + 1) == Some(&b'l') => 2,
            b'B' if b.get(i + 1) == Some(&b'r') => 2,
            _ => 1,
        };
        out.push(s[i..i + len].to_string());
        i += len;
    }
    out
}

/// Most frequent adjacent non-bracket pair, smallest pair on ties.
fn brute_force_first_merge(corpus: &[String]) -> Option<(String, String)> {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for s in corpus {
        let u = units(s);
        for w in u.windows(2) {
            if !w[0].starts_with('[') && !w[1].starts_with('[') {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += 1;
            }
        }
    }
    let max = *counts.values().max()?;
    counts.into_iter().find(|(_, c)| *c == max).map(|(p, _)| p)
}

#[test]
fn first_merge_matches_brute_force_on_random_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let n = rng.random_range(3..12);
        let corpus: Vec<String> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..10);
                (0..len).map(|_| UNITS[rng.random_range(0..UNITS.len())]).collect()
            })
            .collect();
        let expected = brute_force_first_merge(&corpus);
        let base = Vocab::base_size_for(corpus.iter().map(String::as_str));
        let vocab = Vocab::train(&corpus, base + 1).unwrap();
        let got = vocab.merges().first().map(|r| {
            (vocab.token(r.left).unwrap().to_string(), vocab.token(r.right).unwrap().to_string())
        });
        assert_eq!(got, expected, "{corpus:?}");
    }
}

#[test]
fn scanner_agrees_with_library_split() {
    for s in ["CCl[nH]c%10Br", "C(=O)[O-]", "c1ccccc1"] {
        let lib: Vec<String> = spmm_chem::tokenizer::split_units(s).into_iter().map(str::to_string).collect();
        assert_eq!(lib, units(s));
    }
}
