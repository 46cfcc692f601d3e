use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::MolGraph;
use super::write::write_ranked;

/// Leaf budget for the tie-breaking search. Past it, ties are broken by
/// taking the first candidate only.
const SEARCH_BUDGET: usize = 256;

/// Canonical SMILES: invariant under atom relabeling.
///
/// Atoms are ranked by iterated neighbourhood refinement of
/// (element, aromatic, charge, degree, H count). Remaining ties are broken by
/// trying each member of the lowest tied class and keeping the
/// lexicographically smallest output string.
pub fn canonicalize(graph: &MolGraph) -> String {
    let n = graph.atom_count();
    if n == 0 {
        return String::new();
    }
    let initial: Vec<(u8, bool, i32, usize, u32)> = (0..n)
        .map(|i| {
            let a = &graph.atoms()[i];
            (
                a.element.atomic_number(),
                a.aromatic,
                a.formal_charge,
                graph.degree(i),
                a.total_h(),
            )
        })
        .collect();
    let ranks = refine(graph, dense_ranks(&initial));
    let mut budget = SEARCH_BUDGET;
    search(graph, ranks, &mut budget)
}

/// SMILES with a pseudo-random atom priority drawn from `seed`.
pub fn randomize_smiles(graph: &MolGraph, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rank: Vec<usize> = (0..graph.atom_count()).collect();
    rank.shuffle(&mut rng);
    write_ranked(graph, &rank)
}

fn search(graph: &MolGraph, ranks: Vec<usize>, budget: &mut usize) -> String {
    let n = ranks.len();
    // Lowest rank shared by more than one atom.
    let mut counts = vec![0usize; n];
    for &r in &ranks {
        counts[r] += 1;
    }
    let Some(tied) = (0..n).find(|&r| counts[r] > 1) else {
        *budget = budget.saturating_sub(1);
        return write_ranked(graph, &ranks);
    };
    let candidates: Vec<usize> = (0..n).filter(|&a| ranks[a] == tied).collect();
    let mut best: Option<String> = None;
    for (i, &chosen) in candidates.iter().enumerate() {
        if i > 0 && *budget == 0 {
            break;
        }
        let split: Vec<(usize, bool)> = (0..n).map(|a| (ranks[a], a != chosen)).collect();
        let refined = refine(graph, dense_ranks(&split));
        let s = search(graph, refined, budget);
        if best.as_ref().is_none_or(|b| s < *b) {
            best = Some(s);
        }
    }
    best.expect("at least one candidate")
}

/// Iterates (rank, sorted neighbour (rank, bond)) until the partition is stable.
fn refine(graph: &MolGraph, mut ranks: Vec<usize>) -> Vec<usize> {
    let mut classes = count_classes(&ranks);
    loop {
        let keys: Vec<(usize, Vec<(usize, u8)>)> = (0..ranks.len())
            .map(|a| {
                let mut nb: Vec<(usize, u8)> = graph
                    .neighbors(a)
                    .iter()
                    .map(|&(v, b)| (ranks[v], graph.bonds()[b].order.code()))
                    .collect();
                nb.sort_unstable();
                (ranks[a], nb)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = count_classes(&next);
        ranks = next;
        if next_classes == classes {
            return ranks;
        }
        classes = next_classes;
    }
}

fn count_classes(ranks: &[usize]) -> usize {
    ranks.iter().copied().max().map_or(0, |m| m + 1)
}

/// Rank of each key among the sorted distinct keys.
fn dense_ranks<T: Ord + Clone>(keys: &[T]) -> Vec<usize> {
    let mut sorted: Vec<T> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect()
}
