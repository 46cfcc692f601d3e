use std::collections::BTreeSet;
use std::fmt::Write;

use super::graph::{Atom, BondOrder, MolGraph};
use super::parse::implicit_hydrogens;

/// Writes `graph` as SMILES. `order` lists atom indices by traversal priority:
/// each fragment starts at its earliest-listed atom and branches are visited
/// in list order.
pub fn write_smiles(graph: &MolGraph, order: &[usize]) -> String {
    let n = graph.atom_count();
    assert_eq!(order.len(), n, "order must be a permutation of atom indices");
    let mut rank = vec![usize::MAX; n];
    for (k, &atom) in order.iter().enumerate() {
        assert!(rank[atom] == usize::MAX, "order repeats atom {atom}");
        rank[atom] = k;
    }
    write_ranked(graph, &rank)
}

/// Writes `graph` with atoms prioritized by ascending `rank` (all distinct).
pub(crate) fn write_ranked(graph: &MolGraph, rank: &[usize]) -> String {
    let n = graph.atom_count();
    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.sort_by_key(|&a| rank[a]);
    let sorted_nbrs: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|a| {
            let mut v = graph.neighbors(a).to_vec();
            v.sort_by_key(|&(nb, _)| rank[nb]);
            v
        })
        .collect();

    let mut plan = Plan {
        visited: vec![false; n],
        children: vec![Vec::new(); n],
        openings: vec![Vec::new(); n],
        closings: vec![Vec::new(); n],
        bond_used: vec![false; graph.bonds().len()],
    };
    let mut roots = Vec::new();
    for &start in &by_rank {
        if !plan.visited[start] {
            roots.push(start);
            plan.explore(start, None, &sorted_nbrs);
        }
    }
    for list in &mut plan.openings {
        list.sort_by_key(|&(partner, _)| rank[partner]);
    }

    let mut out = String::new();
    let mut emitter = Emitter {
        graph,
        plan: &plan,
        free_digits: (1..100).collect(),
        digit_of_bond: vec![0; graph.bonds().len()],
        out: &mut out,
    };
    for (i, &root) in roots.iter().enumerate() {
        if i > 0 {
            emitter.out.push('.');
        }
        emitter.emit(root);
    }
    out
}

struct Plan {
    visited: Vec<bool>,
    children: Vec<Vec<(usize, usize)>>,
    /// Ring bonds opened at an atom: (partner, bond).
    openings: Vec<Vec<(usize, usize)>>,
    /// Ring bonds closed at an atom, in discovery order.
    closings: Vec<Vec<usize>>,
    bond_used: Vec<bool>,
}

impl Plan {
    fn explore(&mut self, atom: usize, parent_bond: Option<usize>, nbrs: &[Vec<(usize, usize)>]) {
        self.visited[atom] = true;
        for &(next, bond) in &nbrs[atom] {
            if Some(bond) == parent_bond || self.bond_used[bond] {
                continue;
            }
            self.bond_used[bond] = true;
            if self.visited[next] {
                // `next` is an ancestor still on the stack: ring closure.
                self.openings[next].push((atom, bond));
                self.closings[atom].push(bond);
            } else {
                self.children[atom].push((next, bond));
                self.explore(next, Some(bond), nbrs);
            }
        }
    }
}

struct Emitter<'a> {
    graph: &'a MolGraph,
    plan: &'a Plan,
    free_digits: BTreeSet<u32>,
    digit_of_bond: Vec<u32>,
    out: &'a mut String,
}

impl Emitter<'_> {
    fn emit(&mut self, atom: usize) {
        let graph = self.graph;
        write_atom(graph, atom, self.out);
        for &bond in &self.plan.closings[atom] {
            let digit = self.digit_of_bond[bond];
            push_digit(self.out, digit);
            self.free_digits.insert(digit);
        }
        for &(partner, bond) in &self.plan.openings[atom] {
            let digit = self
                .free_digits
                .pop_first()
                .expect("fewer than 100 simultaneously open rings");
            self.digit_of_bond[bond] = digit;
            let order = graph.bonds()[bond].order;
            self.out.push_str(bond_symbol(&graph.atoms()[atom], &graph.atoms()[partner], order));
            push_digit(self.out, digit);
        }
        let children = &self.plan.children[atom];
        for (i, &(child, bond)) in children.iter().enumerate() {
            let last = i + 1 == children.len();
            if !last {
                self.out.push('(');
            }
            let order = graph.bonds()[bond].order;
            self.out
                .push_str(bond_symbol(&graph.atoms()[atom], &graph.atoms()[child], order));
            self.emit(child);
            if !last {
                self.out.push(')');
            }
        }
    }
}

fn push_digit(out: &mut String, digit: u32) {
    if digit < 10 {
        write!(out, "{digit}").unwrap();
    } else {
        write!(out, "%{digit:02}").unwrap();
    }
}

fn bond_symbol(a: &Atom, b: &Atom, order: BondOrder) -> &'static str {
    let both_aromatic = a.aromatic && b.aromatic;
    match order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

fn write_atom(graph: &MolGraph, index: usize, out: &mut String) {
    let atom = &graph.atoms()[index];
    let symbol = atom.element.symbol();
    let bare_ok = atom.formal_charge == 0
        && atom.element.is_organic_subset()
        && (!atom.aromatic || atom.element.has_bare_aromatic_form())
        && implicit_hydrogens(atom.element, atom.aromatic, graph.bond_valence(index))
            == Some(atom.total_h());
    let text = if atom.aromatic {
        symbol.to_ascii_lowercase()
    } else {
        symbol.to_string()
    };
    if bare_ok {
        out.push_str(&text);
        return;
    }
    out.push('[');
    out.push_str(&text);
    match atom.total_h() {
        0 => {}
        1 => out.push('H'),
        h => write!(out, "H{h}").unwrap(),
    }
    match atom.formal_charge {
        0 => {}
        1 => out.push('+'),
        -1 => out.push('-'),
        q if q > 0 => write!(out, "+{q}").unwrap(),
        q => write!(out, "-{}", -q).unwrap(),
    }
    out.push(']');
}
