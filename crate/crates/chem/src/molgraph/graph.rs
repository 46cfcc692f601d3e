use std::collections::{BTreeMap, VecDeque};

use super::element::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the bonding valence of each endpoint. Aromatic bonds
    /// count as one; the extra pi electron is handled by the H-count rule.
    pub fn valence(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i32,
    /// Hydrogens written inside brackets.
    pub explicit_h: u32,
    /// Hydrogens inferred from the valence deficit of unbracketed atoms.
    pub implicit_h: u32,
}

impl Atom {
    pub fn total_h(&self) -> u32 {
        self.explicit_h + self.implicit_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

/// A molecule (or several dot-separated fragments) as a labelled graph.
#[derive(Debug, Clone)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// Per atom: (neighbour, bond index), sorted by neighbour.
    adjacency: Vec<Vec<(usize, usize)>>,
    /// Smallest set of smallest rings, each as an ordered closed walk of atoms.
    rings: Vec<Vec<usize>>,
    ring_bond: Vec<bool>,
}

impl MolGraph {
    /// Builds the graph and its ring set. Callers guarantee bond endpoints are
    /// valid, distinct, and not duplicated.
    pub(crate) fn from_parts(atoms: Vec<Atom>, bonds: Vec<Bond>) -> MolGraph {
        let mut adjacency = vec![Vec::new(); atoms.len()];
        for (i, bond) in bonds.iter().enumerate() {
            debug_assert!(bond.a != bond.b);
            adjacency[bond.a].push((bond.b, i));
            adjacency[bond.b].push((bond.a, i));
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        let mut graph = MolGraph {
            atoms,
            bonds,
            adjacency,
            rings: Vec::new(),
            ring_bond: Vec::new(),
        };
        let ring_bonds = graph.minimum_cycle_basis();
        graph.ring_bond = vec![false; graph.bonds.len()];
        for ring in &ring_bonds {
            for &b in ring {
                graph.ring_bond[b] = true;
            }
        }
        graph.rings = ring_bonds
            .iter()
            .map(|ring| graph.walk_from_bonds(ring))
            .collect();
        graph
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn rings(&self) -> &[Vec<usize>] {
        &self.rings
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// (neighbour, bond index) pairs of `atom`.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.adjacency[atom].len()
    }

    /// Number of non-hydrogen neighbours.
    pub fn heavy_degree(&self, atom: usize) -> usize {
        self.adjacency[atom]
            .iter()
            .filter(|(n, _)| !self.atoms[*n].element.is_hydrogen())
            .count()
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.adjacency[a]
            .iter()
            .find(|(n, _)| *n == b)
            .map(|&(_, i)| &self.bonds[i])
    }

    pub fn is_ring_bond(&self, bond: usize) -> bool {
        self.ring_bond[bond]
    }

    pub fn is_ring_atom(&self, atom: usize) -> bool {
        self.adjacency[atom].iter().any(|&(_, b)| self.ring_bond[b])
    }

    /// Sum of bond valences at `atom`.
    pub fn bond_valence(&self, atom: usize) -> u32 {
        self.adjacency[atom]
            .iter()
            .map(|&(_, b)| self.bonds[b].order.valence())
            .sum()
    }

    /// Component label per atom and the number of components.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut label = vec![usize::MAX; self.atoms.len()];
        let mut count = 0;
        for start in 0..self.atoms.len() {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = count;
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    /// |bonds| - |atoms| + |components|.
    pub fn cycle_rank(&self) -> usize {
        let (_, components) = self.components();
        self.bonds.len() + components - self.atoms.len()
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = self.atoms.clone();
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old].clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                order: b.order,
            })
            .collect();
        MolGraph::from_parts(atoms, bonds)
    }

    // Horton candidate cycles filtered by GF(2) independence, shortest first.
    fn minimum_cycle_basis(&self) -> Vec<Vec<usize>> {
        let rank = self.cycle_rank();
        if rank == 0 {
            return Vec::new();
        }
        let n = self.atoms.len();
        let words = self.bonds.len().div_ceil(64);
        let mut candidates: BTreeMap<(usize, Vec<usize>), Vec<u64>> = BTreeMap::new();
        for root in 0..n {
            if self.adjacency[root].len() < 2 {
                continue;
            }
            // BFS tree: parent bond and depth per atom.
            let mut depth = vec![usize::MAX; n];
            let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
            let mut queue = VecDeque::from([root]);
            depth[root] = 0;
            while let Some(u) = queue.pop_front() {
                for &(v, b) in &self.adjacency[u] {
                    if depth[v] == usize::MAX {
                        depth[v] = depth[u] + 1;
                        parent[v] = Some((u, b));
                        queue.push_back(v);
                    }
                }
            }
            let path = |mut v: usize| -> (Vec<usize>, Vec<usize>) {
                let mut atoms = vec![v];
                let mut bonds = Vec::new();
                while let Some((p, b)) = parent[v] {
                    bonds.push(b);
                    atoms.push(p);
                    v = p;
                }
                (atoms, bonds)
            };
            for (bi, bond) in self.bonds.iter().enumerate() {
                let (x, y) = (bond.a, bond.b);
                if depth[x] == usize::MAX || depth[y] == usize::MAX {
                    continue;
                }
                if parent[x].map(|p| p.1) == Some(bi) || parent[y].map(|p| p.1) == Some(bi) {
                    continue;
                }
                let (ax, bx) = path(x);
                let (ay, by) = path(y);
                // Paths must meet only at the root.
                let shared = ax.iter().filter(|a| ay.contains(a)).count();
                if shared != 1 {
                    continue;
                }
                let mut ring: Vec<usize> = bx.into_iter().chain(by).collect();
                ring.push(bi);
                ring.sort_unstable();
                let mut bits = vec![0u64; words];
                for &b in &ring {
                    bits[b / 64] |= 1 << (b % 64);
                }
                candidates.entry((ring.len(), ring)).or_insert(bits);
            }
        }
        // Gaussian elimination over GF(2), keyed by pivot bit.
        let mut basis: Vec<(usize, Vec<u64>)> = Vec::new();
        let mut chosen = Vec::new();
        for ((_, ring), bits) in candidates {
            let mut v = bits;
            for (pivot, row) in &basis {
                if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                    for (x, r) in v.iter_mut().zip(row) {
                        *x ^= r;
                    }
                }
            }
            if let Some(pivot) = first_bit(&v) {
                // Keep rows reduced so later candidates eliminate correctly.
                for (_, row) in basis.iter_mut() {
                    if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                        for (x, r) in row.iter_mut().zip(&v) {
                            *x ^= r;
                        }
                    }
                }
                basis.push((pivot, v));
                chosen.push(ring);
                if chosen.len() == rank {
                    break;
                }
            }
        }
        chosen
    }

    fn walk_from_bonds(&self, ring: &[usize]) -> Vec<usize> {
        let first = self.bonds[ring[0]];
        let mut walk = vec![first.a, first.b];
        let mut used = vec![ring[0]];
        while walk.len() < ring.len() {
            let last = *walk.last().unwrap();
            let next = ring
                .iter()
                .find(|&&b| !used.contains(&b) && (self.bonds[b].a == last || self.bonds[b].b == last))
                .copied()
                .expect("ring bonds form a cycle");
            used.push(next);
            walk.push(self.bonds[next].other(last));
        }
        walk
    }
}

fn first_bit(bits: &[u64]) -> Option<usize> {
    bits.iter()
        .enumerate()
        .find(|(_, w)| **w != 0)
        .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}
