use std::collections::HashMap;

use super::element::Element;
use super::graph::{Atom, Bond, BondOrder, MolGraph};
use super::SmilesError;

struct PendingRing {
    atom: usize,
    order: Option<BondOrder>,
    pos: usize,
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    /// Whether each atom was written inside brackets.
    bracketed: Vec<bool>,
    bonds: Vec<Bond>,
    open_rings: HashMap<u32, PendingRing>,
}

fn syntax(pos: usize, msg: impl Into<String>) -> SmilesError {
    SmilesError::Syntax {
        pos,
        msg: msg.into(),
    }
}

/// Parses a SMILES string into a molecular graph, checking syntax and valence.
pub fn parse_smiles(s: &str) -> Result<MolGraph, SmilesError> {
    if s.trim().is_empty() {
        return Err(SmilesError::Empty);
    }
    let mut p = Parser {
        bytes: s.as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bracketed: Vec::new(),
        bonds: Vec::new(),
        open_rings: HashMap::new(),
    };
    p.run()?;
    let Parser {
        mut atoms,
        bracketed,
        bonds,
        ..
    } = p;
    assign_hydrogens(&mut atoms, &bracketed, &bonds)?;
    let graph = MolGraph::from_parts(atoms, bonds);
    for (i, atom) in graph.atoms().iter().enumerate() {
        if atom.aromatic && !graph.is_ring_atom(i) {
            return Err(SmilesError::AromaticOutsideRing { atom: i });
        }
    }
    Ok(graph)
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        let mut prev: Option<usize> = None;
        let mut branch_stack: Vec<Option<usize>> = Vec::new();
        let mut pending_bond: Option<(BondOrder, usize)> = None;

        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    if prev.is_none() {
                        return Err(syntax(start, "branch without a preceding atom"));
                    }
                    if pending_bond.is_some() {
                        return Err(syntax(start, "bond symbol before '('"));
                    }
                    branch_stack.push(prev);
                    self.pos += 1;
                }
                b')' => {
                    let Some(saved) = branch_stack.pop() else {
                        return Err(syntax(start, "unbalanced ')'"));
                    };
                    if pending_bond.is_some() {
                        return Err(syntax(start, "dangling bond before ')'"));
                    }
                    prev = saved;
                    self.pos += 1;
                }
                b'.' => {
                    if pending_bond.is_some() {
                        return Err(syntax(start, "dangling bond before '.'"));
                    }
                    if !branch_stack.is_empty() {
                        return Err(syntax(start, "'.' inside a branch"));
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if pending_bond.is_some() {
                        return Err(syntax(start, "two consecutive bond symbols"));
                    }
                    if prev.is_none() {
                        return Err(syntax(start, "bond without a preceding atom"));
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        _ => BondOrder::Single,
                    };
                    pending_bond = Some((order, start));
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let Some(atom) = prev else {
                        return Err(syntax(start, "ring bond without a preceding atom"));
                    };
                    let digit = self.ring_number()?;
                    let order = pending_bond.take().map(|(o, _)| o);
                    self.ring_bond(atom, digit, order, start)?;
                }
                _ => {
                    let atom = self.atom()?;
                    if let Some(p) = prev {
                        let order = pending_bond.take().map(|(o, _)| o);
                        let order = order.unwrap_or_else(|| self.implicit_order(p, atom));
                        self.add_bond(p, atom, order, start)?;
                    }
                    prev = Some(atom);
                }
            }
        }
        if let Some((_, pos)) = pending_bond {
            return Err(syntax(pos, "dangling bond at end of input"));
        }
        if !branch_stack.is_empty() {
            return Err(syntax(self.bytes.len(), "unclosed '('"));
        }
        if let Some((digit, ring)) = self.open_rings.iter().min_by_key(|(_, r)| r.pos) {
            return Err(syntax(ring.pos, format!("ring bond {digit} never closed")));
        }
        Ok(())
    }

    fn implicit_order(&self, a: usize, b: usize) -> BondOrder {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder, pos: usize) -> Result<(), SmilesError> {
        if a == b {
            return Err(syntax(pos, "atom bonded to itself"));
        }
        if self
            .bonds
            .iter()
            .any(|x| (x.a == a && x.b == b) || (x.a == b && x.b == a))
        {
            return Err(syntax(pos, "duplicate bond between the same atoms"));
        }
        self.bonds.push(Bond {
            a: a.min(b),
            b: a.max(b),
            order,
        });
        Ok(())
    }

    fn ring_number(&mut self) -> Result<u32, SmilesError> {
        let start = self.pos;
        if self.peek() == Some(b'%') {
            let digits = self.bytes.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u32)
                }
                _ => Err(syntax(start, "'%' must be followed by two digits")),
            }
        } else {
            let d = self.bytes[self.pos] - b'0';
            self.pos += 1;
            Ok(d as u32)
        }
    }

    fn ring_bond(
        &mut self,
        atom: usize,
        digit: u32,
        order: Option<BondOrder>,
        pos: usize,
    ) -> Result<(), SmilesError> {
        match self.open_rings.remove(&digit) {
            None => {
                self.open_rings.insert(digit, PendingRing { atom, order, pos });
                Ok(())
            }
            Some(open) => {
                let order = match (open.order, order) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(syntax(pos, format!("conflicting bond orders on ring bond {digit}")))
                    }
                    (Some(a), _) | (None, Some(a)) => a,
                    (None, None) => self.implicit_order(open.atom, atom),
                };
                self.add_bond(open.atom, atom, order, pos)
            }
        }
    }

    fn atom(&mut self) -> Result<usize, SmilesError> {
        let start = self.pos;
        let c = self.bytes[self.pos];
        if c == b'[' {
            return self.bracket_atom();
        }
        let two = self.bytes.get(self.pos..self.pos + 2);
        let (symbol, aromatic, len) = match (c, two) {
            (b'C', Some(b"Cl")) => ("Cl", false, 2),
            (b'B', Some(b"Br")) => ("Br", false, 2),
            (b'B', _) => ("B", false, 1),
            (b'C', _) => ("C", false, 1),
            (b'N', _) => ("N", false, 1),
            (b'O', _) => ("O", false, 1),
            (b'P', _) => ("P", false, 1),
            (b'S', _) => ("S", false, 1),
            (b'F', _) => ("F", false, 1),
            (b'I', _) => ("I", false, 1),
            (b'b', _) => ("B", true, 1),
            (b'c', _) => ("C", true, 1),
            (b'n', _) => ("N", true, 1),
            (b'o', _) => ("O", true, 1),
            (b'p', _) => ("P", true, 1),
            (b's', _) => ("S", true, 1),
            _ => {
                let ch = std::str::from_utf8(&self.bytes[start..])
                    .ok()
                    .and_then(|s| s.chars().next())
                    .unwrap_or('?');
                return Err(syntax(start, format!("unknown symbol '{ch}'")));
            }
        };
        self.pos += len;
        let element = Element::from_symbol(symbol).expect("organic subset is in the table");
        self.atoms.push(Atom {
            element,
            aromatic,
            formal_charge: 0,
            explicit_h: 0,
            implicit_h: 0,
        });
        self.bracketed.push(false);
        Ok(self.atoms.len() - 1)
    }

    fn bracket_atom(&mut self) -> Result<usize, SmilesError> {
        let open = self.pos;
        let close = self.bytes[open..]
            .iter()
            .position(|&b| b == b']')
            .map(|i| open + i)
            .ok_or_else(|| syntax(open, "unclosed '['"))?;
        let body = &self.bytes[open + 1..close];
        let mut i = 0;
        // Isotope: accepted and discarded.
        while i < body.len() && body[i].is_ascii_digit() {
            i += 1;
        }
        let err = |msg: &str| syntax(open, format!("bad bracket atom: {msg}"));
        let rest = &body[i..];
        let (symbol, aromatic, len) = bracket_symbol(rest).ok_or_else(|| err("unknown element"))?;
        i += len;
        let element = Element::from_symbol(&symbol).ok_or_else(|| err("unknown element"))?;
        if aromatic && !element.can_be_aromatic() {
            return Err(err("element cannot be aromatic"));
        }
        // Chirality: accepted and discarded.
        while i < body.len() && body[i] == b'@' {
            i += 1;
        }
        for tag in [&b"TH"[..], b"AL", b"SP", b"TB", b"OH"] {
            if body[i..].starts_with(tag) {
                i += 2;
                while i < body.len() && body[i].is_ascii_digit() {
                    i += 1;
                }
            }
        }
        let mut hydrogens = 0u32;
        if i < body.len() && body[i] == b'H' {
            i += 1;
            hydrogens = 1;
            let s = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            if i > s {
                hydrogens = std::str::from_utf8(&body[s..i]).unwrap().parse().map_err(|_| err("H count"))?;
            }
        }
        let mut charge = 0i32;
        if i < body.len() && (body[i] == b'+' || body[i] == b'-') {
            let sign = if body[i] == b'+' { 1 } else { -1 };
            let sym = body[i];
            i += 1;
            let s = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            let magnitude = if i > s {
                std::str::from_utf8(&body[s..i]).unwrap().parse::<i32>().map_err(|_| err("charge"))?
            } else {
                let mut m = 1;
                while i < body.len() && body[i] == sym {
                    m += 1;
                    i += 1;
                }
                m
            };
            charge = sign * magnitude;
        }
        if i < body.len() && body[i] == b':' {
            i += 1;
            let s = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            if i == s {
                return Err(err("empty atom class"));
            }
        }
        if i != body.len() {
            return Err(err("trailing characters"));
        }
        self.pos = close + 1;
        self.atoms.push(Atom {
            element,
            aromatic,
            formal_charge: charge,
            explicit_h: hydrogens,
            implicit_h: 0,
        });
        self.bracketed.push(true);
        Ok(self.atoms.len() - 1)
    }
}

fn bracket_symbol(rest: &[u8]) -> Option<(String, bool, usize)> {
    let first = *rest.first()?;
    if first.is_ascii_lowercase() {
        // Aromatic forms: b c n o p s se as te.
        for (text, sym) in [("se", "Se"), ("as", "As"), ("te", "Te")] {
            if rest.starts_with(text.as_bytes()) {
                return Some((sym.to_string(), true, 2));
            }
        }
        let sym = (first as char).to_ascii_uppercase().to_string();
        return Some((sym, true, 1));
    }
    if !first.is_ascii_uppercase() {
        return None;
    }
    if let Some(&second) = rest.get(1) {
        if second.is_ascii_lowercase() {
            let two = format!("{}{}", first as char, second as char);
            if Element::from_symbol(&two).is_some() {
                return Some((two, false, 2));
            }
        }
    }
    Some(((first as char).to_string(), false, 1))
}

/// Valence check for every atom plus implicit-H inference for atoms written
/// outside brackets.
pub(crate) fn assign_hydrogens(
    atoms: &mut [Atom],
    bracketed: &[bool],
    bonds: &[Bond],
) -> Result<(), SmilesError> {
    let mut bond_sum = vec![0u32; atoms.len()];
    for b in bonds {
        bond_sum[b.a] += b.order.valence();
        bond_sum[b.b] += b.order.valence();
    }
    for (i, atom) in atoms.iter_mut().enumerate() {
        let used = bond_sum[i];
        if bracketed[i] {
            atom.implicit_h = 0;
            if let Some(allowed) = atom.element.allowed_valences(atom.formal_charge) {
                let total = used + atom.explicit_h;
                if !allowed.iter().any(|&v| v >= total) {
                    return Err(SmilesError::Valence {
                        atom: i,
                        element: atom.element.symbol(),
                        valence: total,
                    });
                }
            }
        } else {
            atom.implicit_h = implicit_hydrogens(atom.element, atom.aromatic, used).ok_or(
                SmilesError::Valence {
                    atom: i,
                    element: atom.element.symbol(),
                    valence: used,
                },
            )?;
        }
    }
    Ok(())
}

/// Hydrogens an unbracketed, uncharged atom carries given its bond valence.
/// Aromatic atoms reserve one valence unit for the ring pi system when there
/// is room for it.
pub(crate) fn implicit_hydrogens(element: Element, aromatic: bool, used: u32) -> Option<u32> {
    let allowed = element.allowed_valences(0)?;
    let extra = u32::from(aromatic);
    if let Some(&v) = allowed.iter().find(|&&v| v >= used + extra) {
        return Some(v - used - extra);
    }
    if aromatic && allowed.iter().any(|&v| v >= used) {
        return Some(0);
    }
    None
}
