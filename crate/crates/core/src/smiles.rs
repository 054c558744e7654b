//! SMILES subset reader and canonical writer.
//!
//! Supported: organic-subset atoms `C`, `O` and their aromatic forms `c`, `o`,
//! bonds `-`, `=`, `#`, `:`, branches and single-digit ring closures. Aromatic
//! input is converted to an alternating single/double (Kekulé) assignment.
//!
//! Canonical output ranks atoms by iterated neighborhood refinement, breaks
//! remaining ties by exploring every member of the first tied class, and keeps
//! the lexicographically smallest depth-first string.

use crate::molgraph::{validate, Bond, Element, MolecularGraph, Verdict};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("valence exceeded on atom {atom} ({element}): bond order sum {bond_order_sum}")]
    Valence {
        atom: usize,
        element: Element,
        bond_order_sum: u8,
    },
    #[error("unsupported element '{symbol}' at byte {pos}")]
    UnsupportedElement { symbol: String, pos: usize },
}

fn perr(pos: usize, msg: impl Into<String>) -> SmilesError {
    SmilesError::Parse {
        pos,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BondSym {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondSym {
    fn from_char(c: char) -> Option<Self> {
        match c {
            '-' => Some(BondSym::Single),
            '=' => Some(BondSym::Double),
            '#' => Some(BondSym::Triple),
            ':' => Some(BondSym::Aromatic),
            _ => None,
        }
    }
}

struct RawAtom {
    element: Element,
    aromatic: bool,
}

struct RawBond {
    u: usize,
    v: usize,
    sym: BondSym,
}

/// Parses a SMILES string into a validated graph.
pub fn parse_smiles(s: &str) -> Result<MolecularGraph, SmilesError> {
    if s.is_empty() {
        return Err(perr(0, "empty string"));
    }
    if !s.is_ascii() {
        return Err(perr(0, "non-ASCII input"));
    }
    let bytes = s.as_bytes();
    let mut atoms: Vec<RawAtom> = Vec::new();
    let mut bonds: Vec<RawBond> = Vec::new();
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut current: Option<usize> = None;
    let mut pending: Option<(BondSym, usize)> = None;
    // (atom before the branch, atom count when the branch opened, position)
    let mut branches: Vec<(usize, usize, usize)> = Vec::new();
    let mut rings: [Option<(usize, Option<BondSym>, usize)>; 10] = [None; 10];

    let add_bond = |bonds: &mut Vec<RawBond>,
                        pairs: &mut BTreeSet<(usize, usize)>,
                        a: usize,
                        b: usize,
                        sym: BondSym,
                        pos: usize|
     -> Result<(), SmilesError> {
        if a == b {
            return Err(perr(pos, "ring closure onto the same atom"));
        }
        if !pairs.insert((a.min(b), a.max(b))) {
            return Err(perr(pos, "duplicate bond"));
        }
        bonds.push(RawBond { u: a, v: b, sym });
        Ok(())
    };

    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            'C' | 'O' | 'c' | 'o' => {
                if c == 'C' && bytes.get(i + 1) == Some(&b'l') {
                    return Err(SmilesError::UnsupportedElement {
                        symbol: "Cl".into(),
                        pos: i,
                    });
                }
                let element = if c.eq_ignore_ascii_case(&'c') {
                    Element::C
                } else {
                    Element::O
                };
                let aromatic = c.is_ascii_lowercase();
                let idx = atoms.len();
                atoms.push(RawAtom { element, aromatic });
                if let Some(prev) = current {
                    let sym = match pending.take() {
                        Some((sym, _)) => sym,
                        None if atoms[prev].aromatic && aromatic => BondSym::Aromatic,
                        None => BondSym::Single,
                    };
                    add_bond(&mut bonds, &mut pairs, prev, idx, sym, i)?;
                } else if pending.is_some() {
                    return Err(perr(i, "bond symbol without a preceding atom"));
                }
                current = Some(idx);
            }
            '-' | '=' | '#' | ':' => {
                if current.is_none() {
                    return Err(perr(i, "bond symbol without a preceding atom"));
                }
                if pending.is_some() {
                    return Err(perr(i, "two consecutive bond symbols"));
                }
                pending = Some((BondSym::from_char(c).unwrap(), i));
            }
            '(' => {
                let Some(cur) = current else {
                    return Err(perr(i, "branch without a preceding atom"));
                };
                if pending.is_some() {
                    return Err(perr(i, "bond symbol before '('"));
                }
                branches.push((cur, atoms.len(), i));
            }
            ')' => {
                let Some((anchor, count_at_open, _)) = branches.pop() else {
                    return Err(perr(i, "unmatched ')'"));
                };
                if pending.is_some() {
                    return Err(perr(i, "dangling bond symbol before ')'"));
                }
                if atoms.len() == count_at_open {
                    return Err(perr(i, "empty branch"));
                }
                current = Some(anchor);
            }
            '1'..='9' => {
                let Some(cur) = current else {
                    return Err(perr(i, "ring closure without a preceding atom"));
                };
                let digit = (bytes[i] - b'0') as usize;
                let here = pending.take().map(|(s, _)| s);
                match rings[digit].take() {
                    Some((open_atom, open_sym, _)) => {
                        let sym = match (open_sym, here) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(perr(i, "conflicting ring-closure bond symbols"))
                            }
                            (Some(a), _) | (None, Some(a)) => a,
                            (None, None) if atoms[open_atom].aromatic && atoms[cur].aromatic => {
                                BondSym::Aromatic
                            }
                            (None, None) => BondSym::Single,
                        };
                        add_bond(&mut bonds, &mut pairs, open_atom, cur, sym, i)?;
                    }
                    None => rings[digit] = Some((cur, here, i)),
                }
            }
            '0' | '%' => return Err(perr(i, "only ring-closure digits 1-9 are supported")),
            '[' => return Err(perr(i, "bracket atoms are not supported")),
            '.' => return Err(perr(i, "disconnected components are not supported")),
            '/' | '\\' | '@' => return Err(perr(i, "stereochemistry is not supported")),
            c if c.is_ascii_alphabetic() => {
                let mut symbol = c.to_string();
                if c.is_ascii_uppercase() {
                    if let Some(&n) = bytes.get(i + 1) {
                        if (n as char).is_ascii_lowercase() && !matches!(n, b'c' | b'o') {
                            symbol.push(n as char);
                        }
                    }
                }
                return Err(SmilesError::UnsupportedElement { symbol, pos: i });
            }
            _ => return Err(perr(i, format!("unexpected character '{c}'"))),
        }
        i += 1;
    }
    if let Some((_, pos)) = pending {
        return Err(perr(pos, "dangling bond symbol at end of input"));
    }
    if let Some(&(_, _, pos)) = branches.last() {
        return Err(perr(pos, "unmatched '('"));
    }
    if let Some((_, _, pos)) = rings.iter().flatten().next() {
        return Err(perr(*pos, "unclosed ring"));
    }
    if atoms.is_empty() {
        return Err(perr(0, "no atoms"));
    }

    let orders = kekulize(&atoms, &bonds).ok_or_else(|| perr(0, "aromatic system cannot be kekulized"))?;
    let elements: Vec<Element> = atoms.iter().map(|a| a.element).collect();
    let graph_bonds: Vec<Bond> = bonds
        .iter()
        .zip(&orders)
        .map(|(b, &o)| Bond::new(b.u, b.v, o))
        .collect();
    let g = MolecularGraph::from_parts_unchecked(elements, graph_bonds);
    match validate(&g) {
        Verdict::Ok => Ok(g),
        Verdict::ValenceViolation {
            atom,
            bond_order_sum,
        } => Err(SmilesError::Valence {
            atom,
            element: g.atoms()[atom],
            bond_order_sum,
        }),
        other => Err(perr(0, format!("invalid graph: {other:?}"))),
    }
}

/// Assigns orders to aromatic bonds so that every aromatic carbon without an
/// explicit double bond receives exactly one double bond. Aromatic oxygen
/// takes none.
fn kekulize(atoms: &[RawAtom], bonds: &[RawBond]) -> Option<Vec<u8>> {
    let mut orders: Vec<u8> = bonds
        .iter()
        .map(|b| match b.sym {
            BondSym::Single | BondSym::Aromatic => 1,
            BondSym::Double => 2,
            BondSym::Triple => 3,
        })
        .collect();
    let n = atoms.len();
    let mut needs = vec![false; n];
    for (i, a) in atoms.iter().enumerate() {
        if a.aromatic && a.element == Element::C {
            needs[i] = !bonds
                .iter()
                .any(|b| (b.u == i || b.v == i) && matches!(b.sym, BondSym::Double | BondSym::Triple));
        }
    }
    let candidate: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| {
            bonds
                .iter()
                .enumerate()
                .filter(|(_, b)| b.sym == BondSym::Aromatic && (b.u == i || b.v == i))
                .map(|(bi, b)| (bi, if b.u == i { b.v } else { b.u }))
                .collect()
        })
        .collect();

    fn solve(needs: &mut [bool], candidate: &[Vec<(usize, usize)>], orders: &mut [u8]) -> bool {
        let Some(a) = needs.iter().position(|&x| x) else {
            return true;
        };
        needs[a] = false;
        for &(bi, nb) in &candidate[a] {
            if needs[nb] {
                needs[nb] = false;
                orders[bi] = 2;
                if solve(needs, candidate, orders) {
                    return true;
                }
                orders[bi] = 1;
                needs[nb] = true;
            }
        }
        needs[a] = true;
        false
    }

    if solve(&mut needs, &candidate, &mut orders) {
        Some(orders)
    } else {
        None
    }
}

fn bond_symbol(order: u8) -> &'static str {
    match order {
        2 => "=",
        3 => "#",
        _ => "",
    }
}

/// Writes a SMILES string for `g` by depth-first traversal from the atom with
/// the lowest rank, visiting neighbors in ascending rank order.
pub fn write_smiles_ranked(g: &MolecularGraph, rank: &[usize]) -> String {
    let n = g.num_atoms();
    if n == 0 {
        return String::new();
    }
    let mut adj = g.adjacency();
    for list in adj.iter_mut() {
        list.sort_by_key(|&(v, _)| rank[v]);
    }
    let start = (0..n).min_by_key(|&i| rank[i]).unwrap();

    // First pass: spanning tree children and ring-closure partners.
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    let mut ring_partners: Vec<Vec<(usize, u8)>> = vec![Vec::new(); n];
    let mut ring_bonds: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(start, None, 0)];
    visited[start] = true;
    while let Some(&mut (v, parent, ref mut next)) = stack.last_mut() {
        if *next >= adj[v].len() {
            stack.pop();
            continue;
        }
        let (w, order) = adj[v][*next];
        *next += 1;
        if Some(w) == parent {
            continue;
        }
        if !visited[w] {
            visited[w] = true;
            children[v].push((w, order));
            stack.push((w, Some(v), 0));
        } else if ring_bonds.insert((v.min(w), v.max(w))) {
            ring_partners[v].push((w, order));
            ring_partners[w].push((v, order));
        }
    }

    // Second pass: emission with lowest-free-digit ring labels.
    let mut out = String::new();
    let mut emitted = vec![false; n];
    let mut open_digit: Vec<Option<(usize, usize)>> = vec![None; 10];
    let mut digit_in_use = [false; 10];
    enum Step {
        Atom(usize, u8),
        Text(&'static str),
    }
    let mut work = vec![Step::Atom(start, 1)];
    while let Some(step) = work.pop() {
        let (v, order) = match step {
            Step::Text(t) => {
                out.push_str(t);
                continue;
            }
            Step::Atom(v, o) => (v, o),
        };
        out.push_str(bond_symbol(order));
        out.push_str(g.atoms()[v].symbol());
        emitted[v] = true;
        let mut partners = ring_partners[v].clone();
        partners.sort_by_key(|&(w, _)| (!emitted[w], rank[w]));
        for (w, o) in partners {
            if emitted[w] {
                let d = (1..10)
                    .find(|&d| open_digit[d] == Some((w, v)))
                    .expect("ring opened before closing");
                open_digit[d] = None;
                digit_in_use[d] = false;
                out.push_str(bond_symbol(o));
                out.push_str(&d.to_string());
            } else {
                let d = (1..10)
                    .find(|&d| !digit_in_use[d])
                    .expect("more than nine concurrently open rings");
                digit_in_use[d] = true;
                open_digit[d] = Some((v, w));
                out.push_str(bond_symbol(o));
                out.push_str(&d.to_string());
            }
        }
        let kids = &children[v];
        // Pushed in reverse so the first child is emitted first.
        for (k, &(c, o)) in kids.iter().enumerate().rev() {
            if k + 1 == kids.len() {
                work.push(Step::Atom(c, o));
            } else {
                work.push(Step::Text(")"));
                work.push(Step::Atom(c, o));
                work.push(Step::Text("("));
            }
        }
    }
    out
}

/// Writes `g` in atom-index order (not canonical).
pub fn write_smiles(g: &MolecularGraph) -> String {
    let rank: Vec<usize> = (0..g.num_atoms()).collect();
    write_smiles_ranked(g, &rank)
}

/// Deterministic canonical SMILES: equal for two graphs iff they are isomorphic.
pub fn canonical_smiles(g: &MolecularGraph) -> String {
    let n = g.num_atoms();
    if n == 0 {
        return String::new();
    }
    let adj = g.adjacency();
    let keys: Vec<(Element, usize, u8, usize, usize)> = (0..n)
        .map(|i| {
            let doubles = adj[i].iter().filter(|&&(_, o)| o == 2).count();
            let triples = adj[i].iter().filter(|&&(_, o)| o == 3).count();
            let sum: u8 = adj[i].iter().map(|&(_, o)| o).sum();
            (g.atoms()[i], adj[i].len(), sum, doubles, triples)
        })
        .collect();
    let ranks = refine(&adj, dense_ranks(&keys));
    let mut best: Option<String> = None;
    search(g, &adj, ranks, &mut best);
    best.unwrap()
}

fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).unwrap())
        .collect()
}

fn class_count(ranks: &[usize]) -> usize {
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r.dedup();
    r.len()
}

fn refine(adj: &[Vec<(usize, u8)>], mut ranks: Vec<usize>) -> Vec<usize> {
    let mut classes = class_count(&ranks);
    loop {
        let keys: Vec<(usize, Vec<(usize, u8)>)> = adj
            .iter()
            .enumerate()
            .map(|(i, nbrs)| {
                let mut nk: Vec<(usize, u8)> = nbrs.iter().map(|&(v, o)| (ranks[v], o)).collect();
                nk.sort_unstable();
                (ranks[i], nk)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = class_count(&next);
        if next_classes == classes {
            return ranks;
        }
        ranks = next;
        classes = next_classes;
    }
}

fn search(g: &MolecularGraph, adj: &[Vec<(usize, u8)>], ranks: Vec<usize>, best: &mut Option<String>) {
    let n = ranks.len();
    if class_count(&ranks) == n {
        let s = write_smiles_ranked(g, &ranks);
        if best.as_ref().is_none_or(|b| s < *b) {
            *best = Some(s);
        }
        return;
    }
    let mut sizes = vec![0usize; n];
    for &r in &ranks {
        sizes[r] += 1;
    }
    let tied = (0..n).find(|&r| sizes[r] > 1).unwrap();
    for a in (0..n).filter(|&i| ranks[i] == tied) {
        let keys: Vec<(usize, bool)> = (0..n).map(|i| (ranks[i], i != a)).collect();
        let split = refine(adj, dense_ranks(&keys));
        search(g, adj, split, best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::is_isomorphic;

    #[test]
    fn ethane() {
        let g = parse_smiles("CC").unwrap();
        assert_eq!(g.num_atoms(), 2);
        assert_eq!(g.bonds(), &[Bond::new(0, 1, 1)]);
        assert_eq!(g.total_h(), 6);
    }

    #[test]
    fn mtbe_graph() {
        let g = parse_smiles("COC(C)(C)C").unwrap();
        assert_eq!(g.count(Element::C), 5);
        assert_eq!(g.count(Element::O), 1);
        assert_eq!(g.num_bonds(), 5);
        assert_eq!(g.ring_count(), 0);
    }

    #[test]
    fn cyclopropane_triangle() {
        let g = parse_smiles("C1CC1").unwrap();
        assert_eq!(g.num_atoms(), 3);
        assert_eq!(g.num_bonds(), 3);
        assert_eq!(g.ring_count(), 1);
        assert_eq!(g.total_h(), 6);
        assert!((0..3).all(|i| g.degree(i) == 2));
    }

    #[test]
    fn over_valent_oxygen_rejected() {
        let err = parse_smiles("CO=C").unwrap_err();
        assert!(matches!(err, SmilesError::Valence { atom: 1, .. }), "{err:?}");
    }

    #[test]
    fn syntax_errors() {
        for s in ["", "C(", "C)", "C1CC", "C=", "=C", "C()C", "C==C", "C11", "C.C", "CC%10CC%10", "[CH4]"] {
            assert!(
                matches!(parse_smiles(s), Err(SmilesError::Parse { .. })),
                "{s:?} -> {:?}",
                parse_smiles(s)
            );
        }
        assert!(matches!(
            parse_smiles("CN"),
            Err(SmilesError::UnsupportedElement { .. })
        ));
        assert!(matches!(
            parse_smiles("CCl"),
            Err(SmilesError::UnsupportedElement { .. })
        ));
        assert!(matches!(
            parse_smiles("C=1CC=1C"),
            Ok(_)
        ));
        assert!(matches!(parse_smiles("C=1CC#1"), Err(SmilesError::Parse { .. })));
    }

    #[test]
    fn aromatic_ring_kekulized() {
        let g = parse_smiles("c1ccccc1").unwrap();
        let doubles = g.bonds().iter().filter(|b| b.order == 2).count();
        assert_eq!(doubles, 3);
        assert_eq!(g.total_h(), 6);
        let tol = parse_smiles("CCc1cccc(C)c1").unwrap();
        assert_eq!(tol.num_atoms(), 9);
        assert_eq!(tol.bonds().iter().filter(|b| b.order == 2).count(), 3);
        assert!(parse_smiles("c1cccc1").is_err());
    }

    #[test]
    fn methane_fixed_point() {
        assert_eq!(canonical_smiles(&parse_smiles("C").unwrap()), "C");
    }

    #[test]
    fn ethanol_relabeling() {
        let a = canonical_smiles(&parse_smiles("OCC").unwrap());
        let b = canonical_smiles(&parse_smiles("CCO").unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_round_trip() {
        for s in ["COC(C)(C)C", "C1CC1", "CC(C=O)C(C)(C)C", "C1=CC=CC=C1", "C12CC1C2", "COC(C)(C)OC"] {
            let g = parse_smiles(s).unwrap();
            let c = canonical_smiles(&g);
            let back = parse_smiles(&c).unwrap();
            assert!(is_isomorphic(&g, &back), "{s} -> {c}");
            assert_eq!(canonical_smiles(&back), c);
        }
    }

    #[test]
    fn non_isomorphic_graphs_differ() {
        let a = canonical_smiles(&parse_smiles("CCCC").unwrap());
        let b = canonical_smiles(&parse_smiles("CC(C)C").unwrap());
        assert_ne!(a, b);
        let c = canonical_smiles(&parse_smiles("C=CC").unwrap());
        let d = canonical_smiles(&parse_smiles("C1CC1").unwrap());
        assert_ne!(c, d);
    }

    #[test]
    fn writer_reuses_ring_digits() {
        let g = parse_smiles("C1CC1C1CC1").unwrap();
        let s = write_smiles(&g);
        assert!(is_isomorphic(&g, &parse_smiles(&s).unwrap()), "{s}");
    }
}
