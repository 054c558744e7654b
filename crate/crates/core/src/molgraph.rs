//! Hydrogen-suppressed molecular graphs over the H/C/O element set.
//!
//! Atoms carry only their element; hydrogens are implicit and derived from the
//! remaining valence. Bonds are stored once per atom pair with `u < v`.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Heavy-atom element. Hydrogen is never a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    C,
    O,
}

impl Element {
    pub fn max_valence(self) -> u8 {
        match self {
            Element::C => 4,
            Element::O => 2,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::C => "C",
            Element::O => "O",
        }
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Undirected bond between atoms `u` and `v` with order 1, 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub u: usize,
    pub v: usize,
    pub order: u8,
}

impl Bond {
    /// Builds a bond with endpoints sorted so that `u <= v`.
    pub fn new(a: usize, b: usize, order: u8) -> Self {
        Bond {
            u: a.min(b),
            v: a.max(b),
            order,
        }
    }
}

/// Result of [`validate`]: `Ok` or the first violated invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Empty,
    BondOutOfRange { bond: usize },
    SelfLoop { atom: usize },
    UnorderedBond { bond: usize },
    InvalidBondOrder { bond: usize, order: u8 },
    DuplicateBond { u: usize, v: usize },
    ValenceViolation { atom: usize, bond_order_sum: u8 },
    Disconnected { atom: usize },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid molecular graph: {0:?}")]
pub struct InvalidGraph(pub Verdict);

/// Undirected labeled graph of heavy atoms.
///
/// Graphs built with [`MolecularGraph::new`] are guaranteed valid.
/// [`MolecularGraph::from_parts_unchecked`] exists so that invalid inputs can be
/// represented and passed to [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MolecularGraph {
    atoms: Vec<Element>,
    bonds: Vec<Bond>,
}

impl MolecularGraph {
    pub fn new(atoms: Vec<Element>, bonds: Vec<Bond>) -> Result<Self, InvalidGraph> {
        let g = Self::from_parts_unchecked(atoms, bonds);
        match validate(&g) {
            Verdict::Ok => Ok(g),
            v => Err(InvalidGraph(v)),
        }
    }

    pub fn from_parts_unchecked(atoms: Vec<Element>, bonds: Vec<Bond>) -> Self {
        MolecularGraph { atoms, bonds }
    }

    pub fn atoms(&self) -> &[Element] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn count(&self, element: Element) -> usize {
        self.atoms.iter().filter(|&&e| e == element).count()
    }

    /// Neighbor lists `(neighbor, bond order)` in bond insertion order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            if b.u < self.atoms.len() && b.v < self.atoms.len() {
                adj[b.u].push((b.v, b.order));
                adj[b.v].push((b.u, b.order));
            }
        }
        adj
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.u == atom || b.v == atom)
            .count()
    }

    pub fn bond_order_sum(&self, atom: usize) -> u8 {
        self.bonds
            .iter()
            .filter(|b| b.u == atom || b.v == atom)
            .map(|b| b.order)
            .sum()
    }

    /// Free valence of `atom`, i.e. its implicit hydrogen count.
    pub fn implicit_h(&self, atom: usize) -> u8 {
        self.atoms[atom]
            .max_valence()
            .saturating_sub(self.bond_order_sum(atom))
    }

    pub fn total_h(&self) -> usize {
        (0..self.atoms.len()).map(|i| self.implicit_h(i) as usize).sum()
    }

    /// Cyclomatic number `|E| - |V| + 1` (valid graphs are connected).
    pub fn ring_count(&self) -> usize {
        (self.bonds.len() + 1).saturating_sub(self.atoms.len())
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<u8> {
        let (u, v) = (a.min(b), a.max(b));
        self.bonds
            .iter()
            .find(|bd| bd.u == u && bd.v == v)
            .map(|bd| bd.order)
    }

    /// Node input features `[is_C, is_O, implicit H, degree]`.
    pub fn atom_features(&self) -> Vec<[f64; ATOM_FEATURE_DIM]> {
        let adj = self.adjacency();
        self.atoms
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let bond_sum: u8 = adj[i].iter().map(|&(_, o)| o).sum();
                let h = e.max_valence().saturating_sub(bond_sum);
                [
                    (e == Element::C) as u8 as f64,
                    (e == Element::O) as u8 as f64,
                    h as f64,
                    adj[i].len() as f64,
                ]
            })
            .collect()
    }

    /// Relabels atoms so that old atom `i` becomes new atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length");
        let mut atoms = vec![Element::C; self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old];
        }
        let mut bonds: Vec<Bond> = self
            .bonds
            .iter()
            .map(|b| Bond::new(perm[b.u], perm[b.v], b.order))
            .collect();
        bonds.sort();
        MolecularGraph { atoms, bonds }
    }

    /// Appends `other` and bonds `self_atom` to `other_atom` with `order`.
    /// The result is not validated.
    pub(crate) fn attach(&self, self_atom: usize, other: &MolecularGraph, other_atom: usize, order: u8) -> Self {
        let offset = self.atoms.len();
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        let mut bonds = self.bonds.clone();
        bonds.extend(
            other
                .bonds
                .iter()
                .map(|b| Bond::new(b.u + offset, b.v + offset, b.order)),
        );
        bonds.push(Bond::new(self_atom, other_atom + offset, order));
        MolecularGraph { atoms, bonds }
    }
}

/// Dimension of the per-atom feature vector fed to the GNN.
pub const ATOM_FEATURE_DIM: usize = 4;

/// Checks every graph invariant in a fixed order and returns the first failure.
pub fn validate(g: &MolecularGraph) -> Verdict {
    let n = g.atoms.len();
    if n == 0 {
        return Verdict::Empty;
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, b) in g.bonds.iter().enumerate() {
        if b.u >= n || b.v >= n {
            return Verdict::BondOutOfRange { bond: i };
        }
        if b.u == b.v {
            return Verdict::SelfLoop { atom: b.u };
        }
        if b.u > b.v {
            return Verdict::UnorderedBond { bond: i };
        }
        if !(1..=3).contains(&b.order) {
            return Verdict::InvalidBondOrder { bond: i, order: b.order };
        }
        if !seen.insert((b.u, b.v)) {
            return Verdict::DuplicateBond { u: b.u, v: b.v };
        }
    }
    let mut sums = vec![0u8; n];
    for b in &g.bonds {
        sums[b.u] += b.order;
        sums[b.v] += b.order;
    }
    for (i, (&e, &s)) in g.atoms.iter().zip(&sums).enumerate() {
        if s > e.max_valence() {
            return Verdict::ValenceViolation {
                atom: i,
                bond_order_sum: s,
            };
        }
    }
    let adj = g.adjacency();
    let mut reached = vec![false; n];
    let mut stack = vec![0];
    reached[0] = true;
    while let Some(a) = stack.pop() {
        for &(b, _) in &adj[a] {
            if !reached[b] {
                reached[b] = true;
                stack.push(b);
            }
        }
    }
    if let Some(i) = reached.iter().position(|r| !r) {
        return Verdict::Disconnected { atom: i };
    }
    Verdict::Ok
}

/// Backtracking isomorphism test on element labels and bond orders.
///
/// Independent of canonicalization; used as the reference when checking
/// canonical strings and encoder round trips.
pub fn is_isomorphic(a: &MolecularGraph, b: &MolecularGraph) -> bool {
    let n = a.num_atoms();
    if n != b.num_atoms() || a.num_bonds() != b.num_bonds() {
        return false;
    }
    let adj_a = a.adjacency();
    let adj_b = b.adjacency();
    let signature = |g: &MolecularGraph, adj: &[Vec<(usize, u8)>], i: usize| {
        let mut orders: Vec<u8> = adj[i].iter().map(|&(_, o)| o).collect();
        orders.sort_unstable();
        (g.atoms[i], orders)
    };
    let sig_a: Vec<_> = (0..n).map(|i| signature(a, &adj_a, i)).collect();
    let sig_b: Vec<_> = (0..n).map(|i| signature(b, &adj_b, i)).collect();
    let mut sa = sig_a.clone();
    let mut sb = sig_b.clone();
    sa.sort();
    sb.sort();
    if sa != sb {
        return false;
    }

    // Visit atoms of `a` in BFS order so every atom after the first has an
    // already-mapped neighbor, which prunes the search early.
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    for start in 0..n {
        if placed[start] {
            continue;
        }
        placed[start] = true;
        order.push(start);
        let mut head = order.len() - 1;
        while head < order.len() {
            let x = order[head];
            head += 1;
            for &(y, _) in &adj_a[x] {
                if !placed[y] {
                    placed[y] = true;
                    order.push(y);
                }
            }
        }
    }

    fn extend(
        depth: usize,
        order: &[usize],
        map: &mut [Option<usize>],
        used: &mut [bool],
        adj_a: &[Vec<(usize, u8)>],
        b: &MolecularGraph,
        sig_a: &[(Element, Vec<u8>)],
        sig_b: &[(Element, Vec<u8>)],
    ) -> bool {
        if depth == order.len() {
            return true;
        }
        let x = order[depth];
        for y in 0..sig_b.len() {
            if used[y] || sig_a[x] != sig_b[y] {
                continue;
            }
            let consistent = adj_a[x].iter().all(|&(nx, o)| match map[nx] {
                Some(ny) => b.bond_between(y, ny) == Some(o),
                None => true,
            });
            if !consistent {
                continue;
            }
            map[x] = Some(y);
            used[y] = true;
            if extend(depth + 1, order, map, used, adj_a, b, sig_a, sig_b) {
                return true;
            }
            map[x] = None;
            used[y] = false;
        }
        false
    }

    let mut map = vec![None; n];
    let mut used = vec![false; n];
    extend(0, &order, &mut map, &mut used, &adj_a, b, &sig_a, &sig_b)
}
