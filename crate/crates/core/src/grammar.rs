//! Fragment grammar generator: a total, deterministic map from latent vectors
//! to molecular graphs, with an exact inverse on producible molecules.
//!
//! Latent layout for `slots = D`:
//!
//! * dim 0 selects the scaffold,
//! * for slot `s` in `1..D`, dim `2s-1` selects the fragment (cell 0 is "stop")
//!   and dim `2s` selects the attachment site (an atom index),
//! * the remaining dims are inactive.
//!
//! Every dim is normalized against the grammar's native range and cut into
//! equal-width cells. An attachment that would exceed valence, reference a
//! missing atom or exceed the heavy-atom cap is treated as "stop", and a stop
//! ends the sequence.

use crate::molgraph::{validate, MolecularGraph, Verdict};
use crate::smiles::{canonical_smiles, parse_smiles};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::ops::Deref;
use thiserror::Error;

/// Upper limit on the number of distinct decision sequences `enumerate` visits.
pub const ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("invalid grammar config: {0}")]
    InvalidConfig(String),
    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("molecule is not expressible by the grammar")]
    NotExpressible,
    #[error("decision space of {size} sequences exceeds the enumeration cap {cap}")]
    TooLarge { size: u64, cap: u64 },
}

/// A point in the continuous design space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(pub Vec<f64>);

impl Deref for LatentVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for LatentVector {
    fn from(v: Vec<f64>) -> Self {
        LatentVector(v)
    }
}

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LatentBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len(), "box bound lengths differ");
        LatentBox { lower, upper }
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        LatentBox::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim()
            && z
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }

    pub fn clamp(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&lo, &hi))| if x.is_nan() { lo } else { x.clamp(lo, hi) })
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentSpec {
    pub name: String,
    /// Fragment graph; atom 0 is the attachment atom.
    pub smiles: String,
    pub attach_order: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaffoldSpec {
    pub name: String,
    pub smiles: String,
}

/// Serializable grammar description. Cell thresholds are equal-width over
/// `[lower, upper]`; the cell counts follow from the library sizes and
/// `site_cells`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub version: u32,
    pub latent_dim: usize,
    pub slots: usize,
    pub site_cells: usize,
    pub lower: f64,
    pub upper: f64,
    pub max_heavy_atoms: usize,
    pub scaffolds: Vec<ScaffoldSpec>,
    pub fragments: Vec<FragmentSpec>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        let frag = |name: &str, smiles: &str, attach_order| FragmentSpec {
            name: name.into(),
            smiles: smiles.into(),
            attach_order,
        };
        let scaf = |name: &str, smiles: &str| ScaffoldSpec {
            name: name.into(),
            smiles: smiles.into(),
        };
        GrammarConfig {
            version: 1,
            latent_dim: 32,
            slots: 4,
            site_cells: 6,
            lower: -1.0,
            upper: 1.0,
            max_heavy_atoms: 9,
            scaffolds: vec![
                scaf("methane", "C"),
                scaf("ethane", "CC"),
                scaf("methanol", "CO"),
                scaf("cyclopropane", "C1CC1"),
                scaf("cyclopentane", "C1CCCC1"),
                scaf("benzene", "C1=CC=CC=C1"),
            ],
            fragments: vec![
                frag("methyl", "C", 1),
                frag("ethyl", "CC", 1),
                frag("hydroxyl", "O", 1),
                frag("methoxy", "OC", 1),
                frag("carbonyl-O", "O", 2),
                frag("formyl", "C=O", 1),
                frag("tert-butyl", "C(C)(C)C", 1),
                frag("cyclopropyl", "C1CC1", 1),
                frag("phenyl", "C1=CC=CC=C1", 1),
            ],
        }
    }
}

/// One attachment step: fragment index and site atom index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Attachment {
    pub fragment: usize,
    pub site: usize,
}

/// Scaffold choice followed by the attachments applied before the first stop.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub scaffold: usize,
    pub attachments: Vec<Attachment>,
}

/// Immutable grammar with parsed fragment and scaffold graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GrammarConfig", into = "GrammarConfig")]
pub struct FragmentGrammar {
    config: GrammarConfig,
    scaffolds: Vec<MolecularGraph>,
    fragments: Vec<MolecularGraph>,
}

impl TryFrom<GrammarConfig> for FragmentGrammar {
    type Error = GrammarError;
    fn try_from(c: GrammarConfig) -> Result<Self, Self::Error> {
        FragmentGrammar::new(c)
    }
}

impl From<FragmentGrammar> for GrammarConfig {
    fn from(g: FragmentGrammar) -> Self {
        g.config
    }
}

impl Default for FragmentGrammar {
    fn default() -> Self {
        FragmentGrammar::new(GrammarConfig::default()).expect("default grammar is valid")
    }
}

impl FragmentGrammar {
    pub fn new(config: GrammarConfig) -> Result<Self, GrammarError> {
        let bad = |m: String| Err(GrammarError::InvalidConfig(m));
        if config.slots == 0 {
            return bad("slots must be at least 1".into());
        }
        if config.latent_dim < 2 * config.slots - 1 {
            return bad(format!(
                "latent_dim {} too small for {} slots (needs {})",
                config.latent_dim,
                config.slots,
                2 * config.slots - 1
            ));
        }
        if config.site_cells == 0 {
            return bad("site_cells must be at least 1".into());
        }
        if !(config.lower.is_finite() && config.upper.is_finite() && config.lower < config.upper) {
            return bad("native range must satisfy lower < upper".into());
        }
        if config.scaffolds.is_empty() {
            return bad("scaffold library is empty".into());
        }
        let mut scaffolds = Vec::new();
        for s in &config.scaffolds {
            let g = parse_smiles(&s.smiles)
                .map_err(|e| GrammarError::InvalidConfig(format!("scaffold {}: {e}", s.name)))?;
            if g.num_atoms() > config.max_heavy_atoms {
                return bad(format!("scaffold {} exceeds the heavy-atom cap", s.name));
            }
            scaffolds.push(g);
        }
        let mut fragments = Vec::new();
        for f in &config.fragments {
            let g = parse_smiles(&f.smiles)
                .map_err(|e| GrammarError::InvalidConfig(format!("fragment {}: {e}", f.name)))?;
            if !(1..=3).contains(&f.attach_order) || g.implicit_h(0) < f.attach_order {
                return bad(format!("fragment {} cannot attach with order {}", f.name, f.attach_order));
            }
            fragments.push(g);
        }
        Ok(FragmentGrammar {
            config,
            scaffolds,
            fragments,
        })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn slots(&self) -> usize {
        self.config.slots
    }

    /// The grammar's own coordinate box, against which cells are defined.
    pub fn native_box(&self) -> LatentBox {
        LatentBox::uniform(self.config.latent_dim, self.config.lower, self.config.upper)
    }

    /// SHA-256 over the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.config).expect("grammar config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn fragment_cells(&self) -> usize {
        self.fragments.len() + 1
    }

    /// Latent dims that influence decoding.
    pub fn active_dims(&self) -> usize {
        2 * self.config.slots - 1
    }

    fn cell_of(&self, x: f64, cells: usize) -> usize {
        let (lo, hi) = (self.config.lower, self.config.upper);
        let t = if x.is_nan() { 0.0 } else { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) };
        ((t * cells as f64).floor() as usize).min(cells - 1)
    }

    fn cell_center(&self, cell: usize, cells: usize) -> f64 {
        let (lo, hi) = (self.config.lower, self.config.upper);
        lo + (cell as f64 + 0.5) / cells as f64 * (hi - lo)
    }

    /// Reads the raw per-slot choices from a latent vector (after clamping
    /// into `bounds`). Attachments are not yet checked for legality.
    pub fn read_cells(&self, z: &[f64], bounds: &LatentBox) -> Result<(usize, Vec<Option<Attachment>>), GrammarError> {
        if z.len() != self.config.latent_dim {
            return Err(GrammarError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: z.len(),
            });
        }
        if bounds.dim() != self.config.latent_dim {
            return Err(GrammarError::DimensionMismatch {
                expected: self.config.latent_dim,
                got: bounds.dim(),
            });
        }
        let z = bounds.clamp(z);
        let scaffold = self.cell_of(z[0], self.scaffolds.len());
        let choices = (1..self.config.slots)
            .map(|s| {
                let f = self.cell_of(z[2 * s - 1], self.fragment_cells());
                let site = self.cell_of(z[2 * s], self.config.site_cells);
                (f > 0).then(|| Attachment {
                    fragment: f - 1,
                    site,
                })
            })
            .collect();
        Ok((scaffold, choices))
    }

    fn try_attach(&self, g: &MolecularGraph, a: Attachment) -> Option<MolecularGraph> {
        let frag = self.fragments.get(a.fragment)?;
        let order = self.config.fragments[a.fragment].attach_order;
        if a.site >= g.num_atoms()
            || g.implicit_h(a.site) < order
            || g.num_atoms() + frag.num_atoms() > self.config.max_heavy_atoms
        {
            return None;
        }
        let next = g.attach(a.site, frag, 0, order);
        debug_assert_eq!(validate(&next), Verdict::Ok);
        Some(next)
    }

    /// Applies a decision sequence, stopping at the first illegal attachment.
    /// Returns the graph and the effective (truncated) decision.
    pub fn build(&self, scaffold: usize, choices: &[Option<Attachment>]) -> (MolecularGraph, Decision) {
        let mut g = self.scaffolds[scaffold].clone();
        let mut applied = Vec::new();
        for &choice in choices.iter().take(self.config.slots - 1) {
            let Some(a) = choice else { break };
            match self.try_attach(&g, a) {
                Some(next) => {
                    g = next;
                    applied.push(a);
                }
                None => break,
            }
        }
        (
            g,
            Decision {
                scaffold,
                attachments: applied,
            },
        )
    }

    /// Decodes a latent vector. Total for every vector of the right length.
    pub fn decode(&self, z: &[f64], bounds: &LatentBox) -> Result<MolecularGraph, GrammarError> {
        let (scaffold, choices) = self.read_cells(z, bounds)?;
        Ok(self.build(scaffold, &choices).0)
    }

    /// Decodes and also reports the effective decision sequence.
    pub fn decode_decision(&self, z: &[f64], bounds: &LatentBox) -> Result<(MolecularGraph, Decision), GrammarError> {
        let (scaffold, choices) = self.read_cells(z, bounds)?;
        Ok(self.build(scaffold, &choices))
    }

    /// Cell-center latent vector for a decision; inactive dims sit at the
    /// center of the native range.
    pub fn decision_to_latent(&self, d: &Decision) -> LatentVector {
        let mid = 0.5 * (self.config.lower + self.config.upper);
        let mut z = vec![mid; self.config.latent_dim];
        z[0] = self.cell_center(d.scaffold, self.scaffolds.len());
        for s in 1..self.config.slots {
            let (f, site) = match d.attachments.get(s - 1) {
                Some(a) => (a.fragment + 1, a.site),
                None => (0, 0),
            };
            z[2 * s - 1] = self.cell_center(f, self.fragment_cells());
            z[2 * s] = self.cell_center(site, self.config.site_cells);
        }
        LatentVector(z)
    }

    /// Smallest decision sequence (in cell order) that produces a graph
    /// isomorphic to `g`, or `NotExpressible`.
    pub fn encode_decision(&self, g: &MolecularGraph) -> Result<Decision, GrammarError> {
        if g.num_atoms() > self.config.max_heavy_atoms {
            return Err(GrammarError::NotExpressible);
        }
        let target = Counts::of(g);
        let target_smiles = canonical_smiles(g);
        for (si, scaffold) in self.scaffolds.iter().enumerate() {
            let mut path = Vec::new();
            if self.encode_search(scaffold, &target, &target_smiles, &mut path) {
                return Ok(Decision {
                    scaffold: si,
                    attachments: path,
                });
            }
        }
        Err(GrammarError::NotExpressible)
    }

    fn encode_search(&self, g: &MolecularGraph, target: &Counts, target_smiles: &str, path: &mut Vec<Attachment>) -> bool {
        let here = Counts::of(g);
        if !here.fits_within(target) {
            return false;
        }
        if here == *target && canonical_smiles(g) == target_smiles {
            return true;
        }
        if path.len() + 1 >= self.config.slots {
            return false;
        }
        for fragment in 0..self.fragments.len() {
            for site in 0..self.config.site_cells {
                let a = Attachment { fragment, site };
                if let Some(next) = self.try_attach(g, a) {
                    path.push(a);
                    if self.encode_search(&next, target, target_smiles, path) {
                        return true;
                    }
                    path.pop();
                }
            }
        }
        false
    }

    /// Encodes to the center of the smallest producing cell.
    pub fn encode(&self, g: &MolecularGraph) -> Result<LatentVector, GrammarError> {
        self.encode_decision(g).map(|d| self.decision_to_latent(&d))
    }

    /// Number of distinct decision sequences (a stop ends a sequence).
    pub fn decision_space_size(&self) -> u64 {
        let per_slot = (self.fragments.len() * self.config.site_cells) as u64;
        let mut tail: u64 = 1;
        for _ in 1..self.config.slots {
            tail = tail.saturating_mul(per_slot).saturating_add(1);
        }
        tail.saturating_mul(self.scaffolds.len() as u64)
    }

    /// Every distinct molecule the grammar produces, keyed by canonical SMILES,
    /// each with its smallest producing decision.
    pub fn enumerate(&self) -> Result<BTreeMap<String, (MolecularGraph, Decision)>, GrammarError> {
        let size = self.decision_space_size();
        if size > ENUMERATION_CAP {
            return Err(GrammarError::TooLarge {
                size,
                cap: ENUMERATION_CAP,
            });
        }
        // Roots: each scaffold alone, then each legal first attachment. Work
        // items are processed in parallel and merged in decision order.
        let mut roots: Vec<(MolecularGraph, Decision)> = Vec::new();
        for si in 0..self.scaffolds.len() {
            let g = self.scaffolds[si].clone();
            roots.push((
                g.clone(),
                Decision {
                    scaffold: si,
                    attachments: vec![],
                },
            ));
            if self.config.slots > 1 {
                for fragment in 0..self.fragments.len() {
                    for site in 0..self.config.site_cells {
                        let a = Attachment { fragment, site };
                        if let Some(next) = self.try_attach(&g, a) {
                            roots.push((
                                next,
                                Decision {
                                    scaffold: si,
                                    attachments: vec![a],
                                },
                            ));
                        }
                    }
                }
            }
        }
        let parts: Vec<Vec<(String, MolecularGraph, Decision)>> = roots
            .into_par_iter()
            .map(|(g, d)| {
                let mut out = Vec::new();
                // Scaffold-only roots are leaves; attachment roots expand.
                if !d.attachments.is_empty() {
                    let mut path = d.attachments.clone();
                    self.enumerate_from(&g, d.scaffold, &mut path, &mut out);
                } else {
                    out.push((canonical_smiles(&g), g, d));
                }
                out
            })
            .collect();
        let mut all = BTreeMap::new();
        for (smiles, g, d) in parts.into_iter().flatten() {
            all.entry(smiles).or_insert((g, d));
        }
        Ok(all)
    }

    fn enumerate_from(
        &self,
        g: &MolecularGraph,
        scaffold: usize,
        path: &mut Vec<Attachment>,
        out: &mut Vec<(String, MolecularGraph, Decision)>,
    ) {
        out.push((
            canonical_smiles(g),
            g.clone(),
            Decision {
                scaffold,
                attachments: path.clone(),
            },
        ));
        if path.len() + 1 >= self.config.slots {
            return;
        }
        for fragment in 0..self.fragments.len() {
            for site in 0..self.config.site_cells {
                let a = Attachment { fragment, site };
                if let Some(next) = self.try_attach(g, a) {
                    path.push(a);
                    self.enumerate_from(&next, scaffold, path, out);
                    path.pop();
                }
            }
        }
    }
}

/// Monotone size counters: every attachment can only increase them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Counts {
    carbons: usize,
    oxygens: usize,
    by_order: [usize; 3],
    rings: usize,
}

impl Counts {
    fn of(g: &MolecularGraph) -> Self {
        let mut by_order = [0; 3];
        for b in g.bonds() {
            by_order[(b.order - 1) as usize] += 1;
        }
        Counts {
            carbons: g.count(crate::molgraph::Element::C),
            oxygens: g.count(crate::molgraph::Element::O),
            by_order,
            rings: g.ring_count(),
        }
    }

    fn fits_within(&self, t: &Counts) -> bool {
        self.carbons <= t.carbons
            && self.oxygens <= t.oxygens
            && self.rings <= t.rings
            && self.by_order.iter().zip(&t.by_order).all(|(a, b)| a <= b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::is_isomorphic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grammar() -> FragmentGrammar {
        FragmentGrammar::default()
    }

    #[test]
    fn lower_corner_decodes_to_methane() {
        let g = grammar();
        let b = g.native_box();
        let m = g.decode(&b.lower, &b).unwrap();
        assert_eq!(canonical_smiles(&m), "C");
    }

    #[test]
    fn methane_encodes_to_cell_zero_centers() {
        let g = grammar();
        let z = g.encode(&parse_smiles("C").unwrap()).unwrap();
        assert!((z[0] - (-1.0 + 1.0 / 6.0)).abs() < 1e-15);
        assert!((z[1] - (-1.0 + 1.0 / 10.0)).abs() < 1e-15);
        assert!((z[2] - (-1.0 + 1.0 / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn same_cell_same_molecule() {
        let g = grammar();
        let b = g.native_box();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let z: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = g.decode_decision(&z, &b).unwrap().1;
            let mut w = g.decision_to_latent(&d).0;
            // Inactive dims and positions within a cell must not matter.
            for x in w.iter_mut().skip(g.active_dims()) {
                *x = rng.random_range(-1.0..1.0);
            }
            assert_eq!(
                canonical_smiles(&g.decode(&z, &b).unwrap()),
                canonical_smiles(&g.decode(&w, &b).unwrap())
            );
        }
    }

    #[test]
    fn out_of_range_and_non_finite_inputs() {
        let g = grammar();
        let b = g.native_box();
        for v in [f64::INFINITY, f64::NEG_INFINITY, f64::NAN, 1e300, -1e300] {
            let m = g.decode(&vec![v; 32], &b).unwrap();
            assert!(validate(&m).is_ok());
        }
        assert!(matches!(
            g.decode(&[0.0; 3], &b),
            Err(GrammarError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ten_heavy_atoms_not_expressible() {
        let g = grammar();
        let m = parse_smiles("CCCCCCCCCC").unwrap();
        assert_eq!(g.encode(&m), Err(GrammarError::NotExpressible));
    }

    #[test]
    fn table_molecules_expressible() {
        let g = grammar();
        for s in ["COC(C)(C)C", "C1CC1", "CC", "CCc1cccc(C)c1", "CC(C)(C)C=O", "COC(C)C=O"] {
            let m = parse_smiles(s).unwrap();
            let z = g.encode(&m).unwrap_or_else(|e| panic!("{s}: {e}"));
            let back = g.decode(&z, &g.native_box()).unwrap();
            assert!(is_isomorphic(&m, &back), "{s}");
        }
    }

    #[test]
    fn forced_stop_grammar_enumerates_methane_only() {
        let mut c = GrammarConfig::default();
        c.scaffolds.truncate(1);
        c.fragments.clear();
        let g = FragmentGrammar::new(c).unwrap();
        let all = g.enumerate().unwrap();
        assert_eq!(all.keys().cloned().collect::<Vec<_>>(), vec!["C".to_string()]);
    }

    #[test]
    fn oversized_grammar_refused() {
        let c = GrammarConfig {
            slots: 5,
            ..GrammarConfig::default()
        };
        let g = FragmentGrammar::new(c).unwrap();
        assert!(matches!(g.enumerate(), Err(GrammarError::TooLarge { .. })));
    }

    #[test]
    fn config_round_trips_through_json() {
        let g = grammar();
        let json = serde_json::to_string(&g).unwrap();
        let back: FragmentGrammar = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.hash(), g.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let c = GrammarConfig {
            latent_dim: 4,
            ..GrammarConfig::default()
        };
        assert!(FragmentGrammar::new(c).is_err());
        let mut c = GrammarConfig::default();
        c.fragments[0].attach_order = 3;
        c.fragments[0].smiles = "O".into();
        assert!(FragmentGrammar::new(c).is_err());
    }
}
