//! Computer-aided molecular design over a continuous latent space.
//!
//! The design loop proposes latent vectors with a black-box optimizer, decodes
//! them into H/C/O molecular graphs with a fragment grammar, screens them with
//! an applicability domain built from one-class SVMs, and scores them with a
//! multi-task GNN ensemble (RON + OS = 2·RON − MON).

pub mod ad;
pub mod design_loop;
pub mod gnn;
pub mod grammar;
pub mod io;
pub mod molgraph;
pub mod optimizer;
pub mod smiles;

pub use molgraph::{is_isomorphic, validate, Bond, Element, MolecularGraph, Verdict};
pub use smiles::{canonical_smiles, parse_smiles, write_smiles, SmilesError};
