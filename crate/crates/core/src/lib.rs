//! Construction and verification of small-amplitude time-periodic solutions
//! of NLS/NLW/NLB-class equations on truncated Fourier lattices.
//!
//! The crate is organized around the pipeline: linear spectrum and mode
//! classification ([`lattice`]), near-resonant clusters ([`clusters`]), the
//! bifurcation equation at the degenerate modes with exact algebraic
//! arithmetic ([`bifurcation`], [`algebra`]), small-divisor propagators
//! ([`multiscale`]), the order-by-order solver with counterterms and a direct
//! Newton oracle ([`series`]), and the diagrammatic tree expansion that
//! double-checks it ([`trees`]). [`verify`] packages the cross-checks used by
//! the CLI and the acceptance suite.

pub mod algebra;
pub mod bifurcation;
pub mod clusters;
pub mod lattice;
pub mod multiscale;
pub mod series;
pub mod trees;
pub mod verify;

pub use lattice::{Boundary, EquationFamily, EquationSpec, ModeVector, SetLabel};
