//! Geometry, finite-element elastodynamics, proper generalized decomposition
//! and Galerkin reduced-order models for the seat-structure family.

pub mod mesh;
pub mod sparse;
pub mod fem;
pub mod field;
pub mod pgd;
pub mod rom;
