//! Simulation and verification toolkit for approximately ultrametric random measures.
//!
//! The crate samples Ruelle probability cascades and small exact spin-glass Gibbs
//! measures, extracts hierarchical cluster decompositions from them, and runs
//! statistical checks of the replica identities and quantitative bounds that
//! govern such measures.
//!
//! Module map:
//! - [`trees`]: vertex algebra on rooted trees, shaped subtrees, standard order
//! - [`measure`]: the finite atomic measure abstraction shared by all sources
//! - [`cascades`]: Poisson-Dirichlet and cascade samplers, ROSt embeddings, overlap trees
//! - [`spinglass`]: REM / GREM / mixed p-spin models with exact Gibbs weights
//! - [`clustering`]: ball families, exhaustion search, cleaning, cluster statistics
//! - [`diagnostics`]: Ghirlanda-Guerra, ultrametricity, Talagrand and moment tests
//! - [`rates`]: closed-form constants, tail bounds and the quantitative rate chain

pub mod cascades;
pub mod clustering;
pub mod diagnostics;
pub mod measure;
pub mod numeric;
pub mod rates;
pub mod spinglass;
pub mod trees;
