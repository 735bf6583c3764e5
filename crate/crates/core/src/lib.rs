//! Order-by-order engine for renormalized Lindstedt expansions of
//! small-amplitude periodic solutions of the nonlocally smoothed cubic
//! Schrodinger equation on [0,pi]^D with Dirichlet boundary conditions.
//!
//! Layout:
//! - [`lattice`]: sphere enumeration, cluster partitions, near-resonant index sets
//! - [`smalldiv`]: divisors, cutoff partitions of unity, Diophantine checkers, sweeps
//! - [`blocks`]: symmetric block matrices, norms, propagators, Schur decompositions
//! - [`trees`]: labelled-tree expansion, resonances, counterterms, scale-count bounds
//! - [`series`]: recursive coefficient solver, Q equation, compatibility fixpoint, residuals
//! - [`bifurcation`]: resonant-case wave packets, amplitudes, the linearized Q matrix

pub mod arith;
pub mod error;
pub mod bifurcation;
pub mod blocks;
pub mod series;
pub mod trees;
pub mod lattice;
pub mod smalldiv;

pub use arith::{int_pow, Mat, Scalar};
pub use error::{Error, Result};
pub use smalldiv::{ChiVariant, CutoffProfile, CutoffSpec, Expo, FrequencyContext};

/// Rational scalar used by the exact mode.
pub type Rat = num::rational::BigRational;
