//! Simulation and verification toolkit for conditional McKean-Vlasov SDEs
//! with jumps under Markovian regime switching.
//!
//! The crate is organised bottom-up:
//!
//! - [`ctmc`]: the finite-state switching chain (generator validation,
//!   invariant law, uniformization, ergodicity profiles, Gillespie paths).
//! - [`noise`]: labelled reproducible random streams, Brownian increments
//!   and compound Poisson random measures.
//! - [`measures`]: empirical measures and exact Wasserstein distances.
//! - [`model`]: coefficient triples `(b, sigma, g)`, averaging over the
//!   invariant law, assumption probing and a small gallery of models.
//! - [`simulate`]: Euler scheme, interacting particle systems, coupled
//!   auxiliary systems, averaged systems and the Picard fixed-point solver.
//! - [`experiments`]: rate experiments built from the pieces above.
//! - [`cli`]: config-file driven batch runs with reproducibility manifests.

pub mod cli;
pub mod ctmc;
pub mod experiments;
pub mod measures;
pub mod model;
pub mod noise;
pub mod simulate;
