//! Generalized multiscale finite elements for uncertainty quantification in
//! single-phase flow.
//!
//! A log-normal permeability, parametrized by a truncated Karhunen-Loève
//! expansion, feeds a hierarchy of multiscale solvers. The hierarchy drives
//! multilevel Monte Carlo for prior means and a multilevel screened
//! Metropolis-Hastings chain for posterior sampling.

pub mod error;
pub mod estimators;
pub mod exec;
pub mod fem;
pub mod gmsfem;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod randfield;
pub mod rng;
pub mod samplers;
pub mod toy;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/random-fields.md")]
    mod random_fields {}
    #[doc = include_str!("../../../book/src/fine-scale.md")]
    mod fine_scale {}
    #[doc = include_str!("../../../book/src/multiscale.md")]
    mod multiscale {}
    #[doc = include_str!("../../../book/src/mlmc.md")]
    mod mlmc {}
    #[doc = include_str!("../../../book/src/mcmc.md")]
    mod mcmc {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
