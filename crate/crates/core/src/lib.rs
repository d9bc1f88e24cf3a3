//! Simulation and diagnostics for propagation of chaos in mean-field
//! two-layer networks whose first-layer weights live on the unit sphere.

mod error;
mod linalg;
mod rng;

pub mod coupling;
pub mod data;
pub mod diagnostics;
pub mod dynamics;
pub mod io;
pub mod kernels;
pub mod potential;
pub mod reduced;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    pub mod kernels {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    pub mod dynamics {}
    #[doc = include_str!("../../../book/src/coupling.md")]
    pub mod coupling {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    pub mod diagnostics {}
    #[doc = include_str!("../../../book/src/reduced.md")]
    pub mod reduced {}
    #[doc = include_str!("../../../book/src/potential.md")]
    pub mod potential {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
