//! Localized orthogonal decomposition for nonmonotone quasilinear elliptic
//! problems `-div(α(x, u)∇u) = f` on the unit square.
//!
//! The guide in `book/` walks through the pieces; its code blocks run as
//! doctests of this crate.

pub mod analysis;
pub mod coefficient;
pub mod corrector;
pub mod error;
pub mod fem;
pub mod harness;
pub mod interpolation;
mod io;
pub mod linalg;
pub mod mesh;
pub mod solver;

pub use error::{LodError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/meshes.md")]
    mod meshes {}
    #[doc = include_str!("../../../book/src/coefficients.md")]
    mod coefficients {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/correctors.md")]
    mod correctors {}
    #[doc = include_str!("../../../book/src/solving.md")]
    mod solving {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/behaviour.md")]
    mod behaviour {}
}
