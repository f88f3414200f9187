//! Energy pumping of a chaotic billiard-like oscillator driven by a weak
//! monochromatic wave through a retarded field interaction.

pub mod billiard;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod field;
pub mod manifold;
pub mod potential;
pub mod quad;
pub mod symbolic;

pub use error::{Error, Result};
