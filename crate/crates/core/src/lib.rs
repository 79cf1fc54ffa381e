//! Contact-schedule selection for a planar hopper by contextual GP-UCB over
//! a direct-collocation trajectory optimizer.

pub mod bo;
pub mod collocation;
pub mod config;
pub mod error;
pub mod eval;
pub mod gp;
pub mod hopper;
pub mod terrain;

pub use error::{Error, Result};
