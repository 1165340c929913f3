#![cfg_attr(test, allow(clippy::needless_range_loop, clippy::field_reassign_with_default))]

pub mod aggregate;
pub mod cli;
pub mod cluster;
pub mod corpus;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod service;
pub mod stream;
pub mod style;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
