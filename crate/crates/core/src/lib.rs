//! Online forecasting with recurrent networks whose learning rate is
//! re-estimated at every update from the most recent data.
//!
//! The guide in `book/` walks through the modules in order; its code
//! listings run as doctests of this crate.

pub mod datasets;
pub mod driver;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod windowing;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
