//! Route choice estimation on mobility networks whose link capacities
//! respond to the flows they carry.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0.0)` also rejects NaN

pub mod capacity;
pub mod choice;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod io;
pub mod network;
pub mod ols;
pub mod online;
pub mod optimize;
pub mod presets;
pub mod sim;

pub use error::{Error, Result};
