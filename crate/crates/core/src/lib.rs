pub mod alloc_dist;
pub mod comparators;
pub mod error;
pub mod gittins;
pub mod harness;
pub(crate) mod null_chain;
pub mod numeric;
pub mod qtest;
pub mod trial_engine;

pub use error::{Error, Result};
