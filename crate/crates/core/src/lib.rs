//! Joint bidding and pricing for auto-bidding under a CPA constraint.

pub mod auction_env;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod controllers;
pub mod domain;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod rtg;
pub mod training;
pub mod trajgen;

pub use error::{Error, Result};
