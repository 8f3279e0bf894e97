//! Condensing zero-range processes on a finite site set, their absorbed
//! diffusion limit on the simplex, and the trace-process algebra behind it.

pub mod chain;
pub mod cli;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod functions;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod sites;
pub mod superharmonic;
pub mod trace;
pub mod zrp;

pub use chain::{ChainConfig, ChainModel, RateMatrix};
pub use error::{Error, Result};
pub use policy::NumericPolicy;
pub use sites::SiteSet;
