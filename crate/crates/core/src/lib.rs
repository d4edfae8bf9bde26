//! Differentiable rigid-body simulation with frictional contact.

pub mod benchmark;
pub mod collision;
pub mod diffstep;
pub mod dynamics;
pub mod error;
pub mod fdcheck;
pub mod format;
pub mod lcp;
pub mod linalg;
pub mod scenes;
pub mod skeleton;
pub mod spatial;
pub mod tracked;
pub mod trajopt;
pub mod world;

pub use error::{Error, Result};
