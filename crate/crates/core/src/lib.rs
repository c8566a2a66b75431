//! Relational deep reinforcement learning over graph-encoded symbolic states.

pub mod a2c;
pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod gnn;
pub mod graph;
pub mod policy;
