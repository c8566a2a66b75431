//! Relational planning domains: BlockWorld, Sokoban and SysAdmin.

pub mod blockworld;
pub mod sokoban;
pub mod sysadmin;
mod error;

pub use error::{EnvError, Result};
