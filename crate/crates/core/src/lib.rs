//! A replicated key-value store over a simulated disaggregated-memory
//! fabric, together with the harness that checks it.

pub mod client;
pub mod config;
pub mod error;
pub mod event;
pub mod fabric;
pub mod harness;
pub mod hash;
pub mod index;
pub mod master;
pub mod memalloc;
pub mod oplog;
pub mod sim;
pub mod slotproto;

pub use config::Config;
pub use error::{Error, Result};
