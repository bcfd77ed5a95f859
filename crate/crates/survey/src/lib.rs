//! Expert survey backend.
//!
//! Serves a dissection catalog to readers, validates their structured unit
//! reports against a BI-RADS-style lexicon, keeps every accepted report in an
//! append-only JSON-lines log, and derives the lexicon overlap report from
//! that log alone.

pub mod annotation;
mod error;
pub mod lexicon;
pub mod report;
pub mod server;
pub mod store;

pub use error::{Error, Result};
