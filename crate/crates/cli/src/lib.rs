//! Command-line plumbing and the HTTP service behind the intervention explorer.

pub mod options;
pub mod service;
