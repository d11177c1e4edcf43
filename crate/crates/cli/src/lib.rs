//! Operational shell around the core library: configuration, dataset
//! ingestion, and experiment orchestration for the `spsg` binary.

pub mod config;
pub mod pipeline;
