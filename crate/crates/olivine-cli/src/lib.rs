//! Support code for the `olivine` binary, split out so integration tests can
//! reach the config table.

pub mod config;
