//! Operator commands and benchmark harness for faaslite nodes.

pub mod bench;
pub mod client;
pub mod cluster;
pub mod report;
pub mod sgd;
