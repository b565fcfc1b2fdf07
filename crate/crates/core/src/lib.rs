//! Core domain logic for crowdsourced MUSHRA listening tests: the stimulus
//! and rating model, experiment configuration, listener qualification, block
//! partitioning and assignment, screening, and result analysis.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod model;
pub mod partition;
pub mod qualification;
pub mod screening;
