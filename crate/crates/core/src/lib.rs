//! Harmonization pipeline for code instruction-tuning corpora.

pub mod decontam;
pub mod gateway;
pub mod ingest;
pub mod quality;
pub mod syntax;
pub mod alchemist;
pub mod tasks;
pub mod analysis;
pub mod pipeline;
