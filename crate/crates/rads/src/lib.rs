pub use rads_core as core;

pub mod ablation;
pub mod cli;
pub mod config;
pub mod edgelog;
pub mod evaluation;
pub mod jsonl;
pub mod pipeline;
pub mod pnm;
pub mod report;
pub mod state;
pub mod transport;
pub mod world;
