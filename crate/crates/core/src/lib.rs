//! Multimodal urban region representation learning.

pub mod cli;
pub mod data;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod moe;
pub mod nn;
pub mod objectives;
pub mod sv;
pub mod tape;
pub mod trainer;
pub mod walks;
