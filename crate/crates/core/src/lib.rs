pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffkit;
pub mod slul;
pub mod slp_moe;
pub mod evalkit;
pub mod stabilizer;
pub mod pipeline;
