pub mod cli;
pub mod erp;
pub mod error;
pub mod gradient;
pub mod meanfield;
pub mod models;
pub mod optimize;
pub mod rng;
pub mod trace;
