pub mod config;
pub mod data;
pub mod losses;
pub mod eval;
pub mod models;
pub mod pipeline;
pub mod stages;
pub mod substrate;
pub mod synthesis;
