pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod genres;
