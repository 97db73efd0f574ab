pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompts;
pub mod regions;
pub mod vocab;
