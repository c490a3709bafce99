pub mod autograd;
pub mod config;
pub mod corpus;
pub mod emotaxonomy;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod models;
pub mod params;
pub mod safetensors;
pub mod tokenize;
pub mod trainer;
pub mod tuner;
