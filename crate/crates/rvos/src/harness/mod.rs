//! Everything around the model: configuration, synthetic data, toy
//! backbones, the end-to-end pipeline, training, benchmarking, and disk
//! formats.

pub mod bench;
pub mod config;
pub mod encoders;
pub mod io;
pub mod pipeline;
pub mod scene;
pub mod train;
