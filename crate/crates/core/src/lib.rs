pub mod config;
pub mod denoiser;
pub mod distill;
pub mod encoder;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod potentials;
pub mod predictor;
pub mod synth;
pub mod tokenizer;
