pub mod autoencoder;
pub mod cli;
pub mod clustering;
pub mod embedding;
pub mod landmark;
pub mod matrix;
pub mod pipeline;
pub mod ranking;
pub mod synthgen;
