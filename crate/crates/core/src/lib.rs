//! Soft-attention 1D CNN for localizing rare marker events in depth-indexed
//! well logs.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod layers;
pub mod net;
pub mod supervision;
pub mod training;
