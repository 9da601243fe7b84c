//! Core algorithms for audio-driven talking-head video generation: the audio
//! frontend, the spatially-adaptive generator, its three adversaries, the
//! loss suite, the phased trainer, few-shot adaptation and the evaluation
//! metrics. File formats, ingestion and the command-line live in the
//! companion `a2v-cli` crate.

pub mod adapt;
pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod disc;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use autograd::Var;
pub use tensor::Tensor;
