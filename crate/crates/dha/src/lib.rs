//! Hybrid recommender that fuses heterogeneous side information into the
//! latent space of a confidence-weighted matrix factorization.
//!
//! Each information source (demographic vectors, content features, event
//! sequences) gets its own encoder: stacked denoising autoencoders for flat
//! vectors, an LSTM encoder-decoder for sequences. A fusion layer sums the
//! per-source codes into one deep representation per user and per item, and
//! that representation anchors the user/item factors of a weighted matrix
//! factorization. Training alternates between gradient steps on the networks
//! and closed-form ridge updates of the factors.
//!
//! The crate is organized bottom-up:
//!
//! - [`math`]: dense vectors/matrices, activations, an SPD solver
//! - [`rng`]: seeded, labeled random streams for reproducible runs
//! - [`sdae`]: stacked denoising autoencoders for flat feature vectors
//! - [`seq2seq`]: LSTM encoder-decoder for token sequences
//! - [`fusion`]: combining per-source codes into one latent vector
//! - [`cf`]: confidence-weighted matrix factorization with latent anchors
//! - [`data`]: file formats, feature vectorization, splits, synthetic data
//! - [`trainer`]: the alternating optimization loop
//! - [`gradcheck`]: finite-difference verification of every gradient path
//! - [`eval`]: ranking metrics (recall@M, MAP@M)
//! - [`config`]: TOML run configuration
//! - [`checkpoint`]: binary snapshot format with integrity checks
//! - [`pipeline`]: config-driven end-to-end runs

pub mod cf;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod math;
pub mod pipeline;
pub mod rng;
pub mod sdae;
pub mod seq2seq;
pub mod trainer;

pub use error::{DhaError, Result};
