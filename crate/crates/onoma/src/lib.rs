//! Target environmental-sound extraction conditioned on onomatopoeic words.
//!
//! A mixture spectrogram is masked with a time-frequency soft mask estimated
//! by a U-Net whose bottleneck is conditioned on an embedding of the query:
//! either a BiLSTM encoding of the word's phoneme sequence, or a one-hot
//! sound-event class for the baseline modes. The crate also ships a
//! procedural dataset builder (synthetic sound events paired with rule-based
//! onomatopoeia, exact-SNR mixing, three evaluation regimes), a training
//! loop, and an SDRi evaluation harness.

pub mod cli;
pub mod config;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod model;
pub mod nn;
pub mod phoneme;
pub mod training;
