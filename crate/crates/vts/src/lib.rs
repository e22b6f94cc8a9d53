//! Multi-speaker video-to-speech synthesis with explicit speaker conditioning
//! and adversarial speaker/content disentanglement.
//!
//! The pipeline maps silent video to a log-mel spectrogram through a visual
//! frontend (3D conv, residual stack, recurrent layer), optionally concatenates
//! a speaker conditioning vector, and decodes mel frames autoregressively.
//! A speaker classifier attached to the visual features drives two
//! disentanglement objectives (adversarial "dispel" and gradient reversal)
//! that strip speaker identity from the content pathway. Everything runs on
//! CPU against a deterministic synthetic audiovisual corpus with a
//! controllable amount of speaker leakage in the video channel.

pub mod conditioner;
pub mod decoder;
pub mod disentangle;
pub mod evalkit;
pub mod frontend;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod synthdata;
pub mod trainer;
pub mod vocoder;
