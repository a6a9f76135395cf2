//! Takeover-behavior prediction from multimodal driving data.
//!
//! The crate covers the full pipeline: channel preprocessing ([`dsp`],
//! [`hrv`]), windowed feature extraction and fusion ([`features`]), label
//! assignment ([`labeling`]), class balancing and grouped splits
//! ([`sampling`]), the feed-forward classifier ([`nn`]), reference learners
//! ([`baselines`]), metrics ([`eval`]), a synthetic session generator
//! ([`synth`]), file formats ([`io`]) and the end-to-end recipes used by the
//! command-line tool ([`pipeline`]).

pub mod baselines;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod features;
pub mod hrv;
pub mod io;
pub mod labeling;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod synth;

pub use error::{Error, Result};
