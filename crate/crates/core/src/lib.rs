//! All-in-one image restoration at desk scale.
//!
//! The pipeline has three moving parts: a degradation-guided router built on a
//! frozen image encoder ([`router`], [`backbone`]), a NAFBlock U-Net whose
//! features are modulated by the router's degradation embedding ([`net`]), and
//! a sparsely gated bank of low-rank experts attached to the pointwise
//! convolutions of that network ([`moe`]). Training happens in two stages
//! ([`train`]): full pre-training of the modulated network, then
//! parameter-efficient fine-tuning of the experts alone. Corpora are
//! procedurally generated ([`synth`]) so everything runs hermetically on CPU.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod container;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod moe;
pub mod net;
pub mod params;
pub mod router;
pub mod seeds;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
