//! Single-shot scene text spotting.
//!
//! Text detection and recognition run in parallel off a shared feature
//! pyramid and are bridged by positive anchor points: every surviving anchor
//! carries a box, mask coefficients for a prototype mask, and a learned set
//! of sampling points whose character distributions are decoded with CTC.

pub mod alphabet;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod inference;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
