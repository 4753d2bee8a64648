//! Lowlight-aware two-view Gaussian splatting toolkit.
//!
//! The crate covers a controllable multi-view lowlight benchmark generator,
//! a residual lowlight adapter, plane-sweep two-view depth, a differentiable
//! Gaussian splatting renderer, and the reconstruct-and-evaluate harness that
//! ties them together.

pub mod adapter;
pub mod benchmark;
pub mod camera;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod lowlight;
pub mod mvs;
pub mod render;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
