//! Semi-supervised bird's-eye-view segmentation at desk scale.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is
//! pure computation:
//!
//! * [`tensor`]: dense `f64` tensors with a define-by-run reverse-mode tape,
//! * [`geometry`]: pinhole intrinsics, rotation homographies, image warping
//!   and flips,
//! * [`synthworld`]: a synthetic ground-plane world with a raycasting camera,
//!   BEV rasterizer and visibility model,
//! * [`model`], [`losses`], [`augment`], [`optim`], [`trainer`] and [`eval`]:
//!   the Mean-Teacher training machinery and its metric.
//!
//! File formats, configuration files and the command-line tool live in the
//! `bevseg` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod bev;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
