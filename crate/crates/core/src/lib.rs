//! Camera ISP parameters trained to hinder face recognition while keeping
//! person detection usable, with the models, attacks and experiment tooling
//! used to evaluate them.

pub mod attacks;
pub mod benchmark;
pub mod detection;
pub mod enhancer;
pub mod error;
pub mod evaluation;
pub mod face;
pub mod image;
pub mod isp;
pub mod nn;
pub mod synth;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};
pub use image::{Domain, ImageTensor};
