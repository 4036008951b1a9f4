//! Acoustic resonance in a variable-diameter tube with thermoviscous wall
//! losses and radiation, and identification of the wall-loss constants with a
//! physics-informed neural network.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod excitation;
pub mod experiment;
pub mod fdm;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod physics;
pub mod resonet;
pub mod trainer;

pub use error::{Error, Result};
