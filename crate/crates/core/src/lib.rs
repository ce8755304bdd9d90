pub mod body;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod featbank;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod model;
pub mod nerf;
pub mod nn;
pub mod synthcap;
pub mod trainer;

pub use error::{Error, Result};
