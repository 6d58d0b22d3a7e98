//! Joint learning of a linear 3D shape space and an image-to-latent regressor.
//!
//! An autoencoder over vectorized point clouds learns an affine decoder, which
//! serves as the shape basis, while a small CNN learns to map rendered images
//! into the same latent space. At test time the CNN output is decoded through
//! the learned basis to reconstruct a shape from one image.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
mod io_util;
pub mod model;
pub mod nn;
pub mod ply;
pub mod reconstruct;
pub mod render;
pub mod shape;
pub mod train;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
