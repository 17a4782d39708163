//! Voxel reconstruction from one or more images.

pub mod datasets;
pub mod decoder3d;
pub mod encoder;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod voxgrid;
pub mod vqvae;
