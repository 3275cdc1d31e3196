//! Dynamic driving scenes as graphs of 3D Gaussians: a static background
//! node plus rigid object nodes whose spherical-harmonic colors vary over
//! time through a small bank of Ricker wavelets.

pub mod appearance;
pub mod cli;
pub mod edit;
pub mod error;
pub mod geom;
pub mod image;
pub mod ingest;
pub mod io;
pub mod optim;
pub mod rasterizer;
pub mod render;
pub mod scenegraph;

pub use error::{Error, Result};
