//! Scene reconstruction and object segmentation with oriented 2D Gaussian
//! disks: differentiable rendering, identity classification, target
//! extraction, hole replenishment and surface meshing.

pub mod camera;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod imaging;
pub mod io;
pub mod mesh;
pub mod optim;
pub mod raster;
pub mod replenish;
pub mod seg;
pub mod testbed;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{Splat, SplatGrad, SplatModel, ID_DIM};
