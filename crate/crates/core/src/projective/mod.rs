//! Pinhole projection, virtual stereo rigs, warping and triangulation.

mod camera;
mod stereo;
mod triangulate;

pub use camera::*;
pub use stereo::*;
pub use triangulate::*;
