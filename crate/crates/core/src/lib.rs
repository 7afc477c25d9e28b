pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod neighbors;
pub mod nn;
pub mod ot;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod unet;
pub mod voxel;
