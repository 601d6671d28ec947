//! Complex-step differentiation of a dense RGB-D reconstruction pipeline.

pub mod csfd;
pub mod dataset;
pub mod diffcheck;
pub mod frames;
pub mod icp;
pub mod optim;
pub mod pipeline;
pub mod reloc;
pub mod se3;
pub mod surfel;
pub mod synth;
pub mod taskgrad;
pub mod trajectory;
pub mod tsdf;
pub mod util;
