pub mod anchors;
pub mod avatario;
pub mod coremath;
pub mod error;
pub mod fastpath;
pub mod gaussmodel;
pub mod mlp;
pub mod model;
pub mod neuraltex;
pub mod renderer;
pub mod rig;
pub mod trainer;

pub use error::{Error, Result};
