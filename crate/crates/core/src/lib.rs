//! Ground-to-satellite 3-DoF pose refinement.

pub mod config;
pub mod correlation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod imageio;
pub mod model;
pub mod optimizer;
pub mod synthesis;
pub mod training;
pub mod synthdata;

pub use config::Config;
pub use error::{Error, Result};
pub use geometry::{CameraModel, Pose3DoF, SamplingGrid, SatelliteMeta};
