//! Joint stereo video deblurring, scene flow estimation and moving-object
//! segmentation on calibrated stereo sequences.
//!
//! The scene is modelled as superpixels carrying 3D planes, grouped into
//! rigidly moving objects. Blur is a per-pixel streak along bidirectional
//! optical flows. The solver alternates a discrete-continuous CRF step over
//! (plane, object label) proposals with a primal-dual convex solve for the
//! latent sharp images.

pub mod blur;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod deblur;
pub mod energy;
pub mod features;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod sceneflow;
pub mod stereo;
pub mod superpixels;
pub mod trws;
pub mod types;

pub use types::{CameraRig, DisparityMap, EnergyParams, FlowField, Image};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite flow at pixel ({x}, {y})")]
    NonFiniteFlow { x: usize, y: usize },
    #[error("flow magnitude at pixel ({x}, {y}) exceeds kernel radius {radius}")]
    KernelRadiusExceeded { x: usize, y: usize, radius: usize },
    #[error("degenerate homography at pixel ({x}, {y}): |w| = {w:.3e}")]
    DegenerateHomography { x: usize, y: usize, w: f64 },
    #[error("singular camera matrix")]
    SingularCamera,
    #[error("conjugate gradient failed to converge: residual {residual:.3e} after {iters} iterations")]
    CgDiverged { residual: f64, iters: usize },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("codec: {0}")]
    Codec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
