use thiserror::Error;

/// Errors produced by the volumetric and surface operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two arguments that must agree in shape or length do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The requested label does not occur in the mask.
    #[error("label {label} not present in mask")]
    LabelNotFound { label: u8 },

    /// A mask is entirely foreground or entirely background where a
    /// boundary is required.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    /// An isosurface level lies outside the volume's value range or the
    /// surface would be clipped by the volume boundary.
    #[error("isosurface level {level} unusable: {reason}")]
    BadIsoLevel { level: f64, reason: String },

    /// An extracted or constructed surface violates the closed-2-manifold
    /// contract.
    #[error("surface is not a closed oriented 2-manifold: {0}")]
    NonManifold(String),

    /// Geometry too degenerate to proceed (zero-area faces, zero-length
    /// normals, duplicate points).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A trajectory left the finite range during integration.
    #[error("non-finite state at integration step {step}")]
    NonFiniteFlow { step: usize },

    /// A gradient entry became non-finite.
    #[error("non-finite gradient for parameter {path}")]
    NonFiniteGradient { path: String },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    /// A post-stage consistency check inside the pipeline failed.
    #[error("pipeline check failed at stage '{stage}': {reason}")]
    PipelineCheck { stage: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
