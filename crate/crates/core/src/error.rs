//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("field evaluated outside its definition region at ({x}, {y})")]
    FieldDomain { x: f64, y: f64 },

    #[error("energy level tau = {tau} does not exceed sampled max potential {max_phi}")]
    ShellInvalid { tau: f64, max_phi: f64 },

    #[error("phase state off the energy shell: |theta| = {speed}, p(x) = {expected}")]
    OffShell { speed: f64, expected: f64 },

    #[error("trajectory from ({x}, {y}) trapped: no boundary exit within time budget {budget}")]
    Trapped { x: f64, y: f64, budget: f64 },

    #[error("phase grid node (ix={ix}, iy={iy}, angle={angle}) is trapped")]
    TrappedNode { ix: usize, iy: usize, angle: usize },

    #[error("boundary node {index} is trapped")]
    TrappedBoundaryNode { index: usize },

    #[error("grid mismatch: expected {expected}, got {got}")]
    GridMismatch { expected: String, got: String },

    #[error("sinogram node set mismatch: expected {expected} nodes, got {got}")]
    NodeSetMismatch { expected: usize, got: usize },

    #[error("non-finite value detected in {context} at iteration {iteration}")]
    NonFinite { context: String, iteration: usize },

    #[error("forward transport iteration diverged: {context}")]
    TransportDiverged { context: String },

    #[error("landweber iteration diverged at step {iteration}")]
    LandweberDiverged { iteration: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
