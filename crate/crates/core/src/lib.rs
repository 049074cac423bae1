//! Spectrum-aware adapters for frozen linear layers.
//!
//! A frozen weight `W₀` is adapted either additively (LoRA), by a right
//! orthogonal rotation (OFT and its Kronecker-factored variant), by shifting
//! its singular values, or by doing both at once on its SVD or LQ factors.
//! Orthogonal factors are trained on the Stiefel manifold.

pub mod adapters;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod random;
pub mod stiefel_opt;
pub mod verify;

pub use adapters::{
    AdapterConfig, AdapterState, Constraint, FrozenBase, KroneckerRotation, Method, ParameterGradients, Trainables,
};
pub use error::{Result, SodaError};
pub use linalg::{DenseMatrix, SkewSymmetric, SpectralDecomposition, TriangularDecomposition};
pub use stiefel_opt::{CayleyParameter, EuclideanOptimizerState, StiefelOptimizerState};
