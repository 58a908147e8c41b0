//! Harmonic analysis and semiclassical Schrödinger dynamics on H-type groups.
//!
//! Layout:
//! - [`htype`]: group law, dilations, left-invariant fields, adapted frames.
//! - [`fiber`]: Hermite-basis realization of a single representation π^λ.
//! - [`grid`], [`gft`]: sampled states and the discretized group Fourier transform.
//! - [`quantize`]: symbols and the semiclassical quantization Op_ε.
//! - [`propagate`]: spectral propagation, time windows, Euclidean baseline.
//! - [`measure`], [`fit`]: wave packets, measure/transport diagnostics, rate fits.
//! - [`io`]: `.npy` state dumps with a JSON grid sidecar.
//! - [`experiments`]: scenario drivers shared by the CLI and the acceptance suite.

pub mod experiments;
pub mod fiber;
pub mod fit;
pub mod gft;
pub mod grid;
pub mod htype;
pub mod io;
pub mod measure;
pub mod propagate;
pub mod quantize;

pub use num_complex::Complex64;

pub use fiber::{FiberOperator, HermiteFrame, SpectralFn};
pub use gft::{FiberField, Gft};
pub use grid::{GridSpec, PhysicalState};
pub use htype::{AdaptedFrame, GroupPoint, GroupStructure};
pub use experiments::{ExperimentConfig, Outcome, Resolved, Scenario};
pub use measure::{PacketLayout, WavePacketSpec};
pub use propagate::{EvolutionSpec, Window};
pub use quantize::{FiberPart, Profile, Symbol, Term};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid structure: {0}")]
    Structure(String),
    #[error("quadrature degeneracy: {0}")]
    Quadrature(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) const I: Complex64 = Complex64::new(0.0, 1.0);
