//! Mesoscopic electrodynamics on a discrete time grid.
//!
//! Devices are causal samplers of a current conditional on the field they
//! see. They interact only through a strictly retarded propagator, so every
//! network can be simulated by a single forward time loop. The [`gaussian`]
//! module gives the same dressing and composition in closed form for affine
//! Gaussian devices, and [`timenormal`] checks the quantum side of the
//! correspondence on a truncated Fock space.

/// Library version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod devices;
pub mod dressing;
pub mod error;
pub mod fock;
pub mod gaussian;
pub mod network;
pub mod numerics;
pub mod photodetection;
pub mod propagators;
pub mod rng;
pub mod timegrid;
pub mod timenormal;

pub use devices::{
    estimate_moments, radiate, sample_bare, BareDevice, DeviceRef, GaussianDevice, MomentReport,
    PoissonDetector, StepSampler, VectorMoments,
};
pub use dressing::{dress, DressedDevice};
pub use error::{Error, Result};
pub use gaussian::{gaussian_compose, gaussian_dress, AffineGaussianSpec, JointGaussianSpec};
pub use network::{compose_bare, simulate_network, NetworkSample, NetworkSpec};
pub use photodetection::{run_cascade, CascadeSpec};
pub use propagators::{dyson_absorb, retarded_diagonal, retarded_single_mode, ModeSpec};
pub use rng::{DeviceId, StreamKey};
pub use timegrid::{apply_kernel, bilinear, inner, CausalKernel, Strictness, TimeGrid, Trajectory};
pub use timenormal::{freq_split, ComplexTrajectory, FockOracle};
