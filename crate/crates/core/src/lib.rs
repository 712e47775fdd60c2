//! Model and reference-free calibration of multiplexed photon-number-resolving
//! detectors.
//!
//! * [`numerics`]: exact and compensated combinatorial primitives.
//! * [`sources`]: photon statistics of Fock, thermal and squeezed-vacuum light.
//! * [`detector`]: loss, finite-size, dark-count and cross-talk transfer
//!   matrices, their closed-form composition, and single-detector odds.
//! * [`montecarlo`]: an explicit grid simulator used as an independent oracle.
//! * [`calibration`]: efficiency extraction from attenuation scans and the
//!   two-detector coincidence estimator.

pub mod calibration;
pub mod detector;
pub mod error;
pub mod montecarlo;
pub mod numerics;
pub mod sources;

pub use detector::{DetectorParams, TransferMatrix};
pub use error::{Error, Result};
pub use sources::{PhotonDistribution, Source};
