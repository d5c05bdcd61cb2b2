//! Rate-splitting multiple access (RSMA) with sub-connected hybrid beamfocusing
//! for near-field links under imperfect CSI and imperfect SIC.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: system configuration, user placement and spherical-wave channels.
//! - [`rates`]: worst-case-noise rate lower bounds for common and private streams.
//! - [`surrogate`]: concave quadratic minorizers of those bounds.
//! - [`subproblem`]: the convex max-min step solved at every surrogate refresh.
//! - [`pbcd`]: penalty-based block coordinate descent over `{P, c, R}`, `F`, `W`.
//! - [`twostage`]: swap-based RF-chain allocation followed by digital-only SCA.
//! - [`bench`]: baselines, Monte-Carlo experiments, config files and result I/O.

pub mod bench;
pub mod error;
pub mod model;
pub mod pbcd;
pub mod rates;
pub mod subproblem;
pub mod surrogate;
pub mod twostage;

pub use error::{Error, Result};
pub use num_complex::Complex64;
