//! Kernel-based extension of learned solution operators on point-cloud
//! radial manifolds: RKHS interpolation, Laplace-Beltrami solution oracles,
//! a separable geometric neural operator, and error-bound verification.

pub mod bench;
pub mod extension;
pub mod geometry;
pub mod gnp;
pub mod kernel;
pub mod lb;
pub mod rkhs;
pub mod sh;
