//! Simulation of incoherent imaging through atmospheric turbulence.
//!
//! Two simulators share one set of turbulence statistics: a split-step
//! wave-propagation reference ([`splitstep`]) and a propagation-free sampler
//! working in the space of per-pixel Zernike coefficients ([`zfield`],
//! [`psfbasis`]). [`restore`] holds classical restoration: lucky fusion,
//! reference frames and blind deconvolution.

pub mod atmosphere;
pub mod error;
pub mod fft;
pub mod io;
pub mod optics;
pub mod psfbasis;
pub mod restore;
pub mod rng;
pub mod screens;
pub mod special;
pub mod splitstep;
pub mod zernike;
pub mod zfield;

pub use error::{Error, Result};

/// A value paired with a non-fatal warning flag (approximation used outside
/// its validity range, clipping applied, fallback taken).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub flagged: bool,
}
