//! Noise characterization of Cartesian SENSE parallel-MRI reconstructions.
//!
//! The crate simulates multi-coil acquisition (coil weighting, correlated
//! Gaussian noise, phase-encode subsampling), unfolds the aliased coil images
//! with SENSE, and computes closed-form noise statistics of the result:
//! per-pixel variance maps, correlation between co-reconstructed lines and
//! g-factor maps. A Monte Carlo harness checks the closed forms against
//! sample statistics.
//!
//! Conventions used throughout:
//!
//! * every variance is **per component** (real or imaginary part), so the
//!   magnitude of a zero-mean reconstructed pixel is Rayleigh with
//!   `sigma^2 = E{M^2} / 2`;
//! * the forward DFT is unscaled and the inverse is scaled by `1/N`, with `N`
//!   the number of points of the grid being transformed;
//! * phase encoding runs along image rows (`y`), and subsampling by `r` keeps
//!   rows `0, r, 2r, ...`.

pub mod complex_linalg;
pub mod dft;
pub mod error;
pub mod io;
pub mod montecarlo;
pub mod noise_analysis;
pub mod noise_sim;
pub mod phantom;
pub mod rng;
pub mod sense;

pub use complex_linalg::{CMatrix, LinalgError, C64};
pub use dft::{ComplexImage, Domain, RealImage};
pub use error::{Error, Result};
pub use noise_analysis::{NoiseMaps, Weighting};
pub use noise_sim::{CoilCovariance, NoiseRealization, ScaleTag};
pub use phantom::{Phantom, PhantomKind, SensitivityMap, SensitivityProfile};
pub use rng::Seed;
pub use sense::{CoilStack, Reconstruction, UnmixingField, UnmixingMatrix};
