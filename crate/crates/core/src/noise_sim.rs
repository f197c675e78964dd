//! Inter-coil correlated, spatially white, circular complex Gaussian noise.
//!
//! For every pixel the vector of real parts across coils is `N(0, S)`, the
//! vector of imaginary parts is an independent `N(0, S)`, and distinct pixels
//! are independent. Samples are `T z` with `T` the Cholesky factor of `S`.
//! The standard normals for coil `l`, pixel `(x, y)` are the `x`-th normal
//! pair of ChaCha stream `(l, y)` of the seed, so a realization depends only
//! on `(S, dims, seed)`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex_linalg::{CMatrix, Cholesky, LinalgError, C64, HERMITIAN_TOL};
use crate::dft::{ComplexImage, Domain};
use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::sense::CoilStack;

/// Which grid a covariance describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "r")]
pub enum ScaleTag {
    /// Per-sample covariance of fully sampled k-space.
    KSpaceFull,
    /// Per-pixel covariance of the fully sampled image.
    XSpaceFull,
    /// Per-pixel covariance of the aliased image after subsampling by `r`.
    XSpaceSubsampled(usize),
}

impl fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleTag::KSpaceFull => write!(f, "k-space (full)"),
            ScaleTag::XSpaceFull => write!(f, "x-space (full)"),
            ScaleTag::XSpaceSubsampled(r) => write!(f, "x-space (subsampled r={r})"),
        }
    }
}

/// Per-component coil noise covariance `S` (Hermitian, positive definite).
#[derive(Debug, Clone)]
pub struct CoilCovariance {
    sigma: CMatrix,
    factor: Cholesky,
    tag: ScaleTag,
}

impl CoilCovariance {
    pub fn new(sigma: CMatrix, tag: ScaleTag) -> Result<Self> {
        if !sigma.is_square() || sigma.rows() == 0 {
            return Err(Error::InvalidCovariance(format!(
                "covariance must be a non-empty square matrix, got {}x{}",
                sigma.rows(),
                sigma.cols()
            )));
        }
        let dev = sigma.hermitian_deviation();
        if !(dev <= HERMITIAN_TOL) {
            return Err(LinalgError::NotHermitian { max_dev: dev }.into());
        }
        let sigma = sigma.symmetrized();
        for i in 0..sigma.rows() {
            if !(sigma[(i, i)].re > 0.0) {
                return Err(Error::InvalidCovariance(format!(
                    "diagonal entry {i} must be positive, got {}",
                    sigma[(i, i)].re
                )));
            }
        }
        let factor = Cholesky::factor_unchecked(&sigma, 0.0)?;
        Ok(CoilCovariance { sigma, factor, tag })
    }

    /// `variance * ((1 - rho) I + rho J)`: equal variances, equal correlation
    /// coefficient `rho` between every pair of coils.
    pub fn uniform_correlation(coils: usize, variance: f64, rho: f64, tag: ScaleTag) -> Result<Self> {
        let sigma = CMatrix::from_fn(coils, coils, |i, j| {
            C64::new(if i == j { variance } else { variance * rho }, 0.0)
        });
        Self::new(sigma, tag)
    }

    pub fn scaled_identity(coils: usize, variance: f64, tag: ScaleTag) -> Result<Self> {
        Self::uniform_correlation(coils, variance, 0.0, tag)
    }

    pub fn coils(&self) -> usize {
        self.sigma.rows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.sigma
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.factor
    }

    pub fn tag(&self) -> ScaleTag {
        self.tag
    }

    /// Same matrix times `factor`, relabelled.
    pub fn rescaled(&self, factor: f64, tag: ScaleTag) -> Result<Self> {
        Self::new(self.sigma.scale(factor), tag)
    }

    /// Whether `S` is a multiple of the identity.
    pub fn is_scalar(&self) -> bool {
        let d = self.sigma[(0, 0)].re;
        (0..self.coils()).all(|i| {
            (0..self.coils()).all(|j| {
                let expected = if i == j { d } else { 0.0 };
                self.sigma[(i, j)] == C64::new(expected, 0.0)
            })
        })
    }

    /// Real and imaginary parts as nested rows, for reports.
    pub fn echo(&self) -> CovarianceEcho {
        let n = self.coils();
        let real = (0..n)
            .map(|i| (0..n).map(|j| self.sigma[(i, j)].re).collect())
            .collect();
        let has_imag = self.sigma.as_slice().iter().any(|z| z.im != 0.0);
        let imag = has_imag.then(|| {
            (0..n)
                .map(|i| (0..n).map(|j| self.sigma[(i, j)].im).collect())
                .collect()
        });
        CovarianceEcho {
            tag: self.tag,
            real,
            imag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEcho {
    pub tag: ScaleTag,
    pub real: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub imag: Option<Vec<Vec<f64>>>,
}

/// One noise draw for every coil.
#[derive(Debug, Clone)]
pub struct NoiseRealization {
    pub stack: CoilStack,
    pub seed: Seed,
}

fn stream_id(coil: usize, row: usize) -> u64 {
    ((coil as u64) << 32) | row as u64
}

/// Fills one row of every coil with correlated noise. `out[l]` is coil `l`'s
/// row buffer of length `width`.
fn fill_row(factor: &CMatrix, seed: Seed, y: usize, out: &mut [Vec<C64>], z: &mut [Vec<C64>]) {
    let coils = factor.rows();
    for (l, zl) in z.iter_mut().enumerate() {
        let mut stream = seed.stream(stream_id(l, y));
        for v in zl.iter_mut() {
            let (re, im) = stream.normal_pair();
            *v = C64::new(re, im);
        }
    }
    let width = out[0].len();
    for x in 0..width {
        for l in 0..coils {
            let mut acc = C64::new(0.0, 0.0);
            for (k, zk) in z.iter().enumerate().take(l + 1) {
                acc += factor[(l, k)] * zk[x];
            }
            out[l][x] = acc;
        }
    }
}

/// Correlated complex noise for `cov.coils()` coils on a `width x height`
/// x-space grid.
pub fn sample_coil_noise(
    cov: &CoilCovariance,
    width: usize,
    height: usize,
    seed: Seed,
) -> Result<NoiseRealization> {
    let coils = cov.coils();
    let factor = cov.cholesky().lower();
    let rows: Vec<Vec<Vec<C64>>> = (0..height)
        .into_par_iter()
        .map_init(
            || vec![vec![C64::new(0.0, 0.0); width]; coils],
            |z, y| {
                let mut out = vec![vec![C64::new(0.0, 0.0); width]; coils];
                fill_row(factor, seed, y, &mut out, z);
                out
            },
        )
        .collect();
    let mut images: Vec<Vec<C64>> = (0..coils).map(|_| Vec::with_capacity(width * height)).collect();
    for row in rows {
        for (img, r) in images.iter_mut().zip(row) {
            img.extend_from_slice(&r);
        }
    }
    let images = images
        .into_iter()
        .map(|d| ComplexImage::from_vec(width, height, d, Domain::XSpace))
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseRealization {
        stack: CoilStack::new(images)?,
        seed,
    })
}

/// Sequential variant of [`sample_coil_noise`] writing into existing
/// buffers; produces the same values. Used inside already-parallel loops.
pub(crate) fn sample_coil_noise_into(cov: &CoilCovariance, seed: Seed, stack: &mut CoilStack) {
    let coils = cov.coils();
    let (width, height) = stack.dims();
    let factor = cov.cholesky().lower();
    let mut z = vec![vec![C64::new(0.0, 0.0); width]; coils];
    let mut out = vec![vec![C64::new(0.0, 0.0); width]; coils];
    for y in 0..height {
        fill_row(factor, seed, y, &mut out, &mut z);
        for (l, row) in out.iter().enumerate() {
            stack.image_mut(l).as_mut_slice()[y * width..(y + 1) * width].copy_from_slice(row);
        }
    }
}
