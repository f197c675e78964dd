//! Coil weighting, SENSE unfolding and sum-of-squares combination.
//!
//! Aliasing convention: subsampling by `r` folds full-grid rows
//! `y_i = y + i * M_y / r` (`i = 0..r`) onto row `y` of the reduced grid,
//! in that order. Row `i` of an unmixing matrix `W` (one row per aliased
//! location, one column per coil) reconstructs location `y_i`.

use rayon::prelude::*;

use crate::complex_linalg::{CMatrix, Cholesky, LinalgError, C64};
use crate::dft::{subsample_phase_encode, ComplexImage, Domain, Fft2, RealImage};
use crate::error::{Error, Result};
use crate::noise_sim::CoilCovariance;
use crate::phantom::{Phantom, SensitivityMap};

/// Relative pivot threshold below which `C^H S^-1 C` counts as singular.
pub const SINGULAR_PIVOT_REL: f64 = 1e-12;

/// `L` same-sized images sharing a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilStack {
    images: Vec<ComplexImage>,
}

impl CoilStack {
    pub fn new(images: Vec<ComplexImage>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::BadDims("a coil stack needs at least one coil".into()))?;
        let (dims, domain) = (first.dims(), first.domain());
        for (l, img) in images.iter().enumerate() {
            if img.dims() != dims {
                return Err(Error::dims(
                    format!("{}x{}", dims.0, dims.1),
                    format!("{}x{} (coil {l})", img.width(), img.height()),
                ));
            }
            if img.domain() != domain {
                return Err(Error::WrongDomain {
                    expected: domain,
                    found: img.domain(),
                });
            }
        }
        Ok(CoilStack { images })
    }

    pub fn zeros(coils: usize, width: usize, height: usize, domain: Domain) -> Self {
        CoilStack {
            images: vec![ComplexImage::zeros(width, height, domain); coils],
        }
    }

    pub fn coils(&self) -> usize {
        self.images.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.images[0].dims()
    }

    pub fn domain(&self) -> Domain {
        self.images[0].domain()
    }

    pub fn image(&self, l: usize) -> &ComplexImage {
        &self.images[l]
    }

    pub fn image_mut(&mut self, l: usize) -> &mut ComplexImage {
        &mut self.images[l]
    }

    pub fn images(&self) -> &[ComplexImage] {
        &self.images
    }

    pub fn into_images(self) -> Vec<ComplexImage> {
        self.images
    }

    /// Coil values at one pixel.
    pub fn column(&self, x: usize, y: usize) -> Vec<C64> {
        self.images.iter().map(|m| m.get(x, y)).collect()
    }

    /// Pixelwise sum of two stacks of identical shape.
    pub fn add(&self, other: &CoilStack) -> Result<CoilStack> {
        if self.coils() != other.coils() || self.dims() != other.dims() {
            return Err(Error::dims(
                format!("{} coils of {:?}", self.coils(), self.dims()),
                format!("{} coils of {:?}", other.coils(), other.dims()),
            ));
        }
        let images = self
            .images
            .iter()
            .zip(&other.images)
            .map(|(a, b)| {
                let data = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p + q).collect();
                ComplexImage::from_vec(a.width(), a.height(), data, a.domain())
            })
            .collect::<Result<Vec<_>>>()?;
        CoilStack::new(images)
    }
}

/// `S_l(x, y) = C_l(x, y) S_0(x, y)`.
pub fn apply_sensitivity(phantom: &Phantom, sens: &SensitivityMap) -> Result<CoilStack> {
    if phantom.image.dims() != sens.dims() {
        return Err(Error::dims(
            format!("{:?} (sensitivity map)", sens.dims()),
            format!("{:?} (phantom)", phantom.image.dims()),
        ));
    }
    let images = sens
        .coil_maps()
        .iter()
        .map(|c| {
            let data = c
                .as_slice()
                .iter()
                .zip(phantom.image.as_slice())
                .map(|(a, b)| a * b)
                .collect();
            ComplexImage::from_vec(c.width(), c.height(), data, Domain::XSpace)
        })
        .collect::<Result<Vec<_>>>()?;
    CoilStack::new(images)
}

/// Fully sampled x-space coils to aliased x-space coils: forward DFT, keep
/// every `r`-th phase-encode row, inverse DFT on the reduced grid.
#[derive(Clone)]
pub struct Acquisition {
    r: usize,
    full: Fft2,
    reduced: Fft2,
}

impl Acquisition {
    pub fn new(width: usize, height: usize, r: usize) -> Result<Self> {
        if r == 0 || height % r != 0 {
            return Err(Error::NotDivisible { size: height, factor: r });
        }
        Ok(Acquisition {
            r,
            full: Fft2::new(width, height),
            reduced: Fft2::new(width, height / r),
        })
    }

    pub fn image(&self, img: &ComplexImage) -> Result<ComplexImage> {
        let k = self.full.forward(img)?;
        let k = subsample_phase_encode(&k, self.r)?;
        self.reduced.inverse(&k)
    }

    pub fn stack(&self, stack: &CoilStack) -> Result<CoilStack> {
        let images = stack
            .images()
            .iter()
            .map(|img| self.image(img))
            .collect::<Result<Vec<_>>>()?;
        CoilStack::new(images)
    }
}

/// `W = (C^H S^-1 C)^-1 C^H S^-1` for an `L x r` aliased sensitivity matrix
/// `c_sub`; `S = I` when no covariance is given. The result is `r x L`.
pub fn build_unmixing(c_sub: &CMatrix, cov: Option<&CoilCovariance>) -> Result<CMatrix> {
    if let Some(cov) = cov {
        if cov.coils() != c_sub.rows() {
            return Err(Error::dims(
                format!("{} coils (covariance)", cov.coils()),
                format!("{} coils (sensitivities)", c_sub.rows()),
            ));
        }
    }
    unmix(c_sub, cov.map(CoilCovariance::cholesky)).map_err(|e| match e {
        UnmixFailure::Singular => Error::SingularSystem { pixel: None },
        UnmixFailure::Shape(msg) => Error::InvalidArgument(msg),
    })
}

pub(crate) enum UnmixFailure {
    Singular,
    Shape(String),
}

/// `C^H S^-1 C` and `S^-1 C` (or `C` when unweighted).
pub(crate) fn gram(c_sub: &CMatrix, noise: Option<&Cholesky>) -> (CMatrix, CMatrix) {
    let b = match noise {
        Some(chol) => chol.solve(c_sub).expect("dimensions checked by caller"),
        None => c_sub.clone(),
    };
    let g = (&c_sub.hermitian() * &b).symmetrized();
    (g, b)
}

pub(crate) fn factor_gram(g: &CMatrix) -> Result<Cholesky, UnmixFailure> {
    let max_diag = (0..g.rows()).map(|i| g[(i, i)].re).fold(0.0, f64::max);
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return Err(UnmixFailure::Singular);
    }
    Cholesky::factor_unchecked(g, SINGULAR_PIVOT_REL * max_diag).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } => UnmixFailure::Singular,
        other => UnmixFailure::Shape(other.to_string()),
    })
}

pub(crate) fn unmix(c_sub: &CMatrix, noise: Option<&Cholesky>) -> Result<CMatrix, UnmixFailure> {
    let (l, r) = (c_sub.rows(), c_sub.cols());
    if r == 0 || r > l {
        return Err(UnmixFailure::Shape(format!(
            "need 1 <= r <= L, got r={r} with L={l}"
        )));
    }
    let (g, b) = gram(c_sub, noise);
    let chol = factor_gram(&g)?;
    Ok(chol.solve(&b.hermitian()).expect("square system"))
}

/// Unmixing weights of one aliased pixel group.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixingMatrix {
    /// `r x L`; row `i` reconstructs full-grid row `y + i * M_y / r`.
    pub w: CMatrix,
    /// Position on the reduced grid.
    pub pixel: (usize, usize),
    pub r: usize,
}

impl UnmixingMatrix {
    pub fn row(&self, i: usize) -> &[C64] {
        self.w.row(i)
    }
}

/// `L x r` matrix of aliased sensitivities for reduced-grid pixel `(x, y)`.
pub fn aliased_sensitivities(sens: &SensitivityMap, r: usize, x: usize, y: usize) -> CMatrix {
    let fold = sens.dims().1 / r;
    CMatrix::from_fn(sens.coils(), r, |l, i| sens.value(l, x, y + i * fold))
}

/// Unmixing matrices for every pixel group of a map, computed once.
#[derive(Debug, Clone)]
pub struct UnmixingField {
    r: usize,
    width: usize,
    height: usize,
    coils: usize,
    groups: Vec<Option<UnmixingMatrix>>,
}

impl UnmixingField {
    /// `weighting` is the covariance used inside `W`; `None` gives the
    /// unweighted pseudo-inverse.
    pub fn build(sens: &SensitivityMap, r: usize, weighting: Option<&CoilCovariance>) -> Result<Self> {
        let (width, height) = sens.dims();
        if r == 0 || height % r != 0 {
            return Err(Error::NotDivisible { size: height, factor: r });
        }
        if r > sens.coils() {
            return Err(Error::InvalidArgument(format!(
                "subsampling factor {r} exceeds the coil count {}",
                sens.coils()
            )));
        }
        if let Some(cov) = weighting {
            if cov.coils() != sens.coils() {
                return Err(Error::dims(
                    format!("{} coils (sensitivities)", sens.coils()),
                    format!("{} coils (covariance)", cov.coils()),
                ));
            }
        }
        let fold = height / r;
        let noise = weighting.map(CoilCovariance::cholesky);
        let groups = (0..fold * width)
            .into_par_iter()
            .map(|k| {
                let (x, y) = (k % width, k / width);
                let c = aliased_sensitivities(sens, r, x, y);
                match unmix(&c, noise) {
                    Ok(w) => Ok(Some(UnmixingMatrix { w, pixel: (x, y), r })),
                    Err(UnmixFailure::Singular) => Ok(None),
                    Err(UnmixFailure::Shape(msg)) => Err(Error::InvalidArgument(msg)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UnmixingField {
            r,
            width,
            height,
            coils: sens.coils(),
            groups,
        })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Full-grid dimensions.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn reduced_height(&self) -> usize {
        self.height / self.r
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    /// `None` for a singular group.
    pub fn group(&self, x: usize, y: usize) -> Option<&UnmixingMatrix> {
        self.groups[y * self.width + x].as_ref()
    }

    pub fn groups(&self) -> impl Iterator<Item = ((usize, usize), Option<&UnmixingMatrix>)> {
        let w = self.width;
        self.groups
            .iter()
            .enumerate()
            .map(move |(k, g)| ((k % w, k / w), g.as_ref()))
    }

    /// Full-grid mask, true where the pixel belongs to a singular group.
    pub fn singular_mask(&self) -> Vec<bool> {
        let fold = self.reduced_height();
        let mut mask = vec![false; self.width * self.height];
        for ((x, y), g) in self.groups() {
            if g.is_none() {
                for i in 0..self.r {
                    mask[(y + i * fold) * self.width + x] = true;
                }
            }
        }
        mask
    }

    pub fn singular_groups(&self) -> Vec<(usize, usize)> {
        self.groups().filter(|(_, g)| g.is_none()).map(|(p, _)| p).collect()
    }

    fn check_input(&self, sub: &CoilStack) -> Result<()> {
        if sub.domain() != Domain::XSpace {
            return Err(Error::WrongDomain {
                expected: Domain::XSpace,
                found: sub.domain(),
            });
        }
        let want = (self.width, self.reduced_height());
        if sub.dims() != want || sub.coils() != self.coils {
            return Err(Error::dims(
                format!("{} coils of {}x{}", self.coils, want.0, want.1),
                format!("{} coils of {}x{}", sub.coils(), sub.dims().0, sub.dims().1),
            ));
        }
        Ok(())
    }

    /// Unfolds into a preallocated full-grid image; singular groups are 0.
    pub(crate) fn apply_into(&self, sub: &CoilStack, out: &mut ComplexImage, column: &mut [C64]) {
        let fold = self.reduced_height();
        for y in 0..fold {
            for x in 0..self.width {
                let k = y * self.width + x;
                for (c, img) in column.iter_mut().zip(sub.images()) {
                    *c = img.as_slice()[k];
                }
                match &self.groups[k] {
                    Some(g) => {
                        for i in 0..self.r {
                            let v: C64 = g.row(i).iter().zip(column.iter()).map(|(w, s)| w * s).sum();
                            out.set(x, y + i * fold, v);
                        }
                    }
                    None => {
                        for i in 0..self.r {
                            out.set(x, y + i * fold, C64::new(0.0, 0.0));
                        }
                    }
                }
            }
        }
    }

    pub fn apply(&self, sub: &CoilStack) -> Result<Reconstruction> {
        self.check_input(sub)?;
        let mut image = ComplexImage::zeros(self.width, self.height, Domain::XSpace);
        let mut column = vec![C64::new(0.0, 0.0); self.coils];
        self.apply_into(sub, &mut image, &mut column);
        Ok(Reconstruction {
            image,
            singular_mask: self.singular_mask(),
            singular_groups: self.singular_groups(),
        })
    }
}

/// Unfolded image plus the pixel groups that could not be unfolded.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: ComplexImage,
    pub singular_mask: Vec<bool>,
    /// Reduced-grid coordinates of singular groups.
    pub singular_groups: Vec<(usize, usize)>,
}

impl Reconstruction {
    /// Fails with the first singular group, if any.
    pub fn strict(self) -> Result<ComplexImage> {
        match self.singular_groups.first() {
            Some(&p) => Err(Error::SingularSystem { pixel: Some(p) }),
            None => Ok(self.image),
        }
    }
}

/// SENSE unfolding of aliased coil images `sub` (height `M_y / r`) with the
/// full-height sensitivities `sens`.
pub fn sense_unfold(
    sub: &CoilStack,
    sens: &SensitivityMap,
    r: usize,
    cov: Option<&CoilCovariance>,
) -> Result<Reconstruction> {
    let (w, h) = sens.dims();
    if r == 0 || h % r != 0 {
        return Err(Error::NotDivisible { size: h, factor: r });
    }
    if sub.dims() != (w, h / r) || sub.coils() != sens.coils() {
        return Err(Error::dims(
            format!("{} coils of {}x{}", sens.coils(), w, h / r),
            format!("{} coils of {}x{}", sub.coils(), sub.dims().0, sub.dims().1),
        ));
    }
    UnmixingField::build(sens, r, cov)?.apply(sub)
}

/// `sqrt(sum_l |S_l|^2)` per pixel.
pub fn sos_combine(stack: &CoilStack) -> RealImage {
    let (w, h) = stack.dims();
    let mut out = RealImage::zeros(w, h);
    for img in stack.images() {
        for (o, z) in out.as_mut_slice().iter_mut().zip(img.as_slice()) {
            *o += z.norm_sqr();
        }
    }
    out.map(f64::sqrt)
}
