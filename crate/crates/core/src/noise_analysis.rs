//! Closed-form noise statistics of SENSE reconstructions.
//!
//! A reconstructed pixel is `W_i s` with `s` the vector of aliased coil
//! samples, whose per-component covariance is `S`. Lines unfolded from the
//! same group therefore have covariance `W_i S W_j^H`; the diagonal gives the
//! variance map and the normalized off-diagonal the correlation between the
//! `r` co-reconstructed lines. Everything is per component.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex_linalg::{CMatrix, C64};
use crate::dft::RealImage;
use crate::error::{Error, Result};
use crate::noise_sim::{CoilCovariance, ScaleTag};
use crate::phantom::SensitivityMap;
use crate::sense::{aliased_sensitivities, factor_gram, gram, UnmixingField};

/// Which covariance goes into the unmixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `W = (C^H C)^-1 C^H`.
    Unweighted,
    /// `W = (C^H S^-1 C)^-1 C^H S^-1` with the noise covariance `S`.
    #[default]
    NoiseCovariance,
}

impl Weighting {
    pub fn covariance<'a>(&self, noise: &'a CoilCovariance) -> Option<&'a CoilCovariance> {
        match self {
            Weighting::Unweighted => None,
            Weighting::NoiseCovariance => Some(noise),
        }
    }

    pub fn unmixing(&self, sens: &SensitivityMap, r: usize, noise: &CoilCovariance) -> Result<UnmixingField> {
        UnmixingField::build(sens, r, self.covariance(noise))
    }
}

/// Rescales a full-grid covariance to the aliased x-space grid seen by the
/// unfolding step: `r / |Omega|` from k-space, `r` from x-space.
pub fn scale_covariance(cov: &CoilCovariance, omega: usize, r: usize) -> Result<CoilCovariance> {
    if r == 0 {
        return Err(Error::InvalidArgument("subsampling factor must be >= 1".into()));
    }
    let factor = match cov.tag() {
        ScaleTag::KSpaceFull => {
            if omega == 0 {
                return Err(Error::InvalidArgument("grid size must be positive".into()));
            }
            r as f64 / omega as f64
        }
        ScaleTag::XSpaceFull => r as f64,
        other => {
            return Err(Error::BadTag {
                expected: "k-space (full) or x-space (full)".into(),
                found: other.to_string(),
            })
        }
    };
    cov.rescaled(factor, ScaleTag::XSpaceSubsampled(r))
}

fn expect_subsampled(cov: &CoilCovariance, r: usize) -> Result<()> {
    if cov.tag() != ScaleTag::XSpaceSubsampled(r) {
        return Err(Error::BadTag {
            expected: ScaleTag::XSpaceSubsampled(r).to_string(),
            found: cov.tag().to_string(),
        });
    }
    Ok(())
}

/// `W S W^H` for every pixel group of an unmixing field (`None` where the
/// group is singular), indexed like the reduced grid.
pub fn group_covariances(field: &UnmixingField, cov: &CoilCovariance) -> Result<Vec<Option<CMatrix>>> {
    if cov.coils() != field.coils() {
        return Err(Error::dims(
            format!("{} coils", field.coils()),
            format!("{} coils (covariance)", cov.coils()),
        ));
    }
    let sigma = cov.matrix();
    let groups: Vec<_> = field.groups().map(|(_, g)| g).collect();
    Ok(groups
        .into_par_iter()
        .map(|g| {
            g.map(|g| {
                let r = g.r;
                CMatrix::from_fn(r, r, |i, j| sigma.sesquilinear(g.row(i), g.row(j)))
            })
        })
        .collect())
}

/// Second-order noise description of one reconstruction setup.
#[derive(Debug, Clone)]
pub struct NoiseMaps {
    pub r: usize,
    /// Per-pixel variance over the full grid; 0 on the singular mask.
    pub variance: RealImage,
    /// `r x r` correlation matrix of each reduced-grid pixel group, row-major
    /// over the reduced grid; `None` for singular groups.
    pub line_corr: Vec<Option<CMatrix>>,
    pub gmap: RealImage,
    pub singular_mask: Vec<bool>,
}

impl NoiseMaps {
    /// Reduced-grid width and height.
    fn reduced(&self) -> (usize, usize) {
        (self.variance.width(), self.variance.height() / self.r)
    }

    /// Correlation between full-grid pixels `(x, y)` and `(x, y2)`; zero when
    /// they belong to different pixel groups.
    pub fn correlation(&self, x: usize, y: usize, y2: usize) -> Option<C64> {
        let (w, fold) = self.reduced();
        if y % fold != y2 % fold {
            return Some(C64::new(0.0, 0.0));
        }
        let k = (y % fold) * w + x;
        self.line_corr[k]
            .as_ref()
            .map(|m| m[(y / fold, y2 / fold)])
    }

    /// Modulus of the correlation of each pixel with the next line of its
    /// group (`y + M_y / r`, wrapping); 1 everywhere when `r == 1`.
    pub fn neighbour_correlation_modulus(&self) -> RealImage {
        let (w, h) = self.variance.dims();
        let fold = h / self.r;
        RealImage::from_fn(w, h, |x, y| {
            let partner = (y + fold) % h;
            self.correlation(x, y, partner).map_or(0.0, |z| z.norm())
        })
    }

    pub fn std_dev(&self) -> RealImage {
        self.variance.map(f64::sqrt)
    }
}

fn scatter_variance(field: &UnmixingField, covs: &[Option<CMatrix>]) -> RealImage {
    let (w, h) = field.dims();
    let fold = field.reduced_height();
    let mut variance = RealImage::zeros(w, h);
    for (k, g) in covs.iter().enumerate() {
        if let Some(m) = g {
            let (x, y) = (k % w, k / w);
            for i in 0..field.r() {
                variance.set(x, y + i * fold, m[(i, i)].re);
            }
        }
    }
    variance
}

fn to_correlation(m: &CMatrix) -> CMatrix {
    let n = m.rows();
    CMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(1.0, 0.0)
        } else {
            m[(i, j)] / (m[(i, i)].re * m[(j, j)].re).sqrt()
        }
    })
}

/// Per-pixel variance `W_i S W_i^H`. `cov` is the covariance of the aliased
/// coil images (tag `XSpaceSubsampled(r)`).
pub fn variance_map(
    sens: &SensitivityMap,
    cov: &CoilCovariance,
    r: usize,
    weighting: Weighting,
) -> Result<NoiseMaps> {
    expect_subsampled(cov, r)?;
    let field = weighting.unmixing(sens, r, cov)?;
    let covs = group_covariances(&field, cov)?;
    let (w, h) = field.dims();
    Ok(NoiseMaps {
        r,
        variance: scatter_variance(&field, &covs),
        line_corr: Vec::new(),
        gmap: RealImage::zeros(w, h),
        singular_mask: field.singular_mask(),
    })
}

/// Covariances `W_i S W_j^H` between the co-reconstructed lines of every
/// pixel group.
pub fn line_covariance(
    sens: &SensitivityMap,
    cov: &CoilCovariance,
    r: usize,
    weighting: Weighting,
) -> Result<Vec<Option<CMatrix>>> {
    expect_subsampled(cov, r)?;
    let field = weighting.unmixing(sens, r, cov)?;
    group_covariances(&field, cov)
}

/// Correlation coefficients between co-reconstructed lines.
pub fn correlation_map(
    sens: &SensitivityMap,
    cov: &CoilCovariance,
    r: usize,
    weighting: Weighting,
) -> Result<Vec<Option<CMatrix>>> {
    Ok(line_covariance(sens, cov, r, weighting)?
        .iter()
        .map(|g| g.as_ref().map(to_correlation))
        .collect())
}

/// `g = sqrt([(C^H S^-1 C)^-1]_ii [C^H S^-1 C]_ii)` per pixel; 0 on singular
/// groups. Any scaling of `S` cancels, so the tag is not checked.
pub fn gfactor_map(sens: &SensitivityMap, cov: &CoilCovariance, r: usize) -> Result<(RealImage, Vec<bool>)> {
    let (w, h) = sens.dims();
    if r == 0 || h % r != 0 {
        return Err(Error::NotDivisible { size: h, factor: r });
    }
    if cov.coils() != sens.coils() {
        return Err(Error::dims(
            format!("{} coils", sens.coils()),
            format!("{} coils (covariance)", cov.coils()),
        ));
    }
    if r > sens.coils() {
        return Err(Error::InvalidArgument(format!(
            "subsampling factor {r} exceeds the coil count {}",
            sens.coils()
        )));
    }
    let fold = h / r;
    let noise = cov.cholesky();
    let groups: Vec<Option<Vec<f64>>> = (0..w * fold)
        .into_par_iter()
        .map(|k| {
            let c = aliased_sensitivities(sens, r, k % w, k / w);
            let (g, _) = gram(&c, Some(noise));
            let chol = factor_gram(&g).ok()?;
            let inv = chol.inverse_diagonal();
            Some((0..r).map(|i| (inv[i] * g[(i, i)].re).sqrt()).collect())
        })
        .collect();
    let mut gmap = RealImage::zeros(w, h);
    let mut mask = vec![false; w * h];
    for (k, g) in groups.iter().enumerate() {
        let (x, y) = (k % w, k / w);
        for i in 0..r {
            match g {
                Some(v) => gmap.set(x, y + i * fold, v[i]),
                None => mask[(y + i * fold) * w + x] = true,
            }
        }
    }
    Ok((gmap, mask))
}

/// Variance, line correlations and g-factor in one pass.
pub fn analyze(
    sens: &SensitivityMap,
    cov: &CoilCovariance,
    r: usize,
    weighting: Weighting,
) -> Result<NoiseMaps> {
    expect_subsampled(cov, r)?;
    let field = weighting.unmixing(sens, r, cov)?;
    let covs = group_covariances(&field, cov)?;
    let (gmap, gmask) = gfactor_map(sens, cov, r)?;
    let mut singular_mask = field.singular_mask();
    for (m, g) in singular_mask.iter_mut().zip(gmask) {
        *m |= g;
    }
    Ok(NoiseMaps {
        r,
        variance: scatter_variance(&field, &covs),
        line_corr: covs.iter().map(|g| g.as_ref().map(to_correlation)).collect(),
        gmap,
        singular_mask,
    })
}

/// `E{M^2} / 2`, the Rayleigh second-moment estimate of the per-component
/// variance.
pub fn rayleigh_sigma_estimate(magnitudes: &[f64]) -> Result<f64> {
    if magnitudes.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(m) = magnitudes.iter().find(|m| !(**m >= 0.0)) {
        return Err(Error::InvalidArgument(format!("magnitude {m} is negative or NaN")));
    }
    let mean_sq = magnitudes.iter().map(|m| m * m).sum::<f64>() / magnitudes.len() as f64;
    Ok(0.5 * mean_sq)
}

/// Conventional-approach Rician bias removal with a per-pixel noise
/// variance: `sqrt(max(0, E{M^2} - 2 sigma^2(x)))`.
pub fn ca_denoise(second_moment: &RealImage, variance: &RealImage) -> Result<RealImage> {
    if second_moment.dims() != variance.dims() {
        return Err(Error::dims(
            format!("{:?} (second moment)", second_moment.dims()),
            format!("{:?} (variance)", variance.dims()),
        ));
    }
    let (w, h) = second_moment.dims();
    let data = second_moment
        .as_slice()
        .iter()
        .zip(variance.as_slice())
        .map(|(m2, s2)| (m2 - 2.0 * s2).max(0.0).sqrt())
        .collect();
    RealImage::from_vec(w, h, data)
}
