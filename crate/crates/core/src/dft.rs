//! 2-D DFTs, phase-encode subsampling and the replica-sum aliasing model.
//!
//! Normalization: the forward transform is unscaled and the inverse is
//! scaled by `1/N`, `N` being the number of points of the grid it is applied
//! to. With this choice white k-space noise of per-component variance
//! `s2` becomes x-space noise of variance `s2 / N`, and inverse transforming
//! k-space subsampled by `r` reproduces the sum of the `r` aliased replicas
//! with no extra factor.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::complex_linalg::C64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    KSpace,
    XSpace,
}

/// Complex 2-D grid, row-major; `y` (rows) is the phase-encode direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    width: usize,
    height: usize,
    data: Vec<C64>,
    domain: Domain,
}

impl ComplexImage {
    pub fn zeros(width: usize, height: usize, domain: Domain) -> Self {
        ComplexImage {
            width,
            height,
            data: vec![C64::new(0.0, 0.0); width * height],
            domain,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<C64>, domain: Domain) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(
                format!("{} samples for {width}x{height}", width * height),
                format!("{} samples", data.len()),
            ));
        }
        Ok(ComplexImage {
            width,
            height,
            data,
            domain,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        domain: Domain,
        mut f: impl FnMut(usize, usize) -> C64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ComplexImage {
            width,
            height,
            data,
            domain,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> C64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: C64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn row(&self, y: usize) -> &[C64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn magnitude(&self) -> RealImage {
        RealImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ComplexImage) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn expect_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::WrongDomain {
                expected,
                found: self.domain,
            });
        }
        Ok(())
    }
}

/// Real-valued 2-D map (magnitudes, variances, g-factors, ...), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        RealImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(
                format!("{} values for {width}x{height}", width * height),
                format!("{} values", data.len()),
            ));
        }
        Ok(RealImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        RealImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealImage {
        RealImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Mean over the rows in `rows`, skipping pixels where `skip` is true.
    pub fn mean_over_rows(
        &self,
        rows: std::ops::Range<usize>,
        skip: Option<&[bool]>,
    ) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in rows {
            for x in 0..self.width {
                let k = y * self.width + x;
                if skip.is_some_and(|m| m[k]) {
                    continue;
                }
                sum += self.data[k];
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }
}

/// Forward/inverse plans for one grid size.
#[derive(Clone)]
pub struct Fft2 {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn check(&self, img: &ComplexImage) -> Result<()> {
        if img.dims() != (self.width, self.height) {
            return Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", img.width, img.height),
            ));
        }
        Ok(())
    }

    fn transform(&self, data: &mut [C64], forward: bool) {
        let (rows, cols) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        if self.width == 0 || self.height == 0 {
            return;
        }
        rows.process(data);
        let mut column = vec![C64::new(0.0, 0.0); self.height];
        for x in 0..self.width {
            for (y, c) in column.iter_mut().enumerate() {
                *c = data[y * self.width + x];
            }
            cols.process(&mut column);
            for (y, c) in column.iter().enumerate() {
                data[y * self.width + x] = *c;
            }
        }
    }

    pub fn forward(&self, img: &ComplexImage) -> Result<ComplexImage> {
        img.expect_domain(Domain::XSpace)?;
        self.check(img)?;
        let mut out = img.clone();
        self.transform(&mut out.data, true);
        out.domain = Domain::KSpace;
        Ok(out)
    }

    pub fn inverse(&self, ksp: &ComplexImage) -> Result<ComplexImage> {
        ksp.expect_domain(Domain::KSpace)?;
        self.check(ksp)?;
        let mut out = ksp.clone();
        self.transform(&mut out.data, false);
        let scale = 1.0 / out.data.len() as f64;
        for z in &mut out.data {
            *z *= scale;
        }
        out.domain = Domain::XSpace;
        Ok(out)
    }
}

/// Unnormalized forward 2-D DFT.
pub fn dft2(img: &ComplexImage) -> Result<ComplexImage> {
    Fft2::new(img.width, img.height).forward(img)
}

/// Inverse 2-D DFT scaled by `1/N`.
pub fn idft2(ksp: &ComplexImage) -> Result<ComplexImage> {
    Fft2::new(ksp.width, ksp.height).inverse(ksp)
}

fn check_factor(height: usize, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidArgument("subsampling factor must be >= 1".into()));
    }
    if height % r != 0 {
        return Err(Error::NotDivisible {
            size: height,
            factor: r,
        });
    }
    Ok(())
}

/// Keeps phase-encode rows `0, r, 2r, ...`.
pub fn subsample_phase_encode(ksp: &ComplexImage, r: usize) -> Result<ComplexImage> {
    ksp.expect_domain(Domain::KSpace)?;
    check_factor(ksp.height, r)?;
    let height = ksp.height / r;
    let mut data = Vec::with_capacity(ksp.width * height);
    for y in (0..ksp.height).step_by(r) {
        data.extend_from_slice(ksp.row(y));
    }
    ComplexImage::from_vec(ksp.width, height, data, Domain::KSpace)
}

/// Replica sum `out(x, y) = sum_i img(x, y + i*M_y/r)`, height `M_y/r`.
pub fn alias_oracle(img: &ComplexImage, r: usize) -> Result<ComplexImage> {
    img.expect_domain(Domain::XSpace)?;
    check_factor(img.height, r)?;
    let h = img.height / r;
    Ok(ComplexImage::from_fn(img.width, h, Domain::XSpace, |x, y| {
        (0..r).map(|i| img.get(x, y + i * h)).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;

    fn random_image(w: usize, h: usize, seed: u64) -> ComplexImage {
        let mut s = Seed(seed).stream(0);
        ComplexImage::from_fn(w, h, Domain::XSpace, |_, _| {
            let (a, b) = s.normal_pair();
            C64::new(a, b)
        })
    }

    #[test]
    fn constant_image_has_only_dc() {
        let c = C64::new(1.5, -0.5);
        let img = ComplexImage::from_fn(8, 4, Domain::XSpace, |_, _| c);
        let k = dft2(&img).unwrap();
        assert!((k.get(0, 0) - c * 32.0).norm() < 1e-12);
        for (i, z) in k.as_slice().iter().enumerate().skip(1) {
            assert!(z.norm() < 1e-12, "bin {i} = {z}");
        }
    }

    #[test]
    fn dc_only_kspace_gives_constant() {
        let mut k = ComplexImage::zeros(4, 8, Domain::KSpace);
        k.set(0, 0, C64::new(3.0 * 32.0, 0.0));
        let img = idft2(&k).unwrap();
        for z in img.as_slice() {
            assert!((z - C64::new(3.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trips() {
        let x = random_image(16, 8, 1);
        let back = idft2(&dft2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) / x.norm() < 1e-12);

        let mut k = random_image(16, 8, 2);
        k.domain = Domain::KSpace;
        let back = dft2(&idft2(&k).unwrap()).unwrap();
        assert!(back.max_abs_diff(&k) / k.norm() < 1e-12);
    }

    #[test]
    fn parseval() {
        let x = random_image(12, 10, 3);
        let k = dft2(&x).unwrap();
        let ex: f64 = x.as_slice().iter().map(|z| z.norm_sqr()).sum();
        let ek: f64 = k.as_slice().iter().map(|z| z.norm_sqr()).sum();
        assert!((ex - ek / 120.0).abs() / ex < 1e-10);
    }

    #[test]
    fn wrong_domain_is_rejected() {
        let x = random_image(4, 4, 4);
        assert!(matches!(idft2(&x), Err(Error::WrongDomain { .. })));
        let k = dft2(&x).unwrap();
        assert!(matches!(dft2(&k), Err(Error::WrongDomain { .. })));
        assert!(matches!(alias_oracle(&k, 2), Err(Error::WrongDomain { .. })));
    }

    #[test]
    fn subsample_bookkeeping() {
        let k = ComplexImage::from_fn(4, 4, Domain::KSpace, |x, y| C64::new(x as f64, y as f64));
        assert_eq!(subsample_phase_encode(&k, 1).unwrap(), k);
        let s = subsample_phase_encode(&k, 2).unwrap();
        assert_eq!(s.dims(), (4, 2));
        assert_eq!(s.row(0), k.row(0));
        assert_eq!(s.row(1), k.row(2));
        assert!(matches!(
            subsample_phase_encode(&k, 3),
            Err(Error::NotDivisible { size: 4, factor: 3 })
        ));
    }

    #[test]
    fn alias_oracle_half_planes() {
        let (a, b) = (C64::new(1.0, 2.0), C64::new(-0.5, 0.25));
        let img = ComplexImage::from_fn(6, 8, Domain::XSpace, |_, y| if y < 4 { a } else { b });
        let out = alias_oracle(&img, 2).unwrap();
        assert_eq!(out.dims(), (6, 4));
        for z in out.as_slice() {
            assert!((z - (a + b)).norm() < 1e-15);
        }
        assert_eq!(alias_oracle(&img, 1).unwrap(), img);
        assert!(matches!(alias_oracle(&img, 3), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn alias_oracle_matches_subsampled_transform() {
        for (seed, r) in [(5, 2), (6, 4), (7, 8)] {
            let img = random_image(16, 32, seed);
            let via_k = idft2(&subsample_phase_encode(&dft2(&img).unwrap(), r).unwrap()).unwrap();
            let oracle = alias_oracle(&img, r).unwrap();
            assert!(via_k.max_abs_diff(&oracle) < 1e-10);
        }
    }

    #[test]
    fn mean_over_rows_skips_masked() {
        let img = RealImage::from_fn(2, 3, |x, y| (x + 10 * y) as f64);
        assert_eq!(img.mean_over_rows(0..1, None), Some(0.5));
        let mask = vec![false, true, false, false, false, false];
        assert_eq!(img.mean_over_rows(0..1, Some(&mask)), Some(0.0));
        assert_eq!(img.mean_over_rows(0..0, None), None);
    }
}
