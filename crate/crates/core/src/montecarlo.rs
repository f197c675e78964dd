//! Monte Carlo validation of the closed-form noise model.
//!
//! Three harnesses:
//!
//! * [`run_experiment1`]: two SENSE-like linear combinations of 8 correlated
//!   complex Gaussians, sample standard deviations and correlation against
//!   their closed forms;
//! * [`run_map_experiment`]: repeated noise-only acquisitions pushed through
//!   DFT, subsampling and unfolding; per-pixel Rayleigh variance estimates,
//!   line correlations and per-pixel KS tests against the analytic maps;
//! * [`run_ca_demo`]: conventional-approach bias removal on a noisy disk
//!   with the per-pixel variance map versus the best global variance.
//!
//! Iterations run in parallel in fixed-size batches with per-iteration seeds,
//! and batch results are merged in batch order, so a report depends only on
//! its configuration and seed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complex_linalg::C64;
use crate::dft::{ComplexImage, Domain, RealImage};
use crate::error::{Error, Result};
use crate::noise_analysis::{analyze, ca_denoise, scale_covariance, NoiseMaps, Weighting};
use crate::noise_sim::{sample_coil_noise, sample_coil_noise_into, CoilCovariance, CovarianceEcho, ScaleTag};
use crate::phantom::{Phantom, SensitivityMap};
use crate::rng::Seed;
use crate::sense::{apply_sensitivity, Acquisition, CoilStack, UnmixingField};

/// Iterations per parallel work item.
const BATCH: usize = 50;
/// Batches computed concurrently before merging.
const WAVE: usize = 16;

/// Asymptotic Kolmogorov-Smirnov critical coefficient at alpha = 0.01.
pub const KS_CRITICAL_001: f64 = 1.628;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub parameter: String,
    pub sample: f64,
    pub theoretical: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

impl Comparison {
    fn new(parameter: impl Into<String>, sample: f64, theoretical: f64) -> Self {
        let abs_error = (sample - theoretical).abs();
        Comparison {
            parameter: parameter.into(),
            sample,
            theoretical,
            abs_error,
            rel_error: abs_error / theoretical.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= tolerance`.
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    /// Passes when `value >= tolerance`.
    fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value >= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub coils: usize,
    pub width: usize,
    pub height: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r: Option<usize>,
    pub samples: usize,
    pub seed: u64,
    pub covariance: CovarianceEcho,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weighting: Option<Weighting>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sensitivity: Option<String>,
}

/// Sample-versus-theory report, serialized as JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    /// Combination weights drawn for the run (experiment 1).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weights: Option<Vec<Vec<f64>>>,
    pub comparisons: Vec<Comparison>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Files written alongside the report, by role.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn comparison(&self, parameter: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.parameter == parameter)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pearson correlation of complex samples, `cov(a, b) / (s_a s_b)` with the
/// second argument conjugated.
pub fn sample_correlation(a: &[C64], b: &[C64]) -> Result<C64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 samples, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma: C64 = a.iter().sum::<C64>() / n;
    let mb: C64 = b.iter().sum::<C64>() / n;
    let mut sab = C64::new(0.0, 0.0);
    let (mut saa, mut sbb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy.conj();
        saa += dx.norm_sqr();
        sbb += dy.norm_sqr();
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Per-component sample variance of complex samples.
fn component_variance(a: &[C64]) -> f64 {
    let n = a.len() as f64;
    let m: C64 = a.iter().sum::<C64>() / n;
    a.iter().map(|z| (z - m).norm_sqr()).sum::<f64>() / (2.0 * (n - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    pub statistic: f64,
    pub critical: f64,
    pub passed: bool,
}

/// One-sample KS test of magnitudes against Rayleigh(`sigma`),
/// `F(m) = 1 - exp(-m^2 / (2 sigma^2))`, at alpha = 0.01.
pub fn ks_rayleigh(magnitudes: &[f64], sigma: f64) -> Result<KsOutcome> {
    if magnitudes.is_empty() {
        return Err(Error::EmptyInput);
    }
    if magnitudes.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "KS test needs at least 10 samples, got {}",
            magnitudes.len()
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::BadScale(sigma));
    }
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let two_s2 = 2.0 * sigma * sigma;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let f = if m > 0.0 { -(-m * m / two_s2).exp_m1() } else { 0.0 };
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let critical = KS_CRITICAL_001 / n.sqrt();
    Ok(KsOutcome {
        statistic,
        critical,
        passed: statistic < critical,
    })
}

/// Runs `n_iter` iterations in fixed batches of [`BATCH`] and hands each
/// batch accumulator to `merge` in batch order.
fn run_batched<A, S>(
    n_iter: usize,
    init_acc: impl Fn() -> A + Sync,
    init_scratch: impl Fn() -> S + Sync,
    step: impl Fn(&mut A, &mut S, usize) -> Result<()> + Sync,
    mut merge: impl FnMut(A),
) -> Result<()>
where
    A: Send,
{
    let batches = n_iter.div_ceil(BATCH);
    let mut start = 0;
    while start < batches {
        let end = (start + WAVE).min(batches);
        let wave: Vec<Result<A>> = (start..end)
            .into_par_iter()
            .map(|b| {
                let mut acc = init_acc();
                let mut scratch = init_scratch();
                for it in b * BATCH..((b + 1) * BATCH).min(n_iter) {
                    step(&mut acc, &mut scratch, it)?;
                }
                Ok(acc)
            })
            .collect();
        for acc in wave {
            merge(acc?);
        }
        start = end;
    }
    Ok(())
}

/// Tolerances for [`run_experiment1`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exp1Tolerances {
    pub sigma_rel: f64,
    pub corr_abs: f64,
}

impl Default for Exp1Tolerances {
    fn default() -> Self {
        Exp1Tolerances {
            sigma_rel: 0.01,
            corr_abs: 0.01,
        }
    }
}

/// Unit-norm weights with entries uniform on `[0, 1]`.
fn draw_weights(seed: Seed, count: usize, len: usize) -> Vec<Vec<f64>> {
    let mut s = seed.stream(0);
    (0..count)
        .map(|_| {
            let w: Vec<f64> = (0..len).map(|_| s.uniform()).collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

pub const EXP1_VARIABLES: usize = 8;

/// Two SENSE-like combinations `y_i = W_i n` of `n` draws of 8 correlated
/// complex Gaussians with unit variance and pairwise correlation `rho`.
pub fn run_experiment1(n: usize, rho: f64, seed: Seed) -> Result<ExperimentReport> {
    run_experiment1_with(n, rho, seed, Exp1Tolerances::default())
}

pub fn run_experiment1_with(n: usize, rho: f64, seed: Seed, tol: Exp1Tolerances) -> Result<ExperimentReport> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("experiment 1 needs n >= 2, got {n}")));
    }
    let l = EXP1_VARIABLES;
    let cov = CoilCovariance::uniform_correlation(l, 1.0, rho, ScaleTag::XSpaceFull)?;
    let weights = draw_weights(seed.derive(0), 2, l);
    let noise = sample_coil_noise(&cov, n, 1, seed.derive(1))?;
    let combine = |w: &[f64]| -> Vec<C64> {
        (0..n)
            .map(|k| {
                w.iter()
                    .zip(noise.stack.images())
                    .map(|(wl, img)| img.as_slice()[k] * *wl)
                    .sum()
            })
            .collect()
    };
    let y: Vec<Vec<C64>> = weights.iter().map(|w| combine(w)).collect();

    let sigma = cov.matrix();
    let as_c = |w: &[f64]| -> Vec<C64> { w.iter().map(|&v| C64::new(v, 0.0)).collect() };
    let wc: Vec<Vec<C64>> = weights.iter().map(|w| as_c(w)).collect();
    let theory_var: Vec<f64> = wc.iter().map(|w| sigma.sesquilinear(w, w).re).collect();
    let theory_cov = sigma.sesquilinear(&wc[0], &wc[1]);
    let theory_rho = theory_cov / (theory_var[0] * theory_var[1]).sqrt();

    let sample_sd: Vec<f64> = y.iter().map(|v| component_variance(v).sqrt()).collect();
    let sample_rho = sample_correlation(&y[0], &y[1])?;

    let mut comparisons = Vec::new();
    let mut checks = Vec::new();
    for i in 0..2 {
        let c = Comparison::new(format!("sigma_{}", i + 1), sample_sd[i], theory_var[i].sqrt());
        checks.push(Check::at_most(format!("sigma_{}_rel_error", i + 1), c.rel_error, tol.sigma_rel));
        comparisons.push(c);
    }
    let rho_err = (sample_rho - theory_rho).norm();
    comparisons.push(Comparison {
        parameter: "rho_12".into(),
        sample: sample_rho.norm(),
        theoretical: theory_rho.norm(),
        abs_error: rho_err,
        rel_error: rho_err / theory_rho.norm(),
    });
    checks.push(Check::at_most("rho_12_abs_error", rho_err, tol.corr_abs));

    let mut metrics = BTreeMap::new();
    metrics.insert("input_correlation".into(), rho);
    metrics.insert("sample_rho_12_re".into(), sample_rho.re);
    metrics.insert("sample_rho_12_im".into(), sample_rho.im);

    Ok(ExperimentReport {
        experiment: "exp1".into(),
        config: ExperimentConfig {
            coils: l,
            width: n,
            height: 1,
            r: None,
            samples: n,
            seed: seed.0,
            covariance: cov.echo(),
            weighting: None,
            sensitivity: None,
        },
        weights: Some(weights),
        comparisons,
        metrics,
        checks,
        artifacts: BTreeMap::new(),
    })
}

/// Tolerances for [`run_map_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapTolerances {
    /// Median per-pixel relative variance error.
    pub median_rel: f64,
    /// Maximum per-pixel relative variance error.
    pub max_rel: f64,
    /// RMS error of the alias-pair correlation, and RMS magnitude of the
    /// correlation between pixels of different groups.
    pub corr_rms: f64,
    /// Minimum fraction of tracked pixels passing the Rayleigh KS test.
    pub ks_pass_fraction: f64,
}

impl Default for MapTolerances {
    fn default() -> Self {
        MapTolerances {
            median_rel: 0.02,
            max_rel: 0.08,
            corr_rms: 0.02,
            ks_pass_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapExperimentConfig {
    /// Covariance of the fully sampled x-space coil images.
    pub cov: CoilCovariance,
    pub r: usize,
    pub n_iter: usize,
    pub seed: Seed,
    pub weighting: Weighting,
    /// Pixels whose magnitudes are kept for the Rayleigh KS test.
    pub tracked_pixels: usize,
    pub tolerances: MapTolerances,
    /// Free-form description of the sensitivity source, echoed in the report.
    pub sensitivity_label: String,
}

impl MapExperimentConfig {
    pub fn new(cov: CoilCovariance, r: usize, n_iter: usize, seed: Seed) -> Self {
        MapExperimentConfig {
            cov,
            r,
            n_iter,
            seed,
            weighting: Weighting::default(),
            tracked_pixels: 20,
            tolerances: MapTolerances::default(),
            sensitivity_label: "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedPixel {
    pub x: usize,
    pub y: usize,
    pub sigma: f64,
    pub ks: KsOutcome,
}

/// Everything a map experiment produces; the report is the serializable part.
#[derive(Debug, Clone)]
pub struct MapExperiment {
    pub report: ExperimentReport,
    pub theory: NoiseMaps,
    pub estimated_variance: RealImage,
    /// `E{M^2}` per pixel, i.e. twice the estimated variance.
    pub second_moment: RealImage,
    /// Sample correlation of each pixel with `(x, y + M_y / r)`; zero for the
    /// last `M_y / r` rows, which have no such partner.
    pub alias_correlation: Vec<C64>,
    pub tracked: Vec<TrackedPixel>,
}

/// Sums needed for a complex Pearson coefficient, accumulated per pixel.
const PAIR_STRIDE: usize = 8; // re(ab*), im(ab*), |a|^2, |b|^2, re a, im a, re b, im b

fn pair_add(acc: &mut [f64], a: C64, b: C64) {
    let ab = a * b.conj();
    acc[0] += ab.re;
    acc[1] += ab.im;
    acc[2] += a.norm_sqr();
    acc[3] += b.norm_sqr();
    acc[4] += a.re;
    acc[5] += a.im;
    acc[6] += b.re;
    acc[7] += b.im;
}

fn pair_correlation(acc: &[f64], n: f64) -> C64 {
    let ma = C64::new(acc[4], acc[5]) / n;
    let mb = C64::new(acc[6], acc[7]) / n;
    let cab = C64::new(acc[0], acc[1]) / n - ma * mb.conj();
    let caa = acc[2] / n - ma.norm_sqr();
    let cbb = acc[3] / n - mb.norm_sqr();
    cab / (caa * cbb).sqrt()
}

/// Compensated running sum over batch results.
struct Accumulator {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl Accumulator {
    fn new(len: usize) -> Self {
        Accumulator {
            sum: vec![0.0; len],
            comp: vec![0.0; len],
        }
    }

    fn add(&mut self, batch: &[f64]) {
        for ((s, c), &v) in self.sum.iter_mut().zip(&mut self.comp).zip(batch) {
            let t = *s + v;
            if s.abs() >= v.abs() {
                *c += (*s - t) + v;
            } else {
                *c += (v - t) + *s;
            }
            *s = t;
        }
    }

    fn total(&self, i: usize) -> f64 {
        self.sum[i] + self.comp[i]
    }
}

struct MapBatch {
    /// Layout: [m2 (N) | alias pairs (N*8) | neighbour pairs (N*8)].
    sums: Vec<f64>,
    /// Magnitudes of the tracked pixels, in iteration order.
    tracked: Vec<Vec<f64>>,
}

struct Scratch {
    noise: CoilStack,
    recon: ComplexImage,
    column: Vec<C64>,
}

fn band_means(map: &RealImage, mask: &[bool]) -> (f64, f64, f64) {
    let h = map.height();
    let band = (h / 8).max(1);
    let half = (h / 16).max(1);
    let mid = h / 2;
    let top = map.mean_over_rows(0..band, Some(mask)).unwrap_or(f64::NAN);
    let center = map
        .mean_over_rows(mid.saturating_sub(half)..(mid + half).min(h), Some(mask))
        .unwrap_or(f64::NAN);
    let bottom = map.mean_over_rows(h - band..h, Some(mask)).unwrap_or(f64::NAN);
    (top, center, bottom)
}

fn min_max_masked(map: &RealImage, mask: &[bool]) -> (f64, f64) {
    map.as_slice()
        .iter()
        .zip(mask)
        .filter(|(_, m)| !**m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn choose_pixels(count: usize, mask: &[bool], width: usize, seed: Seed) -> Vec<(usize, usize)> {
    let candidates: Vec<usize> = (0..mask.len()).filter(|&k| !mask[k]).collect();
    let mut s = seed.stream(0);
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    while chosen.len() < count.min(candidates.len()) {
        let k = candidates[(s.uniform() * candidates.len() as f64) as usize];
        if !chosen.contains(&k) {
            chosen.push(k);
        }
    }
    chosen.into_iter().map(|k| (k % width, k / width)).collect()
}

/// Noise-only Monte Carlo reproduction of the variance-map experiments.
pub fn run_map_experiment(sens: &SensitivityMap, config: &MapExperimentConfig) -> Result<MapExperiment> {
    let (w, h) = sens.dims();
    let r = config.r;
    if config.n_iter < 2 {
        return Err(Error::InvalidArgument("map experiment needs at least 2 iterations".into()));
    }
    if config.cov.tag() != ScaleTag::XSpaceFull {
        return Err(Error::BadTag {
            expected: ScaleTag::XSpaceFull.to_string(),
            found: config.cov.tag().to_string(),
        });
    }
    if config.cov.coils() != sens.coils() {
        return Err(Error::dims(
            format!("{} coils (sensitivities)", sens.coils()),
            format!("{} coils (covariance)", config.cov.coils()),
        ));
    }
    let acquisition = Acquisition::new(w, h, r)?;
    let sub_cov = scale_covariance(&config.cov, w * h, r)?;
    let field = UnmixingField::build(sens, r, config.weighting.covariance(&sub_cov))?;
    let theory = analyze(sens, &sub_cov, r, config.weighting)?;
    let mask = theory.singular_mask.clone();
    let tracked_px = choose_pixels(config.tracked_pixels, &mask, w, config.seed.derive(u64::MAX));

    let npx = w * h;
    let fold = h / r;
    let len = npx * (1 + 2 * PAIR_STRIDE);
    let coils = sens.coils();

    let mut acc = Accumulator::new(len);
    let mut tracked_samples: Vec<Vec<f64>> = vec![Vec::with_capacity(config.n_iter); tracked_px.len()];
    run_batched(
        config.n_iter,
        || MapBatch {
            sums: vec![0.0; len],
            tracked: vec![Vec::new(); tracked_px.len()],
        },
        || Scratch {
            noise: CoilStack::zeros(coils, w, h, Domain::XSpace),
            recon: ComplexImage::zeros(w, h, Domain::XSpace),
            column: vec![C64::new(0.0, 0.0); coils],
        },
        |batch, s, it| {
            sample_coil_noise_into(&config.cov, config.seed.derive(it as u64), &mut s.noise);
            let sub = acquisition.stack(&s.noise)?;
            field.apply_into(&sub, &mut s.recon, &mut s.column);
            let img = s.recon.as_slice();
            let (m2, rest) = batch.sums.split_at_mut(npx);
            let (alias, neigh) = rest.split_at_mut(npx * PAIR_STRIDE);
            for (k, z) in img.iter().enumerate() {
                m2[k] += z.norm_sqr();
            }
            for k in 0..npx - fold * w {
                pair_add(&mut alias[k * PAIR_STRIDE..(k + 1) * PAIR_STRIDE], img[k], img[k + fold * w]);
            }
            for k in 0..npx {
                let partner = (k + w) % npx;
                pair_add(&mut neigh[k * PAIR_STRIDE..(k + 1) * PAIR_STRIDE], img[k], img[partner]);
            }
            for (samples, &(x, y)) in batch.tracked.iter_mut().zip(&tracked_px) {
                samples.push(img[y * w + x].norm());
            }
            Ok(())
        },
        |batch| {
            acc.add(&batch.sums);
            for (dst, src) in tracked_samples.iter_mut().zip(batch.tracked) {
                dst.extend(src);
            }
        },
    )?;
    let sums: Vec<f64> = (0..len).map(|i| acc.total(i)).collect();

    let n = config.n_iter as f64;
    let second_moment = RealImage::from_vec(w, h, sums[..npx].iter().map(|s| s / n).collect())?;
    let estimated_variance = second_moment.map(|m| 0.5 * m);

    let mut rel_errors: Vec<f64> = (0..npx)
        .filter(|&k| !mask[k])
        .map(|k| {
            let t = theory.variance.as_slice()[k];
            (estimated_variance.as_slice()[k] - t).abs() / t
        })
        .collect();
    rel_errors.sort_by(f64::total_cmp);

    let alias_sums = &sums[npx..npx * (1 + PAIR_STRIDE)];
    let neigh_sums = &sums[npx * (1 + PAIR_STRIDE)..];
    let mut alias_correlation = vec![C64::new(0.0, 0.0); npx];
    let (mut alias_sq, mut alias_max, mut alias_count) = (0.0, 0.0f64, 0usize);
    for k in 0..npx - fold * w {
        let (x, y) = (k % w, k / w);
        let rho_hat = pair_correlation(&alias_sums[k * PAIR_STRIDE..(k + 1) * PAIR_STRIDE], n);
        alias_correlation[k] = rho_hat;
        if mask[k] || mask[k + fold * w] {
            continue;
        }
        let rho = theory.correlation(x, y, y + fold).expect("non-singular group");
        let e = (rho_hat - rho).norm();
        alias_sq += e * e;
        alias_max = alias_max.max(e);
        alias_count += 1;
    }
    let (mut neigh_sq, mut neigh_max, mut neigh_count) = (0.0, 0.0f64, 0usize);
    if fold > 1 {
        for k in 0..npx {
            let partner = (k + w) % npx;
            if mask[k] || mask[partner] {
                continue;
            }
            let rho_hat = pair_correlation(&neigh_sums[k * PAIR_STRIDE..(k + 1) * PAIR_STRIDE], n);
            neigh_sq += rho_hat.norm_sqr();
            neigh_max = neigh_max.max(rho_hat.norm());
            neigh_count += 1;
        }
    }

    let tracked = tracked_px
        .iter()
        .zip(&tracked_samples)
        .map(|(&(x, y), samples)| {
            let sigma = theory.variance.get(x, y).sqrt();
            Ok(TrackedPixel {
                x,
                y,
                sigma,
                ks: ks_rayleigh(samples, sigma)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ks_passed = tracked.iter().filter(|t| t.ks.passed).count();

    let tol = config.tolerances;
    let mut metrics = BTreeMap::new();
    let median = percentile(&rel_errors, 0.5);
    let max_rel = rel_errors.last().copied().unwrap_or(f64::NAN);
    metrics.insert("variance_rel_error_median".into(), median);
    metrics.insert("variance_rel_error_p95".into(), percentile(&rel_errors, 0.95));
    metrics.insert("variance_rel_error_max".into(), max_rel);
    let (tmin, tmax) = min_max_masked(&theory.variance, &mask);
    metrics.insert("theory_variance_min".into(), tmin);
    metrics.insert("theory_variance_max".into(), tmax);
    let (emin, emax) = min_max_masked(&estimated_variance, &mask);
    metrics.insert("estimated_variance_min".into(), emin);
    metrics.insert("estimated_variance_max".into(), emax);
    let (tt, tc, tb) = band_means(&theory.variance, &mask);
    let (et, ec, eb) = band_means(&estimated_variance, &mask);
    metrics.insert("theory_band_top".into(), tt);
    metrics.insert("theory_band_center".into(), tc);
    metrics.insert("theory_band_bottom".into(), tb);
    metrics.insert("estimated_band_top".into(), et);
    metrics.insert("estimated_band_center".into(), ec);
    metrics.insert("estimated_band_bottom".into(), eb);
    let alias_rms = (alias_sq / alias_count.max(1) as f64).sqrt();
    let neigh_rms = (neigh_sq / neigh_count.max(1) as f64).sqrt();
    metrics.insert("alias_corr_rms_error".into(), alias_rms);
    metrics.insert("alias_corr_max_error".into(), alias_max);
    metrics.insert("cross_group_corr_rms".into(), neigh_rms);
    metrics.insert("cross_group_corr_max".into(), neigh_max);
    metrics.insert("singular_pixels".into(), mask.iter().filter(|m| **m).count() as f64);
    let (gmin, gmax) = min_max_masked(&theory.gmap, &mask);
    metrics.insert("gfactor_min".into(), gmin);
    metrics.insert("gfactor_max".into(), gmax);
    metrics.insert("ks_passed".into(), ks_passed as f64);
    metrics.insert("ks_tracked".into(), tracked.len() as f64);

    let mut checks = vec![
        Check::at_most("variance_rel_error_median", median, tol.median_rel),
        Check::at_most("variance_rel_error_max", max_rel, tol.max_rel),
    ];
    if r > 1 {
        checks.push(Check::at_most("alias_corr_rms_error", alias_rms, tol.corr_rms));
    }
    if fold > 1 {
        checks.push(Check::at_most("cross_group_corr_rms", neigh_rms, tol.corr_rms));
    }
    if !tracked.is_empty() {
        checks.push(Check::at_least(
            "ks_pass_fraction",
            ks_passed as f64 / tracked.len() as f64,
            tol.ks_pass_fraction,
        ));
    }

    let report = ExperimentReport {
        experiment: "exp-map".into(),
        config: ExperimentConfig {
            coils,
            width: w,
            height: h,
            r: Some(r),
            samples: config.n_iter,
            seed: config.seed.0,
            covariance: config.cov.echo(),
            weighting: Some(config.weighting),
            sensitivity: Some(config.sensitivity_label.clone()),
        },
        weights: None,
        comparisons: tracked
            .iter()
            .map(|t| {
                let est = estimated_variance.get(t.x, t.y);
                Comparison::new(format!("variance({},{})", t.x, t.y), est, t.sigma * t.sigma)
            })
            .collect(),
        metrics,
        checks,
        artifacts: BTreeMap::new(),
    };
    Ok(MapExperiment {
        report,
        theory,
        estimated_variance,
        second_moment,
        alias_correlation,
        tracked,
    })
}

#[derive(Debug, Clone)]
pub struct CaDemoConfig {
    /// Covariance of the fully sampled x-space coil images.
    pub cov: CoilCovariance,
    pub r: usize,
    /// Repetitions used to estimate `E{M^2}` per pixel.
    pub n_rep: usize,
    pub seed: Seed,
    pub weighting: Weighting,
    /// Number of global variances tried for the stationary baseline.
    pub grid_points: usize,
}

impl CaDemoConfig {
    pub fn new(cov: CoilCovariance, r: usize, n_rep: usize, seed: Seed) -> Self {
        CaDemoConfig {
            cov,
            r,
            n_rep,
            seed,
            weighting: Weighting::default(),
            grid_points: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaDemo {
    pub report: ExperimentReport,
    pub truth: RealImage,
    pub second_moment: RealImage,
    pub variance: RealImage,
    pub denoised_local: RealImage,
    pub denoised_global: RealImage,
    pub mae_local: f64,
    pub mae_global: f64,
    pub best_global_variance: f64,
}

fn mae(a: &RealImage, b: &RealImage, mask: &[bool]) -> f64 {
    let (sum, n) = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .zip(mask)
        .filter(|(_, m)| !**m)
        .fold((0.0, 0usize), |(s, n), ((x, y), _)| (s + (x - y).abs(), n + 1));
    sum / n.max(1) as f64
}

/// Bias removal on a noisy SENSE reconstruction of `phantom`: the per-pixel
/// analytic variance map against the best of `grid_points` global variances
/// spread over `[0.5 min, 1.5 max]` of that map.
pub fn run_ca_demo(sens: &SensitivityMap, phantom: &Phantom, config: &CaDemoConfig) -> Result<CaDemo> {
    let (w, h) = sens.dims();
    let r = config.r;
    if config.n_rep < 2 || config.grid_points < 2 {
        return Err(Error::InvalidArgument("CA demo needs n_rep >= 2 and grid_points >= 2".into()));
    }
    let acquisition = Acquisition::new(w, h, r)?;
    let sub_cov = scale_covariance(&config.cov, w * h, r)?;
    let field = UnmixingField::build(sens, r, config.weighting.covariance(&sub_cov))?;
    let theory = analyze(sens, &sub_cov, r, config.weighting)?;
    let mask = theory.singular_mask.clone();
    let signal = field.apply(&acquisition.stack(&apply_sensitivity(phantom, sens)?)?)?.image;
    let coils = sens.coils();
    let npx = w * h;

    let mut acc = Accumulator::new(npx);
    run_batched(
        config.n_rep,
        || vec![0.0; npx],
        || Scratch {
            noise: CoilStack::zeros(coils, w, h, Domain::XSpace),
            recon: ComplexImage::zeros(w, h, Domain::XSpace),
            column: vec![C64::new(0.0, 0.0); coils],
        },
        |m2, s, it| {
            sample_coil_noise_into(&config.cov, config.seed.derive(it as u64), &mut s.noise);
            let sub = acquisition.stack(&s.noise)?;
            field.apply_into(&sub, &mut s.recon, &mut s.column);
            for ((m, z), a) in m2.iter_mut().zip(s.recon.as_slice()).zip(signal.as_slice()) {
                *m += (z + a).norm_sqr();
            }
            Ok(())
        },
        |m2| acc.add(&m2),
    )?;
    let n = config.n_rep as f64;
    let second_moment = RealImage::from_vec(w, h, (0..npx).map(|k| acc.total(k) / n).collect())?;
    let truth = phantom.image.magnitude();
    let variance = theory.variance.clone();

    let denoised_local = ca_denoise(&second_moment, &variance)?;
    let mae_local = mae(&denoised_local, &truth, &mask);

    let (vmin, vmax) = min_max_masked(&variance, &mask);
    let (lo, hi) = (0.5 * vmin, 1.5 * vmax);
    let mut best = (f64::INFINITY, f64::NAN);
    for i in 0..config.grid_points {
        let s2 = lo + (hi - lo) * i as f64 / (config.grid_points - 1) as f64;
        let est = ca_denoise(&second_moment, &RealImage::filled(w, h, s2))?;
        let e = mae(&est, &truth, &mask);
        if e < best.0 {
            best = (e, s2);
        }
    }
    let (mae_global, best_global_variance) = best;
    let denoised_global = ca_denoise(&second_moment, &RealImage::filled(w, h, best_global_variance))?;
    let mae_raw = mae(&second_moment.map(f64::sqrt), &truth, &mask);

    let mut metrics = BTreeMap::new();
    metrics.insert("mae_local_variance".into(), mae_local);
    metrics.insert("mae_best_global_variance".into(), mae_global);
    metrics.insert("mae_no_correction".into(), mae_raw);
    metrics.insert("best_global_variance".into(), best_global_variance);
    metrics.insert("variance_min".into(), vmin);
    metrics.insert("variance_max".into(), vmax);
    let report = ExperimentReport {
        experiment: "ca-demo".into(),
        config: ExperimentConfig {
            coils,
            width: w,
            height: h,
            r: Some(r),
            samples: config.n_rep,
            seed: config.seed.0,
            covariance: config.cov.echo(),
            weighting: Some(config.weighting),
            sensitivity: None,
        },
        weights: None,
        comparisons: vec![Comparison::new("mae", mae_local, mae_global)],
        metrics,
        checks: vec![Check::at_most("local_beats_global", mae_local - mae_global, 0.0)],
        artifacts: BTreeMap::new(),
    };
    Ok(CaDemo {
        report,
        truth,
        second_moment,
        variance,
        denoised_local,
        denoised_global,
        mae_local,
        mae_global,
        best_global_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{synth_sensitivity, SensitivityProfile};

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn correlation_of_identical_and_negated() {
        let a: Vec<C64> = (0..50).map(|k| C64::new((k as f64).sin(), (k as f64 * 0.3).cos())).collect();
        let neg: Vec<C64> = a.iter().map(|z| -z).collect();
        assert!((sample_correlation(&a, &a).unwrap() - c(1.0)).norm() < 1e-12);
        assert!((sample_correlation(&a, &neg).unwrap() - c(-1.0)).norm() < 1e-12);
    }

    #[test]
    fn correlation_errors() {
        let a = vec![c(1.0), c(2.0)];
        assert!(matches!(sample_correlation(&a, &a[..1]), Err(Error::LengthMismatch(2, 1))));
        assert!(matches!(sample_correlation(&[c(1.0), c(1.0)], &a), Err(Error::ZeroVariance)));
    }

    #[test]
    fn independent_streams_are_uncorrelated() {
        let mut s1 = Seed(1).stream(0);
        let mut s2 = Seed(2).stream(0);
        let n = 100_000;
        let draw = |s: &mut crate::rng::NormalStream| {
            (0..n)
                .map(|_| {
                    let (a, b) = s.normal_pair();
                    C64::new(a, b)
                })
                .collect::<Vec<_>>()
        };
        let (a, b) = (draw(&mut s1), draw(&mut s2));
        assert!(sample_correlation(&a, &b).unwrap().norm() < 4.0 / (n as f64).sqrt());
    }

    fn rayleigh(seed: u64, n: usize, sigma: f64) -> Vec<f64> {
        let mut s = Seed(seed).stream(0);
        (0..n)
            .map(|_| {
                let (a, b) = s.normal_pair();
                sigma * (a * a + b * b).sqrt()
            })
            .collect()
    }

    #[test]
    fn ks_accepts_rayleigh_samples() {
        let passes = (0..100)
            .filter(|&t| ks_rayleigh(&rayleigh(t, 10_000, 2.5), 2.5).unwrap().passed)
            .count();
        assert!(passes >= 98, "{passes}/100");
    }

    #[test]
    fn ks_rejects_uniform_samples() {
        let mut s = Seed(4).stream(0);
        let u: Vec<f64> = (0..1000).map(|_| s.uniform()).collect();
        assert!(!ks_rayleigh(&u, 1.0).unwrap().passed);
    }

    #[test]
    fn ks_rejects_wrong_scale_and_bad_input() {
        assert!(!ks_rayleigh(&rayleigh(9, 5000, 1.0), 1.2).unwrap().passed);
        assert!(matches!(ks_rayleigh(&[], 1.0), Err(Error::EmptyInput)));
        assert!(matches!(ks_rayleigh(&[1.0; 20], 0.0), Err(Error::BadScale(_))));
        assert!(ks_rayleigh(&[1.0; 5], 1.0).is_err());
    }

    #[test]
    fn experiment1_uncorrelated_theory_is_unit() {
        let rep = run_experiment1(20_000, 0.0, Seed(3)).unwrap();
        for p in ["sigma_1", "sigma_2"] {
            let c = rep.comparison(p).unwrap();
            assert!((c.theoretical - 1.0).abs() < 1e-12);
        }
        let w = rep.weights.as_ref().unwrap();
        assert_eq!(w.len(), 2);
        for wi in w {
            assert!(wi.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((wi.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let dot: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum();
        assert!((rep.comparison("rho_12").unwrap().theoretical - dot).abs() < 1e-12);
    }

    #[test]
    fn experiment1_is_deterministic() {
        let a = run_experiment1(5_000, 0.2, Seed(8)).unwrap();
        let b = run_experiment1(5_000, 0.2, Seed(8)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(run_experiment1(1, 0.0, Seed(8)).is_err());
    }

    #[test]
    fn map_experiment_small_grid() {
        let sens = synth_sensitivity(4, 16, 16, SensitivityProfile::GaussianLobes, Seed(2)).unwrap();
        let cov = CoilCovariance::scaled_identity(4, 10.0, ScaleTag::XSpaceFull).unwrap();
        let mut cfg = MapExperimentConfig::new(cov, 2, 400, Seed(5));
        cfg.tracked_pixels = 5;
        let out = run_map_experiment(&sens, &cfg).unwrap();
        assert_eq!(out.tracked.len(), 5);
        // 400 iterations: relative SE 5%, so only a loose sanity bound here
        assert!(out.report.metric("variance_rel_error_median").unwrap() < 0.1);
        let again = run_map_experiment(&sens, &cfg).unwrap();
        assert_eq!(out.report.to_json(), again.report.to_json());
    }

    #[test]
    fn map_experiment_rejects_wrong_tag() {
        let sens = synth_sensitivity(4, 8, 8, SensitivityProfile::GaussianLobes, Seed(2)).unwrap();
        let cov = CoilCovariance::scaled_identity(4, 10.0, ScaleTag::XSpaceSubsampled(2)).unwrap();
        let cfg = MapExperimentConfig::new(cov, 2, 10, Seed(5));
        assert!(matches!(run_map_experiment(&sens, &cfg), Err(Error::BadTag { .. })));
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&v, 0.5), 2.5);
    }
}
