//! Shared fixtures for the benchmarks.

use sense_noise::noise_analysis::scale_covariance;
use sense_noise::phantom::{synth_phantom, synth_sensitivity};
use sense_noise::sense::{apply_sensitivity, Acquisition};
use sense_noise::{CoilCovariance, CoilStack, PhantomKind, ScaleTag, Seed, SensitivityMap, SensitivityProfile};

pub const COILS: usize = 8;

pub struct Fixture {
    pub size: usize,
    pub r: usize,
    pub sens: SensitivityMap,
    /// Fully sampled x-space covariance.
    pub cov: CoilCovariance,
    /// The same covariance on the aliased grid.
    pub sub_cov: CoilCovariance,
    /// Aliased coil images of a noiseless Shepp-Logan phantom.
    pub aliased: CoilStack,
}

impl Fixture {
    pub fn new(size: usize, r: usize) -> Fixture {
        let sens = synth_sensitivity(COILS, size, size, SensitivityProfile::GaussianLobes, Seed(1)).unwrap();
        let cov = CoilCovariance::uniform_correlation(COILS, 100.0, 0.1, ScaleTag::XSpaceFull).unwrap();
        let sub_cov = scale_covariance(&cov, size * size, r).unwrap();
        let phantom = synth_phantom(size, size, PhantomKind::SheppLoganLike);
        let aliased = Acquisition::new(size, size, r)
            .unwrap()
            .stack(&apply_sensitivity(&phantom, &sens).unwrap())
            .unwrap();
        Fixture {
            size,
            r,
            sens,
            cov,
            sub_cov,
            aliased,
        }
    }
}
