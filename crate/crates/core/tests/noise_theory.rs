use sense_noise::dft::subsample_phase_encode;
use sense_noise::montecarlo::{run_ca_demo, run_experiment1, CaDemoConfig};
use sense_noise::noise_analysis::{analyze, gfactor_map, scale_covariance, variance_map};
use sense_noise::noise_sim::sample_coil_noise;
use sense_noise::phantom::{synth_phantom, synth_sensitivity};
use sense_noise::{
    dft, CMatrix, CoilCovariance, ComplexImage, Domain, PhantomKind, ScaleTag, Seed, SensitivityMap,
    SensitivityProfile, UnmixingField, Weighting, C64,
};

fn lobes(coils: usize, w: usize, h: usize) -> SensitivityMap {
    synth_sensitivity(coils, w, h, SensitivityProfile::GaussianLobes, Seed(11)).unwrap()
}

fn row_norm_sq(row: &[C64]) -> f64 {
    row.iter().map(|z| z.norm_sqr()).sum()
}

#[test]
fn subsampled_white_noise_variance_law() {
    let (w, h, var_k) = (64, 64, 3.0);
    let cov = CoilCovariance::scaled_identity(1, var_k, ScaleTag::KSpaceFull).unwrap();
    for r in [1usize, 2, 4] {
        let per_draw = w * h / r;
        let draws = 100_000usize.div_ceil(per_draw);
        let (mut sum_sq, mut count) = (0.0, 0usize);
        for d in 0..draws {
            let noise = sample_coil_noise(&cov, w, h, Seed(40 + r as u64).derive(d as u64)).unwrap();
            let k = ComplexImage::from_vec(w, h, noise.stack.image(0).as_slice().to_vec(), Domain::KSpace).unwrap();
            let x = dft::idft2(&subsample_phase_encode(&k, r).unwrap()).unwrap();
            for z in x.as_slice() {
                sum_sq += z.re * z.re + z.im * z.im;
                count += 1;
            }
        }
        assert!(count >= 100_000);
        let measured = sum_sq / (2 * count) as f64;
        let expected = r as f64 * var_k / (w * h) as f64;
        assert!(
            (measured / expected - 1.0).abs() < 0.05,
            "r={r}: {measured} vs {expected}"
        );
    }
}

#[test]
fn scalar_covariance_identities() {
    let (w, h, r, var_full) = (32, 32, 2, 5.0);
    let sens = lobes(8, w, h);
    assert!(sens.is_normalized());
    let full = CoilCovariance::scaled_identity(8, var_full, ScaleTag::XSpaceFull).unwrap();
    let sub = scale_covariance(&full, w * h, r).unwrap();
    let var_sub = r as f64 * var_full;

    let maps = analyze(&sens, &sub, r, Weighting::NoiseCovariance).unwrap();
    let plain = variance_map(&sens, &sub, r, Weighting::Unweighted).unwrap();
    let field = UnmixingField::build(&sens, r, None).unwrap();
    let fold = h / r;
    for ((x, y), g) in field.groups() {
        let g = g.expect("lobes are well conditioned");
        for i in 0..r {
            let yy = y + i * fold;
            let norm_sq = row_norm_sq(g.row(i));
            let v = maps.variance.get(x, yy);
            assert!((v - var_sub * norm_sq).abs() <= 1e-12 * v.max(1.0));
            assert!((plain.variance.get(x, yy) - v).abs() <= 1e-12 * v.max(1.0));
            // unit-norm sensitivity columns: g equals the weight norm
            assert!((maps.gmap.get(x, yy) - norm_sq.sqrt()).abs() < 1e-12);
            let sd = (r as f64).sqrt() * var_full.sqrt() * norm_sq.sqrt();
            assert!((maps.std_dev().get(x, yy) - sd).abs() < 1e-12 * sd);
        }
    }
}

#[test]
fn unmixing_inverts_aliasing_everywhere() {
    let sens = lobes(6, 24, 24);
    let cov = CoilCovariance::uniform_correlation(6, 2.0, 0.3, ScaleTag::XSpaceSubsampled(3)).unwrap();
    for weighting in [None, Some(&cov)] {
        let field = UnmixingField::build(&sens, 3, weighting).unwrap();
        for ((x, y), g) in field.groups() {
            let c = sense_noise::sense::aliased_sensitivities(&sens, 3, x, y);
            let wc = &g.unwrap().w * &c;
            assert!(wc.max_abs_diff(&CMatrix::identity(3)) < 1e-8);
        }
    }
}

#[test]
fn gfactor_is_one_without_subsampling() {
    let sens = lobes(8, 16, 16);
    let cov = CoilCovariance::uniform_correlation(8, 100.0, 0.1, ScaleTag::XSpaceSubsampled(1)).unwrap();
    let (g, mask) = gfactor_map(&sens, &cov, 1).unwrap();
    assert!(mask.iter().all(|m| !m));
    for v in g.as_slice() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gfactor_sweep_and_general_identity() {
    // sd_sub = sqrt(r) * g * sd_full with the optimal full-sampling combination
    let (w, h) = (16, 32);
    let sens = lobes(8, w, h);
    for (r, rho) in [(2usize, 0.0), (2, 0.1), (4, 0.3), (8, 0.05)] {
        let full = CoilCovariance::uniform_correlation(8, 3.0, rho, ScaleTag::XSpaceFull).unwrap();
        let sub = scale_covariance(&full, w * h, r).unwrap();
        let maps = analyze(&sens, &sub, r, Weighting::NoiseCovariance).unwrap();
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                if maps.singular_mask[k] {
                    continue;
                }
                let g = maps.gmap.get(x, y);
                assert!(g >= 1.0 - 1e-12, "g={g} at ({x},{y}) r={r}");
                let c = CMatrix::from_vec(8, 1, sens.column(x, y)).unwrap();
                let sic = full.cholesky().solve(&c).unwrap();
                let var_full = 1.0 / (&c.hermitian() * &sic)[(0, 0)].re;
                let expect = (r as f64).sqrt() * g * var_full.sqrt();
                let sd = maps.variance.get(x, y).sqrt();
                // rounding grows with the conditioning of the Gram system, roughly g^2
                assert!((sd - expect).abs() < 1e-11 * g * g * expect, "r={r} rho={rho} ({x},{y}): {sd} vs {expect}");
            }
        }
    }
}

#[test]
fn experiment1_error_shrinks_like_inverse_sqrt_n() {
    let mean_err = |n: usize| -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for s in 0..20 {
            let rep = run_experiment1(n, 0.2, Seed(1000 + s)).unwrap();
            for c in &rep.comparisons {
                total += if c.parameter.starts_with("sigma") { c.rel_error } else { c.abs_error };
                count += 1;
            }
        }
        total / count as f64
    };
    let e = [mean_err(1_000), mean_err(10_000), mean_err(100_000)];
    for pair in e.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!((2.5..=4.5).contains(&ratio), "errors {e:?}");
    }
}

#[test]
fn ca_with_local_variance_beats_global() {
    let (w, h, r) = (32, 32, 2);
    let sens = lobes(8, w, h);
    let phantom = synth_phantom(w, h, PhantomKind::Disk { radius: 14.0, value: 20.0 });
    let cov = CoilCovariance::uniform_correlation(8, 100.0, 0.1, ScaleTag::XSpaceFull).unwrap();
    let demo = run_ca_demo(&sens, &phantom, &CaDemoConfig::new(cov, r, 400, Seed(3))).unwrap();
    assert!(demo.mae_local < demo.mae_global, "{} vs {}", demo.mae_local, demo.mae_global);
    let (lo, hi) = demo.variance.min_max();
    assert!(hi > 1.2 * lo, "variance map should vary in space");
}
