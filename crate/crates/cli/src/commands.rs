use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use sense_noise::montecarlo::{
    run_ca_demo, run_experiment1, run_map_experiment, CaDemoConfig, ExperimentReport, MapExperimentConfig,
};
use sense_noise::noise_analysis::{analyze, ca_denoise, scale_covariance};
use sense_noise::noise_sim::sample_coil_noise;
use sense_noise::phantom::{save_sensitivity, synth_phantom};
use sense_noise::sense::{apply_sensitivity, sos_combine, Acquisition};
use sense_noise::{RealImage, UnmixingField, C64};

use crate::config::*;
use crate::export::{ensure_dir, export_map, map_format, mask_image, read_map, write_json, write_map};

pub fn run(command: Command, file: &FileConfig) -> CliResult<()> {
    match command {
        Command::GenMaps(a) => gen_maps(a, file),
        Command::Simulate(a) => simulate(a, file),
        Command::Analyze(a) => analyze_cmd(a, file),
        Command::Exp1(a) => exp1(a, file),
        Command::ExpMap(a) => exp_map(a, file),
        Command::CaDemo(a) => ca_demo(a, file),
        Command::DenoiseCa(a) => denoise_ca(a, file),
    }
}

fn gen_maps(a: GenMapsArgs, file: &FileConfig) -> CliResult<()> {
    let setup = resolve_setup(a.grid, a.sens, file)?.build(false)?;
    let out = pick(a.out, &file.out).unwrap_or_else(|| PathBuf::from("sensitivity.smap"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    save_sensitivity(&setup.sens, &out)?;
    let (w, h) = setup.dims();
    println!("wrote {} ({} coils, {w}x{h}, {})", out.display(), setup.coils(), setup.label);
    Ok(())
}

/// Fails on singular pixel groups unless they are explicitly allowed.
fn check_singular(field: &UnmixingField, allow: bool) -> CliResult<()> {
    let groups = field.singular_groups();
    if groups.is_empty() {
        return Ok(());
    }
    let fold = field.reduced_height();
    let (x, y) = groups[0];
    let rows: Vec<usize> = (0..field.r()).map(|i| y + i * fold).collect();
    if allow {
        eprintln!(
            "warning: {} pixel groups are singular (first: x={x}, rows {rows:?}); they are zero in the outputs",
            groups.len()
        );
        return Ok(());
    }
    Err(CliError::Singular {
        count: groups.len(),
        x,
        rows,
    })
}

#[derive(Serialize)]
struct SimulationSummary {
    command: &'static str,
    width: usize,
    height: usize,
    coils: usize,
    r: usize,
    sensitivity: String,
    seed: Option<u64>,
    singular_groups: usize,
    /// `||recon - truth|| / ||truth||` over pixels outside the singular mask.
    relative_error: f64,
    artifacts: BTreeMap<String, String>,
}

fn simulate(a: SimulateArgs, file: &FileConfig) -> CliResult<()> {
    let setup = resolve_setup(a.grid, a.sens, file)?.build(true)?;
    let (w, h) = setup.dims();
    let r = setup.r;
    let kind = resolve_phantom(a.phantom, file, w, h)?;
    let noise = resolve_noise(a.noise, file, setup.coils(), w * h)?;
    let noiseless = a.noiseless || file.noiseless.unwrap_or(false);
    let seed = if noiseless { None } else { Some(file.seed(a.seed)?) };
    let allow = a.allow_singular || file.allow_singular.unwrap_or(false);
    let out = resolve_output(a.output, file);

    let sub_cov = scale_covariance(&noise.cov, w * h, r)?;
    let field = UnmixingField::build(&setup.sens, r, noise.weighting.covariance(&sub_cov))?;
    check_singular(&field, allow)?;

    let phantom = synth_phantom(w, h, kind);
    let mut coils = apply_sensitivity(&phantom, &setup.sens)?;
    if let Some(seed) = seed {
        coils = coils.add(&sample_coil_noise(&noise.cov, w, h, seed)?.stack)?;
    }
    let sub = Acquisition::new(w, h, r)?.stack(&coils)?;
    let recon = field.apply(&sub)?;

    let (mut diff, mut norm) = (0.0, 0.0);
    for ((z, t), m) in recon.image.as_slice().iter().zip(phantom.image.as_slice()).zip(&recon.singular_mask) {
        if !m {
            diff += (z - t).norm_sqr();
            norm += t.norm_sqr();
        }
    }
    let relative_error = if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() };

    ensure_dir(&out.dir)?;
    let mut artifacts = BTreeMap::new();
    export_map(&out, "magnitude", &recon.image.magnitude(), &mut artifacts)?;
    let phase = RealImage::from_vec(w, h, recon.image.as_slice().iter().map(|z: &C64| z.arg()).collect())?;
    export_map(&out, "phase", &phase, &mut artifacts)?;
    export_map(&out, "truth", &phantom.image.magnitude(), &mut artifacts)?;
    export_map(&out, "aliased_sos", &sos_combine(&sub), &mut artifacts)?;
    export_map(&out, "singular_mask", &mask_image(w, h, &recon.singular_mask), &mut artifacts)?;

    let summary = SimulationSummary {
        command: "simulate",
        width: w,
        height: h,
        coils: setup.coils(),
        r,
        sensitivity: setup.label,
        seed: seed.map(|s| s.0),
        singular_groups: recon.singular_groups.len(),
        relative_error,
        artifacts,
    };
    let path = write_json(&summary, &out.dir.join("simulate.json"))?;
    println!("simulate: relative error {relative_error:.3e}; wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct MapSummary {
    min: f64,
    max: f64,
}

fn summarize(map: &RealImage, mask: &[bool]) -> MapSummary {
    let (min, max) = map
        .as_slice()
        .iter()
        .zip(mask)
        .filter(|(_, m)| !**m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    MapSummary { min, max }
}

#[derive(Serialize)]
struct AnalysisSummary {
    command: &'static str,
    width: usize,
    height: usize,
    coils: usize,
    r: usize,
    sensitivity: String,
    weighting: sense_noise::Weighting,
    covariance: sense_noise::noise_sim::CovarianceEcho,
    singular_pixels: usize,
    variance: MapSummary,
    gfactor: MapSummary,
    alias_correlation: MapSummary,
    artifacts: BTreeMap<String, String>,
}

fn analyze_cmd(a: AnalyzeArgs, file: &FileConfig) -> CliResult<()> {
    let setup = resolve_setup(a.grid, a.sens, file)?.build(true)?;
    let (w, h) = setup.dims();
    let r = setup.r;
    let noise = resolve_noise(a.noise, file, setup.coils(), w * h)?;
    let allow = a.allow_singular || file.allow_singular.unwrap_or(false);
    let out = resolve_output(a.output, file);

    let sub_cov = scale_covariance(&noise.cov, w * h, r)?;
    let field = UnmixingField::build(&setup.sens, r, noise.weighting.covariance(&sub_cov))?;
    check_singular(&field, allow)?;
    let maps = analyze(&setup.sens, &sub_cov, r, noise.weighting)?;
    let corr = maps.neighbour_correlation_modulus();
    let mask = &maps.singular_mask;

    ensure_dir(&out.dir)?;
    let mut artifacts = BTreeMap::new();
    export_map(&out, "variance", &maps.variance, &mut artifacts)?;
    export_map(&out, "std_dev", &maps.std_dev(), &mut artifacts)?;
    export_map(&out, "gfactor", &maps.gmap, &mut artifacts)?;
    export_map(&out, "alias_correlation", &corr, &mut artifacts)?;
    export_map(&out, "singular_mask", &mask_image(w, h, mask), &mut artifacts)?;

    let summary = AnalysisSummary {
        command: "analyze",
        width: w,
        height: h,
        coils: setup.coils(),
        r,
        sensitivity: setup.label,
        weighting: noise.weighting,
        covariance: sub_cov.echo(),
        singular_pixels: mask.iter().filter(|m| **m).count(),
        variance: summarize(&maps.variance, mask),
        gfactor: summarize(&maps.gmap, mask),
        alias_correlation: summarize(&corr, mask),
        artifacts,
    };
    let path = write_json(&summary, &out.dir.join("analysis.json"))?;
    println!(
        "analyze: variance in [{:.6e}, {:.6e}], g in [{:.4}, {:.4}]; wrote {}",
        summary.variance.min,
        summary.variance.max,
        summary.gfactor.min,
        summary.gfactor.max,
        path.display()
    );
    Ok(())
}

fn finish_report(report: &ExperimentReport, dir: &std::path::Path) -> CliResult<()> {
    let path = write_json(report, &dir.join("report.json"))?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("{}: all {} checks passed; wrote {}", report.experiment, report.checks.len(), path.display());
    } else {
        println!("{}: failed checks {failed:?}; wrote {}", report.experiment, path.display());
    }
    Ok(())
}

fn exp1(a: Exp1Args, file: &FileConfig) -> CliResult<()> {
    let seed = file.seed(a.seed)?;
    let n = file.count(a.n, file.n, 100_000, "n")?;
    if n < 2 {
        return bad("--n must be at least 2");
    }
    let rho = pick(a.rho, &file.rho).unwrap_or(0.0);
    let lower = -1.0 / (sense_noise::montecarlo::EXP1_VARIABLES as f64 - 1.0);
    if !(rho > lower && rho < 1.0) {
        return bad(format!("--rho {rho} gives an indefinite covariance (need {lower:.4} < rho < 1)"));
    }
    let dir = pick(a.out_dir, &file.out_dir).unwrap_or_else(|| PathBuf::from("."));
    let report = run_experiment1(n, rho, seed)?;
    ensure_dir(&dir)?;
    finish_report(&report, &dir)
}

fn exp_map(a: ExpMapArgs, file: &FileConfig) -> CliResult<()> {
    let setup = resolve_setup(a.grid, a.sens, file)?.build(true)?;
    let (w, h) = setup.dims();
    let noise = resolve_noise(a.noise, file, setup.coils(), w * h)?;
    let seed = file.seed(a.seed)?;
    let n_iter = file.count(a.n_iter, file.n_iter, 5000, "n-iter")?;
    if n_iter < 2 {
        return bad("--n-iter must be at least 2");
    }
    let tracked = pick(a.tracked_pixels, &file.tracked_pixels).unwrap_or(20);
    let out = resolve_output(a.output, file);

    let mut config = MapExperimentConfig::new(noise.cov, setup.r, n_iter, seed);
    config.weighting = noise.weighting;
    config.tracked_pixels = tracked;
    config.sensitivity_label = setup.label;
    let mut result = run_map_experiment(&setup.sens, &config)?;

    ensure_dir(&out.dir)?;
    let mask = result.theory.singular_mask.clone();
    let alias = RealImage::from_vec(w, h, result.alias_correlation.iter().map(|z| z.norm()).collect())?;
    let mut artifacts = BTreeMap::new();
    export_map(&out, "theory_variance", &result.theory.variance, &mut artifacts)?;
    export_map(&out, "estimated_variance", &result.estimated_variance, &mut artifacts)?;
    export_map(&out, "gfactor", &result.theory.gmap, &mut artifacts)?;
    export_map(&out, "theory_alias_correlation", &result.theory.neighbour_correlation_modulus(), &mut artifacts)?;
    export_map(&out, "estimated_alias_correlation", &alias, &mut artifacts)?;
    export_map(&out, "singular_mask", &mask_image(w, h, &mask), &mut artifacts)?;
    result.report.artifacts = artifacts;
    finish_report(&result.report, &out.dir)
}

fn ca_demo(a: CaDemoArgs, file: &FileConfig) -> CliResult<()> {
    let setup = resolve_setup(a.grid, a.sens, file)?.build(true)?;
    let (w, h) = setup.dims();
    let kind = disk(a.radius, a.value, file, w, h)?;
    let noise = resolve_noise(a.noise, file, setup.coils(), w * h)?;
    let seed = file.seed(a.seed)?;
    let n_rep = file.count(a.n_rep, file.n_rep, 1000, "n-rep")?;
    let grid_points = file.count(a.grid_points, file.grid_points, 50, "grid-points")?;
    if n_rep < 2 || grid_points < 2 {
        return bad("--n-rep and --grid-points must be at least 2");
    }
    let out = resolve_output(a.output, file);

    let mut config = CaDemoConfig::new(noise.cov, setup.r, n_rep, seed);
    config.weighting = noise.weighting;
    config.grid_points = grid_points;
    let phantom = synth_phantom(w, h, kind);
    let mut demo = run_ca_demo(&setup.sens, &phantom, &config)?;
    demo.report.config.sensitivity = Some(setup.label);

    ensure_dir(&out.dir)?;
    let mut artifacts = BTreeMap::new();
    export_map(&out, "truth", &demo.truth, &mut artifacts)?;
    export_map(&out, "second_moment", &demo.second_moment, &mut artifacts)?;
    export_map(&out, "variance", &demo.variance, &mut artifacts)?;
    export_map(&out, "denoised_local", &demo.denoised_local, &mut artifacts)?;
    export_map(&out, "denoised_global", &demo.denoised_global, &mut artifacts)?;
    demo.report.artifacts = artifacts;
    finish_report(&demo.report, &out.dir)
}

fn denoise_ca(a: DenoiseCaArgs, file: &FileConfig) -> CliResult<()> {
    let m2 = file.input(a.second_moment, &file.second_moment, "second-moment")?;
    let var = file.input(a.variance, &file.variance, "variance")?;
    let Some(out) = pick(a.out, &file.out) else {
        return bad("--out is required");
    };
    let format = map_format(&out)?;
    let m2 = read_map(&m2)?;
    let var = read_map(&var)?;
    if m2.dims() != var.dims() {
        return bad(format!(
            "second-moment map is {:?} but variance map is {:?}",
            m2.dims(),
            var.dims()
        ));
    }
    let denoised = ca_denoise(&m2, &var)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_map(&denoised, &out, format)?;
    println!("denoise-ca: wrote {}", out.display());
    Ok(())
}
