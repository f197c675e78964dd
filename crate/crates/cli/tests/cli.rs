use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use sense_noise::noise_analysis::ca_denoise;
use sense_noise::phantom::{load_sensitivity, save_sensitivity, synth_sensitivity};
use sense_noise::{io, ComplexImage, Domain, RealImage, Seed, SensitivityMap, SensitivityProfile, C64};

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sense-noise"));
    c.env_remove("SENSENOISE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    cli().args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut c = cli();
    c.args(args).arg("--out-dir").arg(dir);
    c.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"))
}

#[test]
fn help_texts_are_frozen() {
    let mut cases = vec![("help", vec!["--help"])];
    for c in ["gen-maps", "simulate", "analyze", "exp1", "exp-map", "ca-demo", "denoise-ca"] {
        cases.push((c, vec![c, "--help"]));
    }
    for (name, args) in cases {
        let out = run(&args);
        assert_eq!(code(&out), 0);
        let expected = fs::read_to_string(golden(name)).unwrap();
        assert_eq!(String::from_utf8_lossy(&out.stdout), expected, "help for {name} changed");
    }
}

#[test]
fn exp1_uncorrelated_theory_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["exp1", "--rho", "0", "--n", "100000", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = json(&tmp.path().join("report.json"));
    for c in report["comparisons"].as_array().unwrap() {
        if c["parameter"].as_str().unwrap().starts_with("sigma") {
            assert!((c["theoretical"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(report["config"]["seed"], 7);
}

#[test]
fn r_must_divide_height() {
    let out = run(&["simulate", "--height", "30", "-r", "4", "--seed", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("r=4 must divide the image height M_y=30"), "{}", stderr(&out));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["exp1", "--n", "100"],
        vec!["exp-map", "--n-iter", "10"],
        vec!["analyze", "--sens", "/nonexistent/maps.smap"],
        vec!["analyze", "--rho", "1.5"],
        vec!["analyze", "--coils", "2", "-r", "4"],
        vec!["simulate", "--seed", "1", "--noise-var", "-1"],
        vec!["denoise-ca", "--variance", "x.fmap"],
    ];
    for args in cases {
        let out = run_in(tmp.path(), &args);
        assert_eq!(code(&out), 2, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error:"), "{args:?}");
    }
    // clap usage errors share the status
    assert_eq!(code(&run(&["analyze", "--format", "tiff"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn orthogonal_profile_gives_constant_variance_map() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        &["analyze", "--profile", "orthogonal-phase", "--noise-var", "3", "-r", "2", "--format", "fmap,csv"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let map = io::read_fmap(&tmp.path().join("variance.fmap")).unwrap();
    let (lo, hi) = map.min_max();
    assert!(hi - lo <= 1e-10, "{lo}..{hi}");
    assert!((lo - 6.0).abs() < 1e-10);
    assert_eq!(io::read_csv(&tmp.path().join("variance.csv")).unwrap(), map);
}

#[test]
fn every_written_file_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let smap = dir.join("maps/lobes.smap");
    let out = run(&["gen-maps", "--width", "32", "--height", "16", "--coils", "4", "--out", smap.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let loaded = load_sensitivity(&smap).unwrap();
    let direct = synth_sensitivity(4, 32, 16, SensitivityProfile::GaussianLobes, Seed(1)).unwrap();
    assert_eq!(loaded, direct);

    for (cmd, extra) in [
        ("simulate", vec!["--seed", "3", "--noise-var", "0.01"]),
        ("analyze", vec!["--rho", "0.2"]),
    ] {
        let sub = dir.join(cmd);
        let mut args = vec![cmd, "--sens", smap.to_str().unwrap(), "--format", "fmap,csv,pgm", "--log-scale"];
        args.extend(extra);
        let out = run_in(&sub, &args);
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
        let summary = json(&sub.join(format!("{}.json", if cmd == "simulate" { "simulate" } else { "analysis" })));
        for (file, role) in summary["artifacts"].as_object().unwrap() {
            let path = sub.join(file);
            let stem = file.rsplit_once('.').unwrap().0;
            let reference = io::read_fmap(&sub.join(format!("{stem}.fmap"))).unwrap();
            let back = match path.extension().unwrap().to_str().unwrap() {
                "fmap" => io::read_fmap(&path).unwrap(),
                "csv" => io::read_csv(&path).unwrap(),
                "pgm" => io::read_pgm16(&path).unwrap(),
                other => panic!("unexpected artifact {other}"),
            };
            assert_eq!(back.dims(), reference.dims());
            assert_eq!(back.width(), 32);
            if file.ends_with(".pgm") {
                let logged = if role.as_str().unwrap().contains("log10") {
                    io::log_scale(&reference)
                } else {
                    assert!(reference.min_max().0 < 0.0, "{file} should be log-scaled");
                    reference.clone()
                };
                let (lo, hi) = logged.min_max();
                let step = (hi - lo) / 65535.0;
                for (a, b) in back.as_slice().iter().zip(logged.as_slice()) {
                    assert!((a - b).abs() <= step + 1e-12 * hi.abs());
                }
            } else {
                assert_eq!(back, reference, "{file}");
            }
        }
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "width = 16\nheight = 8\ncoils = 4\nnoise-var = 2.0\nformat = [\"csv\"]\n").unwrap();
    let out = run_in(tmp.path(), &["analyze", "--config", cfg.to_str().unwrap(), "--noise-var", "5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = json(&tmp.path().join("analysis.json"));
    assert_eq!(summary["width"], 16);
    assert_eq!(summary["height"], 8);
    assert_eq!(summary["coils"], 4);
    // flag wins: subsampled variance is r * 5
    assert_eq!(summary["covariance"]["real"][0][0].as_f64().unwrap(), 10.0);
    assert!(tmp.path().join("variance.csv").exists());
    assert!(!tmp.path().join("variance.fmap").exists());

    fs::write(&cfg, "widht = 16\n").unwrap();
    let out = run_in(tmp.path(), &["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("widht"));
}

#[test]
fn kspace_covariance_is_converted() {
    let tmp = tempfile::tempdir().unwrap();
    let base = ["analyze", "--width", "16", "--height", "16", "--coils", "4"];
    let mut x = base.to_vec();
    x.extend(["--noise-var", "2"]);
    let mut k = base.to_vec();
    k.extend(["--noise-var", "512", "--cov-domain", "k-space"]);
    let (dx, dk) = (tmp.path().join("x"), tmp.path().join("k"));
    assert_eq!(code(&run_in(&dx, &x)), 0);
    assert_eq!(code(&run_in(&dk, &k)), 0);
    let a = io::read_fmap(&dx.join("variance.fmap")).unwrap();
    let b = io::read_fmap(&dk.join("variance.fmap")).unwrap();
    for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((p - q).abs() <= 1e-12 * p);
    }
}

#[test]
fn covariance_files_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let real = tmp.path().join("cov_re.csv");
    let imag = tmp.path().join("cov_im.csv");
    fs::write(&real, "2,0.5\n0.5,2\n").unwrap();
    fs::write(&imag, "0,0.1\n-0.1,0\n").unwrap();
    let args = [
        "analyze", "--width", "8", "--height", "8", "--coils", "2", "--cov-real", real.to_str().unwrap(),
        "--cov-imag", imag.to_str().unwrap(),
    ];
    let out = run_in(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = json(&tmp.path().join("analysis.json"));
    assert_eq!(summary["covariance"]["imag"][0][1].as_f64().unwrap(), 0.2);

    let mut conflicting = args.to_vec();
    conflicting.extend(["--rho", "0.1"]);
    assert_eq!(code(&run_in(tmp.path(), &conflicting)), 2);
    fs::write(&real, "2,0.5\n0.5,2\n1,1\n").unwrap();
    assert_eq!(code(&run_in(tmp.path(), &args)), 1);
}

#[test]
fn singular_groups_fail_unless_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let same = ComplexImage::from_fn(8, 8, Domain::XSpace, |_, _| C64::new(0.5f64.sqrt(), 0.0));
    let smap = tmp.path().join("same.smap");
    save_sensitivity(&SensitivityMap::new(vec![same.clone(), same]).unwrap(), &smap).unwrap();
    let args = ["simulate", "--sens", smap.to_str().unwrap(), "--noiseless"];
    let out = run_in(tmp.path(), &args);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("singular") && stderr(&out).contains("x=0, rows [0, 4]"), "{}", stderr(&out));
    let mut allowed = args.to_vec();
    allowed.push("--allow-singular");
    let out = run_in(tmp.path(), &allowed);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mask = io::read_fmap(&tmp.path().join("singular_mask.fmap")).unwrap();
    assert!(mask.as_slice().iter().all(|v| *v == 1.0));
}

#[test]
fn noiseless_simulation_reconstructs_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["simulate", "--noiseless", "--phantom", "disk", "-r", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s = json(&tmp.path().join("simulate.json"));
    assert!(s["relative_error"].as_f64().unwrap() < 1e-8);
    assert_eq!(s["seed"], Value::Null);
}

#[test]
fn denoise_ca_applies_the_per_pixel_map() {
    let tmp = tempfile::tempdir().unwrap();
    let m2 = RealImage::from_fn(6, 4, |x, y| 10.0 + (x * y) as f64);
    let var = RealImage::from_fn(6, 4, |x, _| 0.5 * x as f64);
    let (pm, pv) = (tmp.path().join("m2.fmap"), tmp.path().join("var.csv"));
    io::write_fmap(&m2, &pm).unwrap();
    io::write_csv(&var, &pv).unwrap();
    let dest = tmp.path().join("out/denoised.csv");
    let out = run(&[
        "denoise-ca", "--second-moment", pm.to_str().unwrap(), "--variance", pv.to_str().unwrap(), "--out",
        dest.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(io::read_csv(&dest).unwrap(), ca_denoise(&m2, &var).unwrap());

    let bad_ext = tmp.path().join("denoised.png");
    let out = run(&[
        "denoise-ca", "--second-moment", pm.to_str().unwrap(), "--variance", pv.to_str().unwrap(), "--out",
        bad_ext.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["exp-map", "--width", "16", "--height", "16", "--n-iter", "120", "--seed", "9", "--rho", "0.1"];
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let dir = tmp.path().join(threads);
        let out = cli().args(args).arg("--out-dir").arg(&dir).env("SENSENOISE_THREADS", threads).output().unwrap();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        reports.push(fs::read(dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let out = run(&["exp1", "--seed", "1", "--threads", "0"]);
    assert_eq!(code(&out), 2);
}
