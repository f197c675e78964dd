//! Command-line surface, the optional TOML config file, and validation into
//! resolved run settings.
//!
//! Every long flag except `--config` and `--threads` can also be given as a
//! top-level key in the config file (same name, without the dashes). A flag
//! on the command line always wins over the file.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use sense_noise::phantom::{load_sensitivity, synth_sensitivity};
use sense_noise::{
    io, CoilCovariance, PhantomKind, ScaleTag, Seed, SensitivityMap, SensitivityProfile, Weighting,
};

pub const DEFAULT_SIZE: usize = 64;
pub const FULL_SIZE: usize = 256;

#[derive(Parser, Debug)]
#[command(
    name = "sense-noise",
    version,
    about = "Simulate Cartesian SENSE acquisitions and characterize their noise",
    after_help = "Exit status: 0 on success, 1 on pipeline errors, 2 on configuration errors."
)]
pub struct Cli {
    /// TOML file providing defaults for any long flag; command-line flags win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel stages [default: all cores]
    #[arg(long, global = true, env = "SENSENOISE_THREADS", value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic coil sensitivities to an SMAP file
    GenMaps(GenMapsArgs),
    /// Phantom -> coils -> subsample -> SENSE unfold; write the reconstruction
    Simulate(SimulateArgs),
    /// Write closed-form variance, correlation and g-factor maps
    Analyze(AnalyzeArgs),
    /// Experiment 1: two linear combinations of 8 correlated Gaussians
    Exp1(Exp1Args),
    /// Monte Carlo variance/correlation maps against the closed forms
    ExpMap(ExpMapArgs),
    /// Bias removal on a noisy disk: per-pixel variance map vs best global variance
    CaDemo(CaDemoArgs),
    /// Apply conventional-approach bias removal with a supplied variance map
    DenoiseCa(DenoiseCaArgs),
}

#[derive(Args, Debug, Default)]
pub struct GridArgs {
    /// Image width M_x [default: 64]
    #[arg(long)]
    pub width: Option<usize>,
    /// Image height M_y (phase-encode direction) [default: 64]
    #[arg(long)]
    pub height: Option<usize>,
    /// Number of coils L [default: 8]
    #[arg(long)]
    pub coils: Option<usize>,
    /// Subsampling factor; must divide the height [default: 2]
    #[arg(long, short = 'r')]
    pub r: Option<usize>,
    /// Use the full 256x256 grid instead of 64x64
    #[arg(long)]
    pub full_size: bool,
}

#[derive(Args, Debug, Default)]
pub struct SensArgs {
    /// Load sensitivities from an SMAP file instead of generating them
    #[arg(long, value_name = "FILE")]
    pub sens: Option<PathBuf>,
    /// Generated sensitivity profile [default: gaussian-lobes]
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Seed for the generated sensitivity layout [default: 1]
    #[arg(long)]
    pub map_seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct NoiseArgs {
    /// Per-component noise variance of each coil [default: 1]
    #[arg(long)]
    pub noise_var: Option<f64>,
    /// Correlation coefficient between every pair of coils [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    /// Covariance matrix (real part) as an L x L CSV; replaces --noise-var/--rho
    #[arg(long, value_name = "FILE")]
    pub cov_real: Option<PathBuf>,
    /// Imaginary part of the covariance as an L x L CSV
    #[arg(long, value_name = "FILE", requires = "cov_real")]
    pub cov_imag: Option<PathBuf>,
    /// Grid the covariance describes: fully sampled x-space or k-space samples [default: x-space]
    #[arg(long, value_enum)]
    pub cov_domain: Option<CovDomain>,
    /// Unfolding weights [default: noise-covariance]
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingArg>,
}

#[derive(Args, Debug, Default)]
pub struct OutputArgs {
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Map formats to write, comma separated [default: fmap]
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Option<Vec<Format>>,
    /// Store log10(1 + map) in PGM exports
    #[arg(long)]
    pub log_scale: bool,
}

#[derive(Args, Debug)]
pub struct GenMapsArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub sens: SensArgs,
    /// Output SMAP file [default: sensitivity.smap]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Object to reconstruct [default: shepp-logan]
    #[arg(long, value_enum)]
    pub phantom: Option<PhantomArg>,
    /// Disk radius in pixels [default: 0.45 * min(width, height)]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Disk intensity [default: 20]
    #[arg(long)]
    pub value: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub sens: SensArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    pub phantom: PhantomArgs,
    /// Add no noise (the seed is then not needed)
    #[arg(long)]
    pub noiseless: bool,
    /// Seed for the noise draw
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write outputs even if some pixel groups cannot be unfolded
    #[arg(long)]
    pub allow_singular: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub sens: SensArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Write outputs even if some pixel groups cannot be unfolded
    #[arg(long)]
    pub allow_singular: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct Exp1Args {
    /// Correlation coefficient between the 8 variables [default: 0]
    #[arg(long, allow_negative_numbers = true)]
    pub rho: Option<f64>,
    /// Number of samples [default: 100000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed (required)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for report.json [default: .]
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExpMapArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub sens: SensArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Monte Carlo iterations [default: 5000]
    #[arg(long)]
    pub n_iter: Option<usize>,
    /// Pixels whose magnitudes are tested against a Rayleigh law [default: 20]
    #[arg(long)]
    pub tracked_pixels: Option<usize>,
    /// Seed (required)
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct CaDemoArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub sens: SensArgs,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Disk radius in pixels [default: 0.45 * min(width, height)]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Disk intensity [default: 20]
    #[arg(long)]
    pub value: Option<f64>,
    /// Noisy repetitions used to estimate E{M^2} [default: 1000]
    #[arg(long)]
    pub n_rep: Option<usize>,
    /// Global variances tried for the baseline [default: 50]
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Seed (required)
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct DenoiseCaArgs {
    /// Second-moment map E{M^2} (.fmap, .csv or .pgm)
    #[arg(long, value_name = "FILE")]
    pub second_moment: Option<PathBuf>,
    /// Per-component noise variance map (.fmap, .csv or .pgm)
    #[arg(long, value_name = "FILE")]
    pub variance: Option<PathBuf>,
    /// Output map; format from the extension (.fmap, .csv or .pgm)
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileArg {
    GaussianLobes,
    OrthogonalPhase,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CovDomain {
    XSpace,
    KSpace,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingArg {
    NoiseCovariance,
    Unweighted,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomArg {
    SheppLogan,
    Disk,
    Zero,
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Fmap,
    Csv,
    Pgm,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Fmap => "fmap",
            Format::Csv => "csv",
            Format::Pgm => "pgm",
        }
    }

    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "fmap" => Some(Format::Fmap),
            "csv" => Some(Format::Csv),
            "pgm" => Some(Format::Pgm),
            _ => None,
        }
    }
}

/// Keys accepted in the config file.
#[derive(Deserialize, Debug, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub coils: Option<usize>,
    pub r: Option<usize>,
    pub full_size: Option<bool>,
    pub sens: Option<PathBuf>,
    pub profile: Option<ProfileArg>,
    pub map_seed: Option<u64>,
    pub noise_var: Option<f64>,
    pub rho: Option<f64>,
    pub cov_real: Option<PathBuf>,
    pub cov_imag: Option<PathBuf>,
    pub cov_domain: Option<CovDomain>,
    pub weighting: Option<WeightingArg>,
    pub out_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<Vec<Format>>,
    pub log_scale: Option<bool>,
    pub allow_singular: Option<bool>,
    pub noiseless: Option<bool>,
    pub seed: Option<u64>,
    pub phantom: Option<PhantomArg>,
    pub radius: Option<f64>,
    pub value: Option<f64>,
    pub n: Option<usize>,
    pub n_iter: Option<usize>,
    pub n_rep: Option<usize>,
    pub tracked_pixels: Option<usize>,
    pub grid_points: Option<usize>,
    pub second_moment: Option<PathBuf>,
    pub variance: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Invalid or inconsistent settings.
    Config(String),
    /// Failure inside the pipeline.
    Run(sense_noise::Error),
    /// Pixel groups whose unfolding system is singular.
    Singular { count: usize, x: usize, rows: Vec<usize> },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::Singular { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Singular { count, x, rows } => write!(
                f,
                "{count} pixel groups have a singular unfolding system, first at x={x}, rows {rows:?}; \
                 pass --allow-singular to write outputs anyway"
            ),
        }
    }
}

impl From<sense_noise::Error> for CliError {
    fn from(e: sense_noise::Error) -> Self {
        CliError::Run(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn bad<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
    }
}

pub fn pick<T: Clone>(flag: Option<T>, file: &Option<T>) -> Option<T> {
    flag.or_else(|| file.clone())
}

fn existing(path: PathBuf, what: &str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        bad(format!("{what} file {} does not exist", path.display()))
    }
}

fn require_seed(flag: Option<u64>, file: &FileConfig) -> CliResult<Seed> {
    pick(flag, &file.seed)
        .map(Seed)
        .ok_or_else(|| CliError::Config("--seed is required for this command".into()))
}

fn positive(value: usize, name: &str) -> CliResult<usize> {
    if value == 0 {
        return bad(format!("--{name} must be positive"));
    }
    Ok(value)
}

/// Image grid, coils and sensitivities of a run.
pub struct Setup {
    pub sens: SensitivityMap,
    pub r: usize,
    /// Human-readable description of where the sensitivities came from.
    pub label: String,
}

impl Setup {
    pub fn dims(&self) -> (usize, usize) {
        self.sens.dims()
    }

    pub fn coils(&self) -> usize {
        self.sens.coils()
    }
}

/// Resolves grid and sensitivity settings. SMAP files fix width, height and
/// coil count; explicit values that disagree with the file are rejected.
pub fn resolve_setup(grid: GridArgs, sens: SensArgs, file: &FileConfig) -> CliResult<SetupPlan> {
    let full = grid.full_size || file.full_size.unwrap_or(false);
    let default_size = if full { FULL_SIZE } else { DEFAULT_SIZE };
    let width = pick(grid.width, &file.width);
    let height = pick(grid.height, &file.height);
    let coils = pick(grid.coils, &file.coils);
    let r = positive(pick(grid.r, &file.r).unwrap_or(2), "r")?;

    let source = match pick(sens.sens, &file.sens) {
        Some(path) => SensSource::File(existing(path, "sensitivity")?),
        None => {
            let profile = match pick(sens.profile, &file.profile).unwrap_or(ProfileArg::GaussianLobes) {
                ProfileArg::GaussianLobes => SensitivityProfile::GaussianLobes,
                ProfileArg::OrthogonalPhase => SensitivityProfile::OrthogonalPhase { r },
            };
            SensSource::Generate {
                width: positive(width.unwrap_or(default_size), "width")?,
                height: positive(height.unwrap_or(default_size), "height")?,
                coils: positive(coils.unwrap_or(8), "coils")?,
                profile,
                seed: Seed(pick(sens.map_seed, &file.map_seed).unwrap_or(1)),
            }
        }
    };
    Ok(SetupPlan {
        source,
        r,
        expect: (width, height, coils),
    })
}

pub enum SensSource {
    File(PathBuf),
    Generate {
        width: usize,
        height: usize,
        coils: usize,
        profile: SensitivityProfile,
        seed: Seed,
    },
}

/// Validated grid settings whose sensitivities have not been built yet.
pub struct SetupPlan {
    pub source: SensSource,
    pub r: usize,
    expect: (Option<usize>, Option<usize>, Option<usize>),
}

impl SetupPlan {
    fn check_dims(&self, height: usize, coils: usize) -> CliResult<()> {
        let r = self.r;
        if height % r != 0 {
            return bad(format!(
                "subsampling factor r={r} must divide the image height M_y={height}"
            ));
        }
        if r > coils {
            return bad(format!("subsampling factor r={r} exceeds the number of coils L={coils}"));
        }
        Ok(())
    }

    /// Builds or loads the sensitivities. With `check_r` the subsampling
    /// factor must divide the height and not exceed the coil count.
    pub fn build(self, check_r: bool) -> CliResult<Setup> {
        match &self.source {
            SensSource::Generate {
                width,
                height,
                coils,
                profile,
                seed,
            } => {
                if check_r || matches!(profile, SensitivityProfile::OrthogonalPhase { .. }) {
                    self.check_dims(*height, *coils)?;
                }
                let sens = synth_sensitivity(*coils, *width, *height, *profile, *seed)?;
                let label = match profile {
                    SensitivityProfile::GaussianLobes => format!("gaussian-lobes (map seed {})", seed.0),
                    SensitivityProfile::OrthogonalPhase { r } => {
                        format!("orthogonal-phase r={r} (map seed {})", seed.0)
                    }
                };
                Ok(Setup { sens, r: self.r, label })
            }
            SensSource::File(path) => {
                let sens = load_sensitivity(path)?;
                let (w, h) = sens.dims();
                let l = sens.coils();
                for (name, want, got) in [("width", self.expect.0, w), ("height", self.expect.1, h), ("coils", self.expect.2, l)] {
                    if let Some(want) = want {
                        if want != got {
                            return bad(format!(
                                "--{name} {want} disagrees with {} ({name} {got})",
                                path.display()
                            ));
                        }
                    }
                }
                if check_r {
                    self.check_dims(h, l)?;
                }
                let label = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
                Ok(Setup { sens, r: self.r, label })
            }
        }
    }
}

/// Noise settings: the fully sampled covariance (always tagged x-space after
/// resolution) and the unfolding weights.
pub struct NoiseSpec {
    pub cov: CoilCovariance,
    pub weighting: Weighting,
}

/// Noise covariance for `coils` coils on a `width x height` grid. A k-space
/// covariance is converted to the equivalent fully sampled x-space one.
pub fn resolve_noise(
    noise: NoiseArgs,
    file: &FileConfig,
    coils: usize,
    grid_len: usize,
) -> CliResult<NoiseSpec> {
    let weighting = match pick(noise.weighting, &file.weighting).unwrap_or(WeightingArg::NoiseCovariance) {
        WeightingArg::NoiseCovariance => Weighting::NoiseCovariance,
        WeightingArg::Unweighted => Weighting::Unweighted,
    };
    let domain = pick(noise.cov_domain, &file.cov_domain).unwrap_or(CovDomain::XSpace);
    let tag = match domain {
        CovDomain::XSpace => ScaleTag::XSpaceFull,
        CovDomain::KSpace => ScaleTag::KSpaceFull,
    };
    let cov_real = pick(noise.cov_real, &file.cov_real);
    let cov_imag = pick(noise.cov_imag, &file.cov_imag);
    let cov = match cov_real {
        Some(real) => {
            if noise.noise_var.is_some() || noise.rho.is_some() {
                return bad("--cov-real replaces --noise-var and --rho; give one or the other");
            }
            let real = existing(real, "covariance")?;
            let imag = cov_imag.map(|p| existing(p, "covariance")).transpose()?;
            let cov = io::load_covariance(&real, imag.as_deref(), tag)?;
            if cov.coils() != coils {
                return bad(format!(
                    "covariance {} is {0}x{0} but there are {coils} coils",
                    cov.coils()
                ));
            }
            cov
        }
        None => {
            if cov_imag.is_some() {
                return bad("--cov-imag needs --cov-real");
            }
            let var = pick(noise.noise_var, &file.noise_var).unwrap_or(1.0);
            let rho = pick(noise.rho, &file.rho).unwrap_or(0.0);
            if !(var > 0.0 && var.is_finite()) {
                return bad(format!("--noise-var must be positive, got {var}"));
            }
            let lower = if coils > 1 { -1.0 / (coils as f64 - 1.0) } else { -1.0 };
            if !(rho > lower && rho < 1.0) {
                return bad(format!(
                    "--rho {rho} gives an indefinite covariance for {coils} coils (need {lower:.4} < rho < 1)"
                ));
            }
            CoilCovariance::uniform_correlation(coils, var, rho, tag)?
        }
    };
    let cov = match cov.tag() {
        ScaleTag::KSpaceFull => cov.rescaled(1.0 / grid_len as f64, ScaleTag::XSpaceFull)?,
        _ => cov,
    };
    Ok(NoiseSpec { cov, weighting })
}

pub struct Output {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
    pub log_scale: bool,
}

pub fn resolve_output(out: OutputArgs, file: &FileConfig) -> Output {
    let mut formats = pick(out.format, &file.format).unwrap_or_else(|| vec![Format::Fmap]);
    formats.sort();
    formats.dedup();
    Output {
        dir: pick(out.out_dir, &file.out_dir).unwrap_or_else(|| PathBuf::from(".")),
        formats,
        log_scale: out.log_scale || file.log_scale.unwrap_or(false),
    }
}

pub fn resolve_phantom(p: PhantomArgs, file: &FileConfig, width: usize, height: usize) -> CliResult<PhantomKind> {
    Ok(match pick(p.phantom, &file.phantom).unwrap_or(PhantomArg::SheppLogan) {
        PhantomArg::SheppLogan => PhantomKind::SheppLoganLike,
        PhantomArg::Zero => PhantomKind::Zero,
        PhantomArg::Disk => disk(p.radius, p.value, file, width, height)?,
    })
}

pub fn disk(radius: Option<f64>, value: Option<f64>, file: &FileConfig, width: usize, height: usize) -> CliResult<PhantomKind> {
    let radius = pick(radius, &file.radius).unwrap_or(0.45 * width.min(height) as f64);
    let value = pick(value, &file.value).unwrap_or(20.0);
    if !(radius > 0.0) || !value.is_finite() {
        return bad(format!("disk needs a positive radius and finite value, got radius {radius}, value {value}"));
    }
    Ok(PhantomKind::Disk { radius, value })
}

impl FileConfig {
    pub fn seed(&self, flag: Option<u64>) -> CliResult<Seed> {
        require_seed(flag, self)
    }

    /// A positive count from the flag, the file, or `default`.
    pub fn count(&self, flag: Option<usize>, file: Option<usize>, default: usize, name: &str) -> CliResult<usize> {
        positive(flag.or(file).unwrap_or(default), name)
    }

    /// An input file that must exist.
    pub fn input(&self, flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
        match pick(flag, file) {
            Some(p) => existing(p, name),
            None => bad(format!("--{name} is required")),
        }
    }
}
