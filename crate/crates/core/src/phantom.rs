//! Noise-free objects and coil sensitivity maps.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::complex_linalg::C64;
use crate::dft::{ComplexImage, Domain};
use crate::error::{Error, Result};
use crate::rng::Seed;

/// Tolerance of the pointwise `sum_l |C_l|^2 == 1` check.
pub const NORMALIZATION_TOL: f64 = 1e-10;

/// Complex coil sensitivities `C_l(x, y)` on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    maps: Vec<ComplexImage>,
    normalized: bool,
}

impl SensitivityMap {
    /// Wraps per-coil maps; the normalized flag is derived from the data.
    pub fn new(maps: Vec<ComplexImage>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::BadDims("a sensitivity map needs at least one coil".into()))?;
        let dims = first.dims();
        for (l, m) in maps.iter().enumerate() {
            if m.dims() != dims {
                return Err(Error::dims(
                    format!("{}x{}", dims.0, dims.1),
                    format!("{}x{} (coil {l})", m.width(), m.height()),
                ));
            }
            if m.domain() != Domain::XSpace {
                return Err(Error::WrongDomain {
                    expected: Domain::XSpace,
                    found: m.domain(),
                });
            }
        }
        let mut map = SensitivityMap {
            maps,
            normalized: false,
        };
        map.normalized = map.sos_deviation() < NORMALIZATION_TOL;
        Ok(map)
    }

    pub fn coils(&self) -> usize {
        self.maps.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.maps[0].dims()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn coil(&self, l: usize) -> &ComplexImage {
        &self.maps[l]
    }

    pub fn coil_maps(&self) -> &[ComplexImage] {
        &self.maps
    }

    #[inline]
    pub fn value(&self, l: usize, x: usize, y: usize) -> C64 {
        self.maps[l].get(x, y)
    }

    /// Sensitivities of all coils at one pixel.
    pub fn column(&self, x: usize, y: usize) -> Vec<C64> {
        self.maps.iter().map(|m| m.get(x, y)).collect()
    }

    /// `max_x |sum_l |C_l(x)|^2 - 1|`.
    pub fn sos_deviation(&self) -> f64 {
        let (w, h) = self.dims();
        let mut dev = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let sos: f64 = self.maps.iter().map(|m| m.get(x, y).norm_sqr()).sum();
                dev = dev.max((sos - 1.0).abs());
            }
        }
        dev
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityProfile {
    /// Real, smooth lobes around the field of view, normalized pointwise.
    GaussianLobes,
    /// Lobes periodic in `y` with period `M_y / r`, coils split into `r`
    /// groups with per-group linear phase ramps; the `r` aliased sensitivity
    /// columns of every pixel group are orthonormal.
    OrthogonalPhase { r: usize },
}

struct Lobe {
    cx: f64,
    cy: f64,
    width: f64,
}

fn lobes(coils: usize, w: f64, h: f64, seed: Seed) -> Vec<Lobe> {
    let mut s = seed.stream(0);
    let radius = 0.5 * w.min(h);
    (0..coils)
        .map(|l| {
            let jitter = 0.1 * (s.uniform() - 0.5);
            let angle = TAU * (l as f64 + 0.25 + jitter) / coils as f64;
            let scale = 0.9 + 0.2 * s.uniform();
            Lobe {
                cx: 0.5 * w + radius * scale * angle.cos(),
                cy: 0.5 * h + radius * scale * angle.sin(),
                width: 0.45 * w.min(h) * (0.9 + 0.2 * s.uniform()),
            }
        })
        .collect()
}

fn lobe_value(lobe: &Lobe, px: f64, py: f64) -> f64 {
    let d2 = (px - lobe.cx).powi(2) + (py - lobe.cy).powi(2);
    (-d2 / (2.0 * lobe.width * lobe.width)).exp()
}

/// Synthetic sensitivities with `sum_l |C_l(x)|^2 == 1` everywhere.
pub fn synth_sensitivity(
    coils: usize,
    width: usize,
    height: usize,
    profile: SensitivityProfile,
    seed: Seed,
) -> Result<SensitivityMap> {
    if coils == 0 || width == 0 || height == 0 {
        return Err(Error::BadDims(format!(
            "need at least one coil and a non-empty grid, got {coils} coils on {width}x{height}"
        )));
    }
    let maps = match profile {
        SensitivityProfile::GaussianLobes => {
            let lobes = lobes(coils, width as f64, height as f64, seed);
            let mut maps = vec![ComplexImage::zeros(width, height, Domain::XSpace); coils];
            let mut values = vec![0.0; coils];
            for y in 0..height {
                for x in 0..width {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    for (v, lobe) in values.iter_mut().zip(&lobes) {
                        *v = lobe_value(lobe, px, py);
                    }
                    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for (m, v) in maps.iter_mut().zip(&values) {
                        m.set(x, y, C64::new(v / norm, 0.0));
                    }
                }
            }
            maps
        }
        SensitivityProfile::OrthogonalPhase { r } => {
            if r == 0 || r > coils {
                return Err(Error::BadDims(format!(
                    "orthogonal profile needs 1 <= r <= coils, got r={r} with {coils} coils"
                )));
            }
            if height % r != 0 {
                return Err(Error::NotDivisible { size: height, factor: r });
            }
            let fold = height / r;
            let lobes = lobes(coils, width as f64, fold as f64, seed);
            let group = |l: usize| l % r;
            let mut maps = vec![ComplexImage::zeros(width, height, Domain::XSpace); coils];
            let mut values = vec![0.0; coils];
            let mut energy = vec![0.0; r];
            for y in 0..height {
                let py = (y % fold) as f64 + 0.5;
                for x in 0..width {
                    let px = x as f64 + 0.5;
                    energy.iter_mut().for_each(|e| *e = 0.0);
                    for (l, (v, lobe)) in values.iter_mut().zip(&lobes).enumerate() {
                        *v = lobe_value(lobe, px, py);
                        energy[group(l)] += *v * *v;
                    }
                    for (l, (m, v)) in maps.iter_mut().zip(&values).enumerate() {
                        let g = group(l);
                        let mag = v / (r as f64 * energy[g]).sqrt();
                        let phase = TAU * (g * y) as f64 / height as f64;
                        m.set(x, y, C64::from_polar(mag, phase));
                    }
                }
            }
            maps
        }
    };
    SensitivityMap::new(maps)
}

/// The noise-free object `S_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: ComplexImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Zero,
    /// Centered disk of the given radius (pixels) and value; zero outside.
    Disk { radius: f64, value: f64 },
    /// Modified Shepp-Logan head, peak value 1.
    SheppLoganLike,
}

// (value, semi-axis a, semi-axis b, center x, center y, angle in degrees),
// coordinates normalized to [-1, 1].
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

pub fn synth_phantom(width: usize, height: usize, kind: PhantomKind) -> Phantom {
    let (cx, cy) = (0.5 * width as f64, 0.5 * height as f64);
    let image = ComplexImage::from_fn(width, height, Domain::XSpace, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let v = match kind {
            PhantomKind::Zero => 0.0,
            PhantomKind::Disk { radius, value } => {
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                if d < radius {
                    value
                } else {
                    0.0
                }
            }
            PhantomKind::SheppLoganLike => {
                let u = (px - cx) / cx;
                let v = (cy - py) / cy;
                SHEPP_LOGAN
                    .iter()
                    .filter(|&&(_, a, b, x0, y0, deg)| {
                        let t = deg * PI / 180.0;
                        let (du, dv) = (u - x0, v - y0);
                        let xr = du * t.cos() + dv * t.sin();
                        let yr = -du * t.sin() + dv * t.cos();
                        (xr / a).powi(2) + (yr / b).powi(2) <= 1.0
                    })
                    .map(|e| e.0)
                    .sum::<f64>()
                    .max(0.0)
            }
        };
        C64::new(v, 0.0)
    });
    Phantom { image }
}

const SMAP_MAGIC: &str = "SMAP";

/// Writes the SMAP v1 format: ASCII header `SMAP 1 <L> <M_x> <M_y>\n`, then
/// `L*M_x*M_y` little-endian `f64` (re, im) pairs, coil-major then row-major.
pub fn save_sensitivity(map: &SensitivityMap, path: &Path) -> Result<()> {
    let (w, h) = map.dims();
    let mut buf = Vec::with_capacity(64 + map.coils() * w * h * 16);
    write!(buf, "{SMAP_MAGIC} 1 {} {w} {h}\n", map.coils()).expect("write to Vec");
    for m in &map.maps {
        for z in m.as_slice() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Splits `<text header>\n<payload>` and returns the header tokens.
pub(crate) fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Vec<&'a str>, &'a [u8])> {
    let nl = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(path, "header is not ASCII"))?;
    Ok((header.split_ascii_whitespace().collect(), &bytes[nl + 1..]))
}

pub(crate) fn parse_count(tok: &str, what: &str, path: &Path) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| Error::parse(path, format!("bad {what} '{tok}'")))
}

pub fn load_sensitivity(path: &Path) -> Result<SensitivityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, payload) = split_header(&bytes, path)?;
    if tokens.len() != 5 || tokens[0] != SMAP_MAGIC || tokens[1] != "1" {
        return Err(Error::parse(path, "expected header 'SMAP 1 <L> <M_x> <M_y>'"));
    }
    let coils = parse_count(tokens[2], "coil count", path)?;
    let w = parse_count(tokens[3], "width", path)?;
    let h = parse_count(tokens[4], "height", path)?;
    if coils == 0 || w == 0 || h == 0 {
        return Err(Error::BadDims(format!("{coils} coils on {w}x{h}")));
    }
    let expected = coils
        .checked_mul(w)
        .and_then(|n| n.checked_mul(h))
        .and_then(|n| n.checked_mul(16))
        .ok_or_else(|| Error::parse(path, "header sizes overflow"))?;
    if payload.len() != expected {
        return Err(Error::parse(
            path,
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let mut values = payload.chunks_exact(8).map(|c| {
        f64::from_le_bytes(c.try_into().expect("chunk of 8"))
    });
    let mut maps = Vec::with_capacity(coils);
    for _ in 0..coils {
        let data: Vec<C64> = (0..w * h)
            .map(|_| {
                let re = values.next().expect("length checked");
                let im = values.next().expect("length checked");
                C64::new(re, im)
            })
            .collect();
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::parse(path, "non-finite sensitivity value"));
        }
        maps.push(ComplexImage::from_vec(w, h, data, Domain::XSpace)?);
    }
    SensitivityMap::new(maps)
}
