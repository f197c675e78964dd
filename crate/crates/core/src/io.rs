//! File formats for maps and covariance matrices.
//!
//! * FMAP: ASCII header `FMAP 1 <M_x> <M_y>\n` followed by `M_x*M_y`
//!   little-endian `f64`, row-major.
//! * CSV grid: `M_y` lines of `M_x` comma-separated values.
//! * PGM: binary 16-bit `P5`, linearly quantized between the map minimum and
//!   maximum, which are stored in a sidecar `<file>.txt` (`min <v>` and
//!   `max <v>` lines).
//! * Covariance CSV: `L` lines of `L` real values; complex covariances use a
//!   second file for the imaginary part.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::complex_linalg::{CMatrix, C64};
use crate::dft::RealImage;
use crate::error::{Error, Result};
use crate::noise_sim::{CoilCovariance, ScaleTag};
use crate::phantom::{parse_count, split_header};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_fmap(map: &RealImage, path: &Path) -> Result<()> {
    let (w, h) = map.dims();
    let mut buf = Vec::with_capacity(32 + 8 * w * h);
    write!(buf, "FMAP 1 {w} {h}\n").expect("write to Vec");
    for v in map.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write(path, &buf)
}

pub fn read_fmap(path: &Path) -> Result<RealImage> {
    let bytes = read(path)?;
    let (tokens, payload) = split_header(&bytes, path)?;
    if tokens.len() != 4 || tokens[0] != "FMAP" || tokens[1] != "1" {
        return Err(Error::parse(path, "expected header 'FMAP 1 <M_x> <M_y>'"));
    }
    let w = parse_count(tokens[2], "width", path)?;
    let h = parse_count(tokens[3], "height", path)?;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::parse(path, "header sizes overflow"))?;
    if payload.len() != expected {
        return Err(Error::parse(
            path,
            format!("payload is {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    RealImage::from_vec(w, h, data)
}

fn format_grid(rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut s = String::new();
    for row in rows {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            // shortest representation that parses back to the same f64
            write!(s, "{v:?}").expect("write to String");
        }
        s.push('\n');
    }
    s
}

fn parse_grid(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("line {}: bad number '{}'", n + 1, t.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "no data rows"));
    }
    let width = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::parse(
            path,
            format!("row {} has {} values, expected {width}", i + 1, r.len()),
        ));
    }
    Ok(rows)
}

pub fn write_csv(map: &RealImage, path: &Path) -> Result<()> {
    let (w, h) = map.dims();
    let s = format_grid((0..h).map(|y| (0..w).map(|x| map.get(x, y)).collect()));
    write(path, s.as_bytes())
}

pub fn read_csv(path: &Path) -> Result<RealImage> {
    let rows = parse_grid(path)?;
    let (w, h) = (rows[0].len(), rows.len());
    RealImage::from_vec(w, h, rows.into_iter().flatten().collect())
}

/// Sidecar path holding the PGM quantization range.
pub fn pgm_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn write_pgm16(map: &RealImage, path: &Path) -> Result<()> {
    let (w, h) = map.dims();
    let (lo, hi) = map.min_max();
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let mut buf = Vec::with_capacity(32 + 2 * w * h);
    write!(buf, "P5\n{w} {h}\n65535\n").expect("write to Vec");
    for v in map.as_slice() {
        let q = if span > 0.0 {
            ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    write(path, &buf)?;
    write(&pgm_sidecar(path), format!("min {lo:?}\nmax {hi:?}\n").as_bytes())
}

/// Reads a 16-bit PGM written by [`write_pgm16`] back to map units (up to
/// quantization, `span / 65535`).
pub fn read_pgm16(path: &Path) -> Result<RealImage> {
    let bytes = read(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::parse(path, "bad header"))?);
    }
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::parse(path, "expected a 16-bit binary PGM"));
    }
    let w = parse_count(fields[1], "width", path)?;
    let h = parse_count(fields[2], "height", path)?;
    let payload = &bytes[pos + 1..];
    if payload.len() != 2 * w * h {
        return Err(Error::parse(path, "PGM payload size does not match header"));
    }
    let sidecar = pgm_sidecar(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut lo = None;
    let mut hi = None;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let (Some(k), Some(v)) = (it.next(), it.next()) else { continue };
        let v: f64 = v.parse().map_err(|_| Error::parse(&sidecar, format!("bad value '{v}'")))?;
        match k {
            "min" => lo = Some(v),
            "max" => hi = Some(v),
            _ => {}
        }
    }
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Err(Error::parse(&sidecar, "missing min/max"));
    };
    let data = payload
        .chunks_exact(2)
        .map(|c| lo + (hi - lo) * u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    RealImage::from_vec(w, h, data)
}

/// `log10(1 + v)`, the display transform for maps with large dynamic range.
pub fn log_scale(map: &RealImage) -> RealImage {
    map.map(|v| (1.0 + v).log10())
}

pub fn load_covariance(real: &Path, imag: Option<&Path>, tag: ScaleTag) -> Result<CoilCovariance> {
    let re = parse_grid(real)?;
    let n = re.len();
    if re[0].len() != n {
        return Err(Error::parse(real, format!("covariance must be square, got {n}x{}", re[0].len())));
    }
    let im = match imag {
        Some(p) => {
            let im = parse_grid(p)?;
            if im.len() != n || im[0].len() != n {
                return Err(Error::dims(format!("{n}x{n}"), format!("{}x{} (imaginary part)", im.len(), im[0].len())));
            }
            Some(im)
        }
        None => None,
    };
    let m = CMatrix::from_fn(n, n, |i, j| C64::new(re[i][j], im.as_ref().map_or(0.0, |im| im[i][j])));
    CoilCovariance::new(m, tag)
}

/// Writes the real part (and the imaginary part, when `imag` is given).
pub fn save_covariance(cov: &CoilCovariance, real: &Path, imag: Option<&Path>) -> Result<()> {
    let m = cov.matrix();
    let n = m.rows();
    write(real, format_grid((0..n).map(|i| (0..n).map(|j| m[(i, j)].re).collect())).as_bytes())?;
    if let Some(p) = imag {
        write(p, format_grid((0..n).map(|i| (0..n).map(|j| m[(i, j)].im).collect())).as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RealImage {
        RealImage::from_fn(5, 3, |x, y| (x as f64 * 0.1 - y as f64).exp() * 1.0e3 / 7.0)
    }

    #[test]
    fn fmap_and_csv_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        let f = dir.path().join("a.fmap");
        write_fmap(&m, &f).unwrap();
        assert_eq!(read_fmap(&f).unwrap(), m);
        let c = dir.path().join("a.csv");
        write_csv(&m, &c).unwrap();
        assert_eq!(read_csv(&c).unwrap(), m);
        let header = fs::read(&f).unwrap();
        assert!(header.starts_with(b"FMAP 1 5 3\n"));
    }

    #[test]
    fn truncated_fmap_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.fmap");
        write_fmap(&sample(), &f).unwrap();
        let b = fs::read(&f).unwrap();
        fs::write(&f, &b[..b.len() - 1]).unwrap();
        assert!(matches!(read_fmap(&f), Err(Error::Parse { .. })));
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample();
        let p = dir.path().join("a.pgm");
        write_pgm16(&m, &p).unwrap();
        let back = read_pgm16(&p).unwrap();
        let (lo, hi) = m.min_max();
        let step = (hi - lo) / 65535.0;
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 * step + 1e-9);
        }
        let flat = RealImage::filled(2, 2, 3.0);
        write_pgm16(&flat, &p).unwrap();
        assert_eq!(read_pgm16(&p).unwrap(), flat);
    }

    #[test]
    fn covariance_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sigma = CMatrix::from_vec(
            2,
            2,
            vec![C64::new(2.0, 0.0), C64::new(0.3, 0.1), C64::new(0.3, -0.1), C64::new(1.5, 0.0)],
        )
        .unwrap();
        let cov = CoilCovariance::new(sigma, ScaleTag::XSpaceFull).unwrap();
        let (re, im) = (dir.path().join("re.csv"), dir.path().join("im.csv"));
        save_covariance(&cov, &re, Some(&im)).unwrap();
        let back = load_covariance(&re, Some(&im), ScaleTag::XSpaceFull).unwrap();
        assert_eq!(back.matrix(), cov.matrix());

        fs::write(&re, "1,0.5\n0.5\n").unwrap();
        assert!(matches!(load_covariance(&re, None, ScaleTag::XSpaceFull), Err(Error::Parse { .. })));
        fs::write(&re, "1,2\n2,1\n").unwrap();
        assert!(load_covariance(&re, None, ScaleTag::XSpaceFull).is_err());
    }

    #[test]
    fn log_scale_is_log1p_base10() {
        let m = RealImage::from_vec(2, 1, vec![0.0, 99.0]).unwrap();
        let l = log_scale(&m);
        assert_eq!(l.as_slice()[0], 0.0);
        assert!((l.as_slice()[1] - 2.0).abs() < 1e-15);
    }
}
