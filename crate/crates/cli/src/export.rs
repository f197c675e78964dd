//! Map and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use sense_noise::{io, Error, RealImage};

use crate::config::{bad, CliResult, Format, Output};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e).into())
}

pub fn write_map(map: &RealImage, path: &Path, format: Format) -> CliResult<()> {
    match format {
        Format::Fmap => io::write_fmap(map, path)?,
        Format::Csv => io::write_csv(map, path)?,
        Format::Pgm => io::write_pgm16(map, path)?,
    }
    Ok(())
}

/// Writes `map` as `<dir>/<name>.<ext>` in every requested format, recording
/// the file names (relative to the output directory) in `artifacts`. The
/// log-scale option only applies to PGM files of non-negative maps.
pub fn export_map(
    out: &Output,
    name: &str,
    map: &RealImage,
    artifacts: &mut BTreeMap<String, String>,
) -> CliResult<()> {
    for &format in &out.formats {
        let file = format!("{name}.{}", format.extension());
        let path = out.dir.join(&file);
        if format == Format::Pgm && out.log_scale && map.min_max().0 >= 0.0 {
            write_map(&io::log_scale(map), &path, format)?;
            artifacts.insert(file, format!("{name} (log10(1 + v))"));
        } else {
            write_map(map, &path, format)?;
            artifacts.insert(file, name.to_string());
        }
    }
    Ok(())
}

/// Reads a map, choosing the format from the file extension.
pub fn read_map(path: &Path) -> CliResult<RealImage> {
    let map = match Format::from_path(path) {
        Some(Format::Fmap) => io::read_fmap(path)?,
        Some(Format::Csv) => io::read_csv(path)?,
        Some(Format::Pgm) => io::read_pgm16(path)?,
        None => return bad(format!("{}: unknown map extension (use .fmap, .csv or .pgm)", path.display())),
    };
    Ok(map)
}

pub fn map_format(path: &Path) -> CliResult<Format> {
    match Format::from_path(path) {
        Some(f) => Ok(f),
        None => bad(format!("{}: unknown map extension (use .fmap, .csv or .pgm)", path.display())),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

/// 1 on masked pixels, 0 elsewhere.
pub fn mask_image(width: usize, height: usize, mask: &[bool]) -> RealImage {
    RealImage::from_fn(width, height, |x, y| if mask[y * width + x] { 1.0 } else { 0.0 })
}
