//! Dataset directories and grayscale map export.
//!
//! A dataset directory holds `classes.txt` (one class name per line) and, per
//! image, `images/<id>.rfwt` (a tensor container with a single `image`
//! entry) next to `labels/<id>.txt` in DOTA text format.

use std::fs;
use std::path::Path;

use rfw_tensor::{checkpoint, Tensor};

use super::dota::{dota_parse, dota_write};
use super::AnnotatedImage;
use crate::error::{Error, Result};

const IMAGE_ENTRY: &str = "image";

pub fn save_dataset(dir: &Path, images: &[AnnotatedImage], classes: &[&str]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    fs::write(dir.join("classes.txt"), classes.join("\n") + "\n")?;
    for img in images {
        checkpoint::save(
            dir.join("images").join(format!("{}.rfwt", img.id)),
            &[(IMAGE_ENTRY.to_string(), img.image.clone())],
        )?;
        fs::write(
            dir.join("labels").join(format!("{}.txt", img.id)),
            dota_write(&img.gts, classes)?,
        )?;
    }
    Ok(())
}

pub fn load_classes(dir: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(dir.join("classes.txt"))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Loads every image in id order; unknown class names in labels are errors.
pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let classes = load_classes(dir)?;
    let names: Vec<&str> = classes.iter().map(String::as_str).collect();
    let mut ids: Vec<String> = fs::read_dir(dir.join("images"))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".rfwt").map(String::from)
        })
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let entries = checkpoint::load(dir.join("images").join(format!("{id}.rfwt")))?;
            let image = entries
                .into_iter()
                .find(|(n, _)| n == IMAGE_ENTRY)
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("image file for {id} has no `{IMAGE_ENTRY}` entry"))
                })?;
            let label_path = dir.join("labels").join(format!("{id}.txt"));
            let parsed = dota_parse(&fs::read_to_string(&label_path)?, &names)?;
            if let Some(w) = parsed.warnings.first() {
                return Err(Error::config(format!("{}: {w}", label_path.display())));
            }
            AnnotatedImage::new(id, image, parsed.gts())
        })
        .collect()
}

/// Writes `[H, W]` values as an 8-bit binary PGM, min-max normalized.
///
/// A constant map is written as all zeros.
pub fn write_pgm(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::config(format!(
            "{} values do not form a {height}x{width} map",
            values.len()
        )));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads an 8-bit binary PGM as `(height, width, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Parse {
        line: 1,
        message: format!("{}: {m}", path.display()),
    };
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
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
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit binary PGM"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| bad("truncated pixels"))?;
    Ok((height, width, pixels.to_vec()))
}

/// Converts a `[N, 1, H, W]` map into per-image value planes.
pub fn planes(map: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, c, h, w) = map.dims4("planes")?;
    if c != 1 {
        return Err(Error::config(format!(
            "expected a single-channel map, got {c} channels"
        )));
    }
    Ok(map
        .data()
        .chunks(h * w)
        .take(n)
        .map(<[f64]>::to_vec)
        .collect())
}
