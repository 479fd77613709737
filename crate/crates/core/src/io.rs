//! Image and model files.
//!
//! Float raw images are little-endian: the 8-byte magic `MSRAW64\0`, then
//! width, height and channel count as `u32`, then `w·h·c` `f64` samples in
//! row-major, channel-interleaved order. They round-trip bit-exactly.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::medium::{read_medium, write_medium, MediumField};
use crate::projective::{read_cameras, write_cameras, CameraView};
use crate::scene::{read_scene, write_scene, GaussianCloud};

pub const RAW_MAGIC: &[u8; 8] = b"MSRAW64\0";

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + img.data().len() * 8);
    buf.extend_from_slice(RAW_MAGIC);
    for d in [img.width(), img.height(), img.channels()] {
        let d = u32::try_from(d).map_err(|_| Error::Shape("image dimension exceeds u32".into()))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in img.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::parse(&path.display().to_string(), 0, m);
    if bytes.len() < 20 || &bytes[..8] != RAW_MAGIC {
        return Err(bad("missing float raw header"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() != 20 + n * 8 {
        return Err(bad("payload size does not match the header"));
    }
    let data = bytes[20..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Image::from_vec(w, h, c, data)
}

/// 8-bit PNG; one-channel images are written as grayscale, three-channel as
/// RGB. Values are clamped to `[0, 1]` and rounded.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let bytes: Vec<u8> = img.data().iter().map(|&v| q(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    }
    .expect("buffer size matches")?;
    Ok(())
}

/// Reads any 8-bit PNG as RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::from_vec(w, h, 3, data)
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Dispatches on the extension: `.raw` or `.png`.
pub fn read_image(path: &Path) -> Result<Image> {
    match extension(path).as_str() {
        "raw" => read_raw(path),
        "png" => read_png(path),
        e => Err(Error::InvalidArgument(format!("{}: unsupported image extension `{e}`", path.display()))),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match extension(path).as_str() {
        "raw" => write_raw(path, img),
        "png" => write_png(path, img),
        e => Err(Error::InvalidArgument(format!("{}: unsupported image extension `{e}`", path.display()))),
    }
}

/// Image files (`.raw` / `.png`) in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && matches!(extension(&p).as_str(), "raw" | "png") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_images(dir: &Path) -> Result<Vec<Image>> {
    list_images(dir)?.iter().map(|p| read_image(p)).collect()
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraView>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cameras(BufReader::new(f))
}

pub fn save_cameras(path: &Path, cams: &[CameraView]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_cameras(cams, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<GaussianCloud> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scene(BufReader::new(f))
}

pub fn save_scene(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_scene(cloud, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_medium(path: &Path) -> Result<MediumField> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_medium(BufReader::new(f))
}

pub fn save_medium(path: &Path, field: &MediumField) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_medium(field, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.raw");
        let img = Image::from_fn(5, 3, 3, |x, y, c| (x as f64 + 0.1).sqrt() * (y + c) as f64 / 7.0 - 0.3);
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        fs::write(&p, b"junk").unwrap();
        assert!(matches!(read_raw(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(4, 2, 3, |x, y, c| ((x + 2 * y + c) * 20) as f64 / 255.0);
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.raw", "a.raw", "c.txt"] {
            write_text(&dir.path().join(n), "").unwrap();
        }
        let names: Vec<_> = list_images(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["a.raw", "b.raw"]);
    }

    #[test]
    fn missing_file_names_path() {
        let e = load_scene(Path::new("/nonexistent/scene.txt")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/scene.txt"));
    }
}
