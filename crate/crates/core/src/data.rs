//! Image files, paired corpora and the synthetic toy corpus.
//!
//! A corpus directory holds `nir/` (8-bit grayscale PGM or PNG) and `rgb/`
//! (8-bit PNG) with matching file stems.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One aligned NIR/RGB example: `nir` is `(H,W,1)`, `rgb` is `(H,W,3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub nir: Tensor<f64>,
    pub rgb: Tensor<f64>,
}

impl Pair {
    pub fn size(&self) -> (usize, usize) {
        (self.nir.shape()[0], self.nir.shape()[1])
    }
}

fn to_unit(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads any supported image as `(H,W,1)` luminance in `[0,1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Tensor::new(&[h as usize, w as usize, 1], to_unit(img.as_raw()))
}

/// Reads any supported image as `(H,W,3)` RGB in `[0,1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(&[h as usize, w as usize, 3], to_unit(img.as_raw()))
}

fn hw(img: &Tensor<f64>, channels: usize) -> Result<(u32, u32)> {
    match img.shape() {
        [h, w, c] if *c == channels => Ok((*w as u32, *h as u32)),
        s => Err(Error::shape(
            "write_image",
            format!("expected (H, W, {channels}), got {s:?}"),
        )),
    }
}

/// Writes `(H,W,3)` values in `[0,1]` as an 8-bit PNG.
pub fn write_rgb_png(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let (w, h) = hw(img, 3)?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    image::save_buffer_with_format(path, &bytes, w, h, ExtendedColorType::Rgb8, ImageFormat::Png)?;
    Ok(())
}

/// Writes `(H,W,1)` values as binary PGM, or PNG when the extension says so.
pub fn write_gray(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let (w, h) = hw(img, 1)?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        image::save_buffer_with_format(path, &bytes, w, h, ExtendedColorType::L8, ImageFormat::Png)?;
    } else {
        let out = BufWriter::new(File::create(path)?);
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&bytes, w, h, ExtendedColorType::L8)?;
    }
    Ok(())
}

/// Files in `dir` whose extension (case-insensitive) is in `exts`, keyed by
/// stem. A missing directory yields an empty map.
pub fn list_images(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), ext) {
            if exts.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Matches two name → path maps by key; unmatched names are reported as
/// orphans.
pub fn match_names<A, B>(
    left: BTreeMap<String, A>,
    mut right: BTreeMap<String, B>,
    left_label: &str,
    right_label: &str,
) -> Result<Vec<(String, A, B)>> {
    let mut orphans = Vec::new();
    let mut pairs = Vec::new();
    for (name, a) in left {
        match right.remove(&name) {
            Some(b) => pairs.push((name, a, b)),
            None => orphans.push(format!("{left_label}/{name}")),
        }
    }
    orphans.extend(right.into_keys().map(|n| format!("{right_label}/{n}")));
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unpaired files: {}", orphans.join(", "))));
    }
    if pairs.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    Ok(pairs)
}

/// Loads every matched pair under `root/nir` and `root/rgb`, sorted by name.
pub fn load_pairs(root: &Path) -> Result<Vec<Pair>> {
    let nir = list_images(&root.join("nir"), &["pgm", "png"])?;
    let rgb = list_images(&root.join("rgb"), &["png"])?;
    let mut out = Vec::new();
    for (name, np, rp) in match_names(nir, rgb, "nir", "rgb")? {
        let nir = read_gray(&np)?;
        let rgb = read_rgb(&rp)?;
        if nir.shape()[..2] != rgb.shape()[..2] {
            return Err(Error::Data(format!(
                "{name}: NIR is {:?} but RGB is {:?}",
                &nir.shape()[..2],
                &rgb.shape()[..2]
            )));
        }
        out.push(Pair { name, nir, rgb });
    }
    Ok(out)
}

/// Writes pairs in the corpus layout read by [`load_pairs`].
pub fn write_pairs(root: &Path, pairs: &[Pair]) -> Result<()> {
    std::fs::create_dir_all(root.join("nir"))?;
    std::fs::create_dir_all(root.join("rgb"))?;
    for p in pairs {
        write_gray(&root.join("nir").join(format!("{}.pgm", p.name)), &p.nir)?;
        write_rgb_png(&root.join("rgb").join(format!("{}.png", p.name)), &p.rgb)?;
    }
    Ok(())
}

/// Deterministic smooth color fields with a NIR rendering.
///
/// Each RGB channel is a sum of two low-frequency sinusoids; NIR is a fixed
/// channel mix plus a high-frequency texture term shared with the color.
/// Values are quantized to 8 bits so files reload bit-exactly.
pub fn synthetic_pairs(n: usize, side: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    (0..n)
        .map(|k| {
            let waves: Vec<[f64; 4]> = (0..6)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.1..0.25),
                    ]
                })
                .collect();
            let tex = [rng.random_range(4.0..7.0), rng.random_range(4.0..7.0)];
            let mut rgb = Vec::with_capacity(side * side * 3);
            let mut nir = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
                    let t =
                        0.05 * (tex[0] * u * std::f64::consts::TAU).sin() * (tex[1] * v * std::f64::consts::TAU).cos();
                    let mut c = [0.0; 3];
                    for (ch, cv) in c.iter_mut().enumerate() {
                        let s: f64 = waves[2 * ch..2 * ch + 2]
                            .iter()
                            .map(|w| w[3] * (std::f64::consts::TAU * (w[0] * u + w[1] * v) + w[2]).sin())
                            .sum();
                        *cv = q(0.5 + s + t);
                    }
                    nir.push(q(0.25 * c[0] + 0.55 * c[1] + 0.2 * c[2] + 1.5 * t));
                    rgb.extend(c);
                }
            }
            Pair {
                name: format!("toy{k:02}"),
                nir: Tensor::new(&[side, side, 1], nir).expect("shape"),
                rgb: Tensor::new(&[side, side, 3], rgb).expect("shape"),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpus_is_deterministic_and_in_range() {
        let a = synthetic_pairs(3, 16, 1);
        assert_eq!(a, synthetic_pairs(3, 16, 1));
        assert_ne!(a[0].rgb, a[1].rgb);
        for p in &a {
            assert!(p.rgb.data().iter().chain(p.nir.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic_pairs(2, 8, 2);
        write_pairs(dir.path(), &pairs).unwrap();
        let loaded = load_pairs(dir.path()).unwrap();
        assert_eq!(loaded, pairs);
    }

    #[test]
    fn orphans_and_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic_pairs(2, 8, 2);
        write_pairs(dir.path(), &pairs).unwrap();
        std::fs::remove_file(dir.path().join("rgb/toy01.png")).unwrap();
        let err = load_pairs(dir.path()).unwrap_err().to_string();
        assert!(err.contains("nir/toy01"), "{err}");
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_pairs(empty.path()), Err(Error::Data(_))));
    }

    #[test]
    fn png_gray_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = Tensor::from_fn(&[3, 5, 1], |i| i as f64 / 255.0);
        write_gray(&p, &img).unwrap();
        assert_eq!(read_gray(&p).unwrap(), img);
    }
}
