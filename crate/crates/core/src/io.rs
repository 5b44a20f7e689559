//! Dataset manifests and raster I/O.
//!
//! A manifest is a TOML document:
//!
//! ```toml
//! format = 1
//! name = "drive"
//!
//! [geometry]          # optional; defaults to 388 → 572
//! output_w = 388
//! output_h = 388
//! input_w = 572
//! input_h = 572
//!
//! [[records]]
//! id = "01"
//! image = "images/01.png"
//! mask = "masks/01.png"   # optional
//! split = "train"         # train | test | unsplit
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::tensor::Tensor;
use crate::unet::{margin_for_depth, output_extent};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unsplit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
}

/// Output patch `w × h` and network input `(w+p) × (h+q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGeometry {
    pub output_w: usize,
    pub output_h: usize,
    pub input_w: usize,
    pub input_h: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self { output_w: 388, output_h: 388, input_w: 572, input_h: 572 }
    }
}

impl PatchGeometry {
    /// Depth of the valid-conv layout this geometry belongs to.
    pub fn depth(&self) -> Result<usize> {
        let bad = || {
            Error::Geometry(format!(
                "geometry {}x{} → {}x{} matches no network depth",
                self.output_w, self.output_h, self.input_w, self.input_h
            ))
        };
        let (pw, ph) = (
            self.input_w.checked_sub(self.output_w).ok_or_else(bad)?,
            self.input_h.checked_sub(self.output_h).ok_or_else(bad)?,
        );
        if pw != ph || pw % 2 != 0 {
            return Err(bad());
        }
        let depth = (1..=10).find(|&d| 2 * margin_for_depth(d) == pw).ok_or_else(bad)?;
        if output_extent(depth, self.input_w) != Some(self.output_w)
            || output_extent(depth, self.input_h) != Some(self.output_h)
        {
            return Err(bad());
        }
        Ok(depth)
    }

    pub fn margin(&self) -> usize {
        (self.input_w - self.output_w) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: u32,
    pub name: String,
    #[serde(default)]
    pub geometry: PatchGeometry,
    pub records: Vec<Record>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Serialize to `path`, with record paths kept as stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

/// Parse and validate a manifest: format, unique ids, existing files and a
/// geometry that matches some network depth.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_text(path)?;
    let mut m: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Parse { path: path.into(), message: e.to_string() })?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Parse {
            path: path.into(),
            message: format!("unsupported manifest format {} (expected {MANIFEST_FORMAT})", m.format),
        });
    }
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = std::collections::HashSet::new();
    for r in &m.records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Parse { path: path.into(), message: format!("duplicate id {:?}", r.id) });
        }
        for p in std::iter::once(&r.image).chain(r.mask.as_ref()) {
            let full = m.resolve(p);
            if !full.is_file() {
                return Err(Error::MissingFile(full));
            }
        }
    }
    m.geometry.depth()?;
    Ok(m)
}

fn open_raster(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let raster = |e: &dyn std::fmt::Display| Error::Raster { path: path.into(), message: e.to_string() };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| raster(&e))
}

/// RGB raster as a `(3, H, W)` tensor with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&open_raster(path)?.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("rgb image is non-empty")
}

/// Single-channel raster, nonzero = disc.
pub fn load_mask(path: &Path) -> Result<SegMask> {
    let g = open_raster(path)?.to_luma8();
    SegMask::new(g.width() as usize, g.height() as usize, g.into_raw())
}

/// Lossless single-channel PNG, disc = 255.
pub fn save_mask(mask: &SegMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::Raster { path: path.into(), message: e.to_string() })
}

/// Disc-class probability as an 8-bit grayscale PNG.
pub fn save_probability_map(probs: &Tensor<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = probs.chw()?;
    let q1 = &probs.data()[h * w..];
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(q1[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Raster { path: path.into(), message: e.to_string() })
}

/// An image and its optional truth mask, dimensions checked.
pub fn load_record(manifest: &DatasetManifest, record: &Record) -> Result<(Tensor<f32>, Option<SegMask>)> {
    let img = load_image(&manifest.resolve(&record.image))?;
    let mask = match &record.mask {
        Some(p) => {
            let m = load_mask(&manifest.resolve(p))?;
            let (_, h, w) = img.chw()?;
            if (m.width(), m.height()) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "{}: image {w}x{h}, mask {}x{}",
                    record.id,
                    m.width(),
                    m.height()
                )));
            }
            Some(m)
        }
        None => None,
    };
    Ok((img, mask))
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const FP_COLOR: [u8; 3] = [0, 255, 0];
pub const FN_COLOR: [u8; 3] = [255, 0, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

/// Color-coded comparison: TP white, FP green, FN red, TN black.
pub fn render_overlay(image: &Tensor<f32>, pred: &SegMask, truth: &SegMask) -> Result<RgbImage> {
    pred.same_size(truth)?;
    let (_, h, w) = image.chw()?;
    if (w, h) != (pred.width(), pred.height()) {
        return Err(Error::DimensionMismatch(format!(
            "image {w}x{h} vs masks {}x{}",
            pred.width(),
            pred.height()
        )));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb(match (pred.get(x, y), truth.get(x, y)) {
            (true, true) => TP_COLOR,
            (true, false) => FP_COLOR,
            (false, true) => FN_COLOR,
            (false, false) => TN_COLOR,
        })
    }))
}

pub fn save_overlay(image: &Tensor<f32>, pred: &SegMask, truth: &SegMask, path: &Path) -> Result<()> {
    render_overlay(image, pred, truth)?
        .save(path)
        .map_err(|e| Error::Raster { path: path.into(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip_and_binarization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = SegMask::from_fn(13, 7, |x, y| (x * y) % 3 == 1);
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);

        let raw = GrayImage::from_raw(2, 2, vec![0, 255, 1, 0]).unwrap();
        raw.save(&p).unwrap();
        assert_eq!(load_mask(&p).unwrap().data(), &[0, 1, 1, 0]);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(Error::MissingFile(_))));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"definitely not a png").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Raster { .. })));
    }

    #[test]
    fn default_geometry_is_depth_four() {
        let g = PatchGeometry::default();
        assert_eq!((g.output_w, g.input_w), (388, 572));
        assert_eq!(g.depth().unwrap(), 4);
        assert_eq!(g.margin(), 92);
        let bad = PatchGeometry { output_w: 836, output_h: 836, input_w: 1040, input_h: 1040 };
        assert!(bad.depth().is_err());
    }

    #[test]
    fn overlay_colors() {
        let img = Tensor::zeros(&[3, 1, 4]);
        let pred = SegMask::new(4, 1, vec![1, 1, 0, 0]).unwrap();
        let truth = SegMask::new(4, 1, vec![1, 0, 1, 0]).unwrap();
        let o = render_overlay(&img, &pred, &truth).unwrap();
        let px: Vec<[u8; 3]> = o.pixels().map(|p| p.0).collect();
        assert_eq!(px, vec![TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR]);
        assert!(render_overlay(&Tensor::zeros(&[3, 2, 4]), &pred, &truth).is_err());
    }
}
