//! Training and inference patch placement.
//!
//! Disc-centered sampling draws patches that always contain the whole disc
//! bounding box, at a uniformly random shift of the disc's center of mass
//! among the shifts that keep both the disc and the patch inside the image.
//! Corner patches and the sliding-window tiling complete the patch set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{mask_stats, DiscRegion, SegMask};
use crate::tensor::{reflect_index, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Fraction `r` of the tiling count drawn as disc patches.
    pub ratio: f64,
    /// Minimum disc pixels `T` inside a disc patch's output rectangle.
    pub min_positive: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    /// Context pixels added on every side of the output rectangle.
    pub margin: usize,
    pub include_corners: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            min_positive: 500,
            patch_w: 388,
            patch_h: 388,
            margin: 92,
            include_corners: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("sampler ratio must be in (0, 1], got {}", self.ratio)));
        }
        if self.patch_w == 0 || self.patch_h == 0 {
            return Err(Error::Config("sampler patch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Disc,
    Corner,
    Tile,
    Uniform,
}

/// Output rectangle in image coordinates plus the context margin. The input
/// rectangle is the output rectangle grown by `margin` on each side and may
/// extend past the image; [`extract`] mirrors those pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub margin: usize,
    pub kind: PatchKind,
}

impl PatchSpec {
    /// `(x, y, w, h)` of the input rectangle, possibly negative.
    pub fn input_rect(&self) -> (isize, isize, usize, usize) {
        let m = self.margin as isize;
        (self.x as isize - m, self.y as isize - m, self.w + 2 * self.margin, self.h + 2 * self.margin)
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// `ceil(r · P)`.
pub fn disc_patch_count(ratio: f64, population: usize) -> usize {
    (ratio * population as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Inclusive ranges of admissible patch top-left corners: the patch holds
/// the full disc bounding box and lies inside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeasibleRange {
    pub x: (usize, usize),
    pub y: (usize, usize),
}

impl FeasibleRange {
    pub fn cells(&self) -> usize {
        (self.x.1 - self.x.0 + 1) * (self.y.1 - self.y.0 + 1)
    }
}

fn axis_range(lo_box: usize, hi_box: usize, patch: usize, extent: usize) -> Option<(usize, usize)> {
    if patch > extent {
        return None;
    }
    let lo = (hi_box + 1).saturating_sub(patch);
    let hi = lo_box.min(extent - patch);
    (lo <= hi).then_some((lo, hi))
}

pub fn feasible_range(region: &DiscRegion, width: usize, height: usize, cfg: &SamplerConfig) -> Option<FeasibleRange> {
    let b = region.bbox;
    Some(FeasibleRange {
        x: axis_range(b.x0, b.x1, cfg.patch_w, width)?,
        y: axis_range(b.y0, b.y1, cfg.patch_h, height)?,
    })
}

/// Top-left corner of the patch centered on the rounded center of mass.
pub fn zero_shift_origin(region: &DiscRegion, cfg: &SamplerConfig) -> (isize, isize) {
    let (cx, cy) = region.center_of_mass;
    (cx.round() as isize - (cfg.patch_w / 2) as isize, cy.round() as isize - (cfg.patch_h / 2) as isize)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiscSample {
    pub patches: Vec<PatchSpec>,
    pub warnings: Vec<String>,
}

/// Draw `ceil(r·P)` disc patches for one image.
///
/// The shift `(a, b)` of the rounded center of mass is uniform over all
/// shifts whose patch contains the disc bounding box and stays inside the
/// image. When the box is larger than the patch a single centered patch,
/// clamped to the image, is returned with a warning.
pub fn sample_disc_patches<R: Rng + ?Sized>(
    mask: &SegMask,
    cfg: &SamplerConfig,
    population: usize,
    rng: &mut R,
) -> Result<DiscSample> {
    let (width, height) = (mask.width(), mask.height());
    if cfg.patch_w > width || cfg.patch_h > height {
        return Err(Error::Sampling(format!(
            "patch {}x{} larger than image {width}x{height}",
            cfg.patch_w, cfg.patch_h
        )));
    }
    let stats = mask_stats(mask);
    let Some(region) = stats.region else {
        return Err(Error::Sampling("mask has no disc pixels".into()));
    };
    if stats.positive_count < cfg.min_positive {
        return Err(Error::Sampling(format!(
            "disc has {} pixels, below the floor of {}",
            stats.positive_count, cfg.min_positive
        )));
    }
    let n = disc_patch_count(cfg.ratio, population);
    let spec = |x, y| PatchSpec { x, y, w: cfg.patch_w, h: cfg.patch_h, margin: cfg.margin, kind: PatchKind::Disc };

    let Some(range) = feasible_range(&region, width, height, cfg) else {
        let (ox, oy) = zero_shift_origin(&region, cfg);
        let x = ox.clamp(0, (width - cfg.patch_w) as isize) as usize;
        let y = oy.clamp(0, (height - cfg.patch_h) as isize) as usize;
        let b = region.bbox;
        return Ok(DiscSample {
            patches: vec![spec(x, y)],
            warnings: vec![format!(
                "disc box {}x{} exceeds patch {}x{}; using one centered patch",
                b.width(),
                b.height(),
                cfg.patch_w,
                cfg.patch_h
            )],
        });
    };

    let patches = (0..n)
        .map(|_| {
            let x = rng.random_range(range.x.0..=range.x.1);
            let y = rng.random_range(range.y.0..=range.y.1);
            spec(x, y)
        })
        .collect();
    Ok(DiscSample { patches, warnings: Vec::new() })
}

/// Patches placed uniformly over the image without regard to the disc.
pub fn uniform_patches<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    cfg: &SamplerConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PatchSpec>> {
    if cfg.patch_w > width || cfg.patch_h > height {
        return Err(Error::Sampling(format!(
            "patch {}x{} larger than image {width}x{height}",
            cfg.patch_w, cfg.patch_h
        )));
    }
    Ok((0..count)
        .map(|_| PatchSpec {
            x: rng.random_range(0..=width - cfg.patch_w),
            y: rng.random_range(0..=height - cfg.patch_h),
            w: cfg.patch_w,
            h: cfg.patch_h,
            margin: cfg.margin,
            kind: PatchKind::Uniform,
        })
        .collect())
}

/// One patch flush with each image corner, duplicates removed.
pub fn corner_patches(width: usize, height: usize, cfg: &SamplerConfig) -> Result<Vec<PatchSpec>> {
    if cfg.patch_w > width || cfg.patch_h > height {
        return Err(Error::Sampling(format!(
            "image {width}x{height} smaller than patch {}x{}",
            cfg.patch_w, cfg.patch_h
        )));
    }
    let (xr, yb) = (width - cfg.patch_w, height - cfg.patch_h);
    let mut out: Vec<PatchSpec> = Vec::with_capacity(4);
    for (x, y) in [(0, 0), (xr, 0), (0, yb), (xr, yb)] {
        let p = PatchSpec { x, y, w: cfg.patch_w, h: cfg.patch_h, margin: cfg.margin, kind: PatchKind::Corner };
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn tile_starts(extent: usize, patch: usize) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let n = extent.div_ceil(patch);
    let mut starts: Vec<usize> = (0..n - 1).map(|i| i * patch).collect();
    starts.push(extent - patch);
    starts
}

/// Sliding-window grid stepping by the patch size; the last row and column
/// are moved back to sit flush with the border. An image smaller than the
/// patch gets a single tile at the origin.
pub fn tiling(width: usize, height: usize, patch_w: usize, patch_h: usize, margin: usize) -> Vec<PatchSpec> {
    let xs = tile_starts(width, patch_w);
    let ys = tile_starts(height, patch_h);
    ys.iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| PatchSpec { x, y, w: patch_w, h: patch_h, margin, kind: PatchKind::Tile })
        })
        .collect()
}

/// Copy the input rectangle of `spec` out of a `(C, H, W)` image, mirroring
/// coordinates that fall outside it.
pub fn extract<T: Real>(image: &Tensor<T>, spec: &PatchSpec) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    let (x0, y0, iw, ih) = spec.input_rect();
    let cols: Vec<usize> = (0..iw as isize).map(|dx| reflect_index(x0 + dx, w)).collect();
    let rows: Vec<usize> = (0..ih as isize).map(|dy| reflect_index(y0 + dy, h)).collect();
    let src = image.data();
    let mut out = Vec::with_capacity(c * ih * iw);
    for ch in 0..c {
        for &r in &rows {
            let row = &src[(ch * h + r) * w..(ch * h + r + 1) * w];
            out.extend(cols.iter().map(|&cx| row[cx]));
        }
    }
    Tensor::new(&[c, ih, iw], out)
}
