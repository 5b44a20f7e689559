//! Synthetic fundus-like images for end-to-end runs.
//!
//! Each image has a dark background outside a circular field of view, a
//! reddish vignetted retina, a bright elliptical disc, dark vessels that
//! radiate from the disc and cross it, a few small bright spots elsewhere
//! and Gaussian noise. The truth mask is the ellipse.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{save_mask, DatasetManifest, PatchGeometry, Record, Split, MANIFEST_FORMAT};
use crate::mask::SegMask;

/// Field-of-view radius as a fraction of the shorter image side.
pub const FOV_RADIUS: f64 = 0.47;
/// Range of disc area as a fraction of the field of view.
pub const DISC_FRACTION: (f64, f64) = (0.035, 0.085);

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Largest allowed disc bounding box side; use the output patch size.
    pub max_disc_extent: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synth count must be at least 1".into()));
        }
        if self.width.min(self.height) < 32 {
            return Err(Error::Config(format!("synth image {}x{} is too small", self.width, self.height)));
        }
        if self.max_disc_extent < 8 {
            return Err(Error::Config("synth disc extent must be at least 8".into()));
        }
        Ok(())
    }
}

pub struct SynthSample {
    pub image: RgbImage,
    pub mask: SegMask,
    /// Pixel area of the field of view.
    pub fov_area: usize,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: below 1 inside, 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        (u * u + v * v).sqrt()
    }

    fn half_extent(&self) -> (f64, f64) {
        let (c2, s2) = (self.cos * self.cos, self.sin * self.sin);
        let (a2, b2) = (self.a * self.a, self.b * self.b);
        ((a2 * c2 + b2 * s2).sqrt(), (a2 * s2 + b2 * c2).sqrt())
    }
}

fn smooth_noise(rng: &mut ChaCha8Rng) -> impl Fn(f64, f64) -> f64 {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.01..0.04);
            (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.05))
        })
        .collect();
    move |x, y| waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin()).sum()
}

/// Generate image `index` of the dataset described by `cfg`.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = (cfg.width, cfg.height);
    let (fx, fy) = (w as f64 / 2.0, h as f64 / 2.0);
    let fov_r = FOV_RADIUS * w.min(h) as f64;

    let frac = rng.random_range(DISC_FRACTION.0..DISC_FRACTION.1);
    let aspect = rng.random_range(0.85..1.15);
    let theta: f64 = rng.random_range(0.0..PI);
    let area = frac * PI * fov_r * fov_r;
    let mut disc = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: (area * aspect / PI).sqrt(),
        b: (area / aspect / PI).sqrt(),
        cos: theta.cos(),
        sin: theta.sin(),
    };
    // keep the rasterized bounding box within the patch
    let (ex, ey) = disc.half_extent();
    let limit = (cfg.max_disc_extent as f64 - 3.0) / 2.0;
    let shrink = (limit / ex.max(ey)).min(1.0);
    disc.a *= shrink;
    disc.b *= shrink;
    let reach = fov_r - disc.a.max(disc.b) - 3.0;
    let r = reach.max(0.0) * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    disc.cx = fx + r * phi.cos();
    disc.cy = fy + r * phi.sin();

    let shade = smooth_noise(&mut rng);
    let disc_color = [rng.random_range(0.9..1.0), rng.random_range(0.78..0.9), rng.random_range(0.5..0.65)];
    let retina = [rng.random_range(0.55..0.68), rng.random_range(0.25..0.33), rng.random_range(0.1..0.16)];

    let mut vessel = vec![0.0f64; w * h];
    let n_vessels = rng.random_range(5..=8);
    for _ in 0..n_vessels {
        let mut dir: f64 = rng.random_range(0.0..2.0 * PI);
        let (mut x, mut y) = (
            disc.cx + rng.random_range(-0.3..0.3) * disc.a,
            disc.cy + rng.random_range(-0.3..0.3) * disc.b,
        );
        let radius: f64 = rng.random_range(0.8..1.8);
        let length = rng.random_range(0.5..1.2) * fov_r;
        let bend = Normal::new(0.0, 0.05).expect("valid sigma");
        let mut walked = 0.0;
        while walked < length {
            let ri = radius.ceil() as isize + 1;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (px, py) = (x.round() as isize + dx, y.round() as isize + dy);
                    if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                        continue;
                    }
                    let d = ((px as f64 - x).powi(2) + (py as f64 - y).powi(2)).sqrt();
                    let s = (radius + 0.5 - d).clamp(0.0, 1.0);
                    let v = &mut vessel[py as usize * w + px as usize];
                    *v = v.max(s);
                }
            }
            dir += bend.sample(&mut rng);
            x += dir.cos();
            y += dir.sin();
            walked += 1.0;
            if ((x - fx).powi(2) + (y - fy).powi(2)).sqrt() > fov_r {
                break;
            }
        }
    }

    let spots: Vec<(f64, f64, f64)> = (0..rng.random_range(0..=3))
        .filter_map(|_| {
            let r = fov_r * 0.85 * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let (sx, sy) = (fx + r * phi.cos(), fy + r * phi.sin());
            let rad = rng.random_range(1.5..3.5);
            (disc.radius(sx, sy) > 1.6).then_some((sx, sy, rad))
        })
        .collect();

    let noise = Normal::new(0.0, 0.015).expect("valid sigma");
    let mut image = RgbImage::new(w as u32, h as u32);
    let mut mask = SegMask::empty(w, h);
    let mut fov_area = 0;
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let d = ((xf - fx).powi(2) + (yf - fy).powi(2)).sqrt();
            let inside_fov = d <= fov_r;
            fov_area += inside_fov as usize;
            let e = disc.radius(xf, yf);
            if e <= 1.0 {
                mask.set(x, y, true);
            }
            let mut px = if inside_fov {
                let light = (1.0 - 0.35 * (d / fov_r).powi(2)) * (1.0 + shade(xf, yf));
                let mut c = retina.map(|v| v * light);
                // blend weight is 1/2 exactly on the ellipse boundary
                let t = ((1.06 - e) / 0.12).clamp(0.0, 1.0);
                let cup = if e < 0.4 { 0.05 } else { 0.0 };
                for ch in 0..3 {
                    c[ch] = c[ch] * (1.0 - t) + (disc_color[ch] + cup) * t;
                }
                for &(sx, sy, rad) in &spots {
                    let s = (rad + 0.5 - ((xf - sx).powi(2) + (yf - sy).powi(2)).sqrt()).clamp(0.0, 1.0);
                    c = [c[0] * (1.0 - s) + 0.92 * s, c[1] * (1.0 - s) + 0.82 * s, c[2] * (1.0 - s) + 0.42 * s];
                }
                let v = vessel[y * w + x];
                [c[0] * (1.0 - 0.45 * v), c[1] * (1.0 - 0.55 * v), c[2] * (1.0 - 0.5 * v)]
            } else {
                [0.02; 3]
            };
            for c in &mut px {
                *c += noise.sample(&mut rng);
            }
            image.put_pixel(x as u32, y as u32, Rgb(px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)));
        }
    }
    SynthSample { image, mask, fov_area }
}

/// Write `cfg.count` images and masks under `dir` plus `dir/manifest.toml`.
pub fn synth_dataset(dir: &Path, cfg: &SynthConfig, geometry: PatchGeometry) -> Result<DatasetManifest> {
    cfg.validate()?;
    geometry.depth()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let digits = cfg.count.to_string().len().max(3);
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let id = format!("synth{i:0digits$}");
        let sample = synth_sample(cfg, i);
        let image = PathBuf::from("images").join(format!("{id}.png"));
        let mask = PathBuf::from("masks").join(format!("{id}.png"));
        let full = dir.join(&image);
        sample.image.save(&full).map_err(|e| Error::Raster { path: full.clone(), message: e.to_string() })?;
        save_mask(&sample.mask, &dir.join(&mask))?;
        records.push(Record { id, image, mask: Some(mask), split: Split::Unsplit });
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT,
        name: format!("synthetic-{}", cfg.seed),
        geometry,
        records,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::mask_stats;

    fn cfg(seed: u64) -> SynthConfig {
        SynthConfig { count: 12, width: 256, height: 256, max_disc_extent: 100, seed }
    }

    #[test]
    fn disc_area_and_extent() {
        for i in 0..12 {
            let s = synth_sample(&cfg(3), i);
            let frac = s.mask.positive_count() as f64 / s.fov_area as f64;
            assert!((0.03..=0.09).contains(&frac), "image {i}: fraction {frac}");
            let b = mask_stats(&s.mask).region.unwrap().bbox;
            assert!(b.width() <= 100 && b.height() <= 100);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_sample(&cfg(9), 4);
        let b = synth_sample(&cfg(9), 4);
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.image.as_raw(), synth_sample(&cfg(10), 4).image.as_raw());
    }
}
