//! Full-image prediction with a sliding window.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fpenv::FlushSubnormals;
use crate::mask::SegMask;
use crate::morphology::postprocess;
use crate::sampler::{extract, tiling, PatchKind, PatchSpec};
use crate::tensor::Tensor;
use crate::unet::{geometry, Model};

/// Per-pixel class probabilities `(2, H, W)` for a whole `(3, H, W)` image.
///
/// The image is covered by [`tiling`]; each tile is extracted with its
/// mirrored context margin and run through the network. Pixels covered by
/// one tile take that tile's output unchanged; pixels shared by flush edge
/// tiles take the mean of the contributions, renormalized to sum to 1.
/// Images smaller than a patch are mirror-extended first and cropped back.
pub fn predict_full(model: &Model<f32>, image: &Tensor<f32>, patch_w: usize, patch_h: usize) -> Result<Tensor<f32>> {
    let geo = geometry(model.config(), patch_w, patch_h)?;
    let (c, h, w) = image.chw()?;
    if c != model.config().in_channels {
        return Err(Error::Geometry(format!(
            "image has {c} channels, model expects {}",
            model.config().in_channels
        )));
    }
    if w < patch_w || h < patch_h {
        let grown = PatchSpec { x: 0, y: 0, w: w.max(patch_w), h: h.max(patch_h), margin: 0, kind: PatchKind::Tile };
        let extended = extract(image, &grown)?;
        let full = predict_full(model, &extended, patch_w, patch_h)?;
        let crop = PatchSpec { x: 0, y: 0, w, h, margin: 0, kind: PatchKind::Tile };
        return extract(&full, &crop);
    }

    let tiles = tiling(w, h, patch_w, patch_h, geo.margin);
    let outputs: Vec<Tensor<f32>> = tiles
        .par_iter()
        .map(|t| {
            let _flush = FlushSubnormals::new();
            model.forward(&extract(image, t)?)
        })
        .collect::<Result<_>>()?;

    let plane = h * w;
    let mut sums = vec![0.0f64; 2 * plane];
    let mut counts = vec![0u32; plane];
    for (t, out) in tiles.iter().zip(&outputs) {
        let d = out.data();
        for ch in 0..2 {
            for y in 0..t.h {
                for x in 0..t.w {
                    sums[ch * plane + (t.y + y) * w + t.x + x] += d[(ch * t.h + y) * t.w + x] as f64;
                }
            }
        }
        for y in 0..t.h {
            for x in 0..t.w {
                counts[(t.y + y) * w + t.x + x] += 1;
            }
        }
    }

    let mut probs = vec![0.0f32; 2 * plane];
    for (p, &n) in counts.iter().enumerate() {
        let (s0, s1) = (sums[p], sums[plane + p]);
        if n == 1 {
            probs[p] = s0 as f32;
            probs[plane + p] = s1 as f32;
        } else {
            let total = s0 + s1;
            probs[p] = (s0 / total) as f32;
            probs[plane + p] = (s1 / total) as f32;
        }
    }
    Tensor::new(&[2, h, w], probs)
}

/// Disc wherever its probability is strictly higher; ties are background.
pub fn binarize(probs: &Tensor<f32>) -> Result<SegMask> {
    let (c, h, w) = probs.chw()?;
    if c != 2 {
        return Err(Error::Shape(format!("binarize expects 2 channels, got {c}")));
    }
    let (q0, q1) = probs.data().split_at(h * w);
    SegMask::new(w, h, q0.iter().zip(q1).map(|(a, b)| (b > a) as u8).collect())
}

/// Sliding-window prediction, binarization and optional post-processing.
pub fn predict_mask(
    model: &Model<f32>,
    image: &Tensor<f32>,
    patch_w: usize,
    patch_h: usize,
    cleanup: bool,
) -> Result<SegMask> {
    let mask = binarize(&predict_full(model, image, patch_w, patch_h)?)?;
    Ok(if cleanup { postprocess(&mask) } else { mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_rules() {
        let p = Tensor::new(&[2, 1, 3], vec![0.3, 0.5, 0.6, 0.7, 0.5, 0.4]).unwrap();
        assert_eq!(binarize(&p).unwrap().data(), &[1, 0, 0]);
    }
}
