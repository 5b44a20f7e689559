//! Binary segmentation masks and their summary statistics.

use crate::error::{Error, Result};

/// Binary label grid, row-major; 1 = optic disc, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data: data.into_iter().map(|v| (v != 0) as u8).collect() })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    pub fn positive_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Positives inside the rectangle `[x, x+w) × [y, y+h)`.
    pub fn count_in(&self, x: usize, y: usize, w: usize, h: usize) -> usize {
        (y..y + h)
            .map(|r| self.data[r * self.width + x..r * self.width + x + w].iter().filter(|&&v| v != 0).count())
            .sum()
    }

    /// Copy of the rectangle `[x, x+w) × [y, y+h)`, which must be in bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> SegMask {
        let mut data = Vec::with_capacity(w * h);
        for r in y..y + h {
            data.extend_from_slice(&self.data[r * self.width + x..r * self.width + x + w]);
        }
        SegMask { width: w, height: h, data }
    }

    /// Equally sized masks stacked top to bottom.
    pub fn stack_rows(masks: &[SegMask]) -> Result<SegMask> {
        let Some(first) = masks.first() else {
            return Err(Error::Shape("cannot stack zero masks".into()));
        };
        if masks.iter().any(|m| (m.width, m.height) != (first.width, first.height)) {
            return Err(Error::Shape("stacked masks must share a size".into()));
        }
        let data: Vec<u8> = masks.iter().flat_map(|m| m.data.iter().copied()).collect();
        let height = data.len() / first.width;
        Ok(SegMask { width: first.width, height, data })
    }

    pub fn same_size(&self, other: &SegMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::DimensionMismatch(format!(
                "masks {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Inclusive pixel bounds of the positive region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Positive count, bounding box and center of mass. `region` is `None` for
/// an empty mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskStats {
    pub positive_count: usize,
    pub region: Option<DiscRegion>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscRegion {
    pub bbox: BBox,
    /// `(c_x, c_y)`: mean column and row of the positive pixels.
    pub center_of_mass: (f64, f64),
}

pub fn mask_stats(mask: &SegMask) -> MaskStats {
    let (mut n, mut sx, mut sy) = (0usize, 0u64, 0u64);
    let mut bbox = BBox { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                n += 1;
                sx += x as u64;
                sy += y as u64;
                bbox.x0 = bbox.x0.min(x);
                bbox.y0 = bbox.y0.min(y);
                bbox.x1 = bbox.x1.max(x);
                bbox.y1 = bbox.y1.max(y);
            }
        }
    }
    let region = (n > 0).then(|| DiscRegion {
        bbox,
        center_of_mass: (sx as f64 / n as f64, sy as f64 / n as f64),
    });
    MaskStats { positive_count: n, region }
}
