//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use discseg::metrics::ConfusionCounts;
use discseg::SegMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Union-find labeling; the root of each set is its smallest index.
pub fn components(m: &SegMask, value: bool, eight: bool) -> UnionFind {
    let (w, h) = (m.width(), m.height());
    let mut uf = UnionFind::new(w * h);
    for y in 0..h {
        for x in 0..w {
            if m.get(x, y) != value {
                continue;
            }
            let mut link = |nx: isize, ny: isize| {
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && m.get(nx as usize, ny as usize) == value {
                    uf.union(y * w + x, ny as usize * w + nx as usize);
                }
            };
            let (xi, yi) = (x as isize, y as isize);
            link(xi + 1, yi);
            link(xi, yi + 1);
            if eight {
                link(xi + 1, yi + 1);
                link(xi - 1, yi + 1);
            }
        }
    }
    uf
}

pub fn oracle_largest(m: &SegMask) -> SegMask {
    let (w, h) = (m.width(), m.height());
    let mut uf = components(m, true, true);
    let mut area = vec![0usize; w * h];
    for i in 0..w * h {
        if m.data()[i] != 0 {
            let r = uf.find(i);
            area[r] += 1;
        }
    }
    // roots are each component's first pixel in row-major order
    let Some(best) = (0..w * h).filter(|&i| area[i] > 0).fold(None, |b: Option<usize>, i| match b {
        Some(j) if area[j] >= area[i] => Some(j),
        _ => Some(i),
    }) else {
        return m.clone();
    };
    SegMask::from_fn(w, h, |x, y| m.get(x, y) && uf.find(y * w + x) == best)
}

pub fn oracle_fill(m: &SegMask) -> SegMask {
    let (w, h) = (m.width(), m.height());
    let mut uf = components(m, false, false);
    let mut open = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) && (x == 0 || y == 0 || x == w - 1 || y == h - 1) {
                let r = uf.find(y * w + x);
                open[r] = true;
            }
        }
    }
    SegMask::from_fn(w, h, |x, y| m.get(x, y) || !open[uf.find(y * w + x)])
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> SegMask {
    let density = rng.random_range(0.2..0.7);
    SegMask::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// Confusion counts by tallying every pixel pair.
pub fn pixel_tally(pred: &SegMask, truth: &SegMask) -> ConfusionCounts {
    let mut t = [0u64; 4];
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            t[(pred.get(x, y) as usize) * 2 + truth.get(x, y) as usize] += 1;
        }
    }
    ConfusionCounts { tp: t[3], fp: t[2], fn_: t[1], tn: t[0] }
}
