//! Post-processing of predicted masks: keep the largest 8-connected
//! foreground component, then fill background regions that are not
//! 4-connected to the image border.

use std::collections::VecDeque;

use crate::mask::SegMask;

const N4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
const N8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Label foreground components in row-major discovery order. Returns the
/// per-pixel label (0 = background) and each component's area.
pub fn label_components(mask: &SegMask, eight_connected: bool) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let neighbours: &[(isize, isize)] = if eight_connected { &N8 } else { &N4 };
    let mut labels = vec![0u32; w * h];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for &(dx, dy) in neighbours {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Keep only the largest 8-connected foreground component. Equal areas go
/// to the component whose first pixel comes earliest in row-major order.
pub fn largest_component(mask: &SegMask) -> SegMask {
    let (labels, areas) = label_components(mask, true);
    let Some(best) = areas.iter().enumerate().fold(None, |best: Option<(usize, usize)>, (i, &a)| match best {
        Some((_, ba)) if ba >= a => best,
        _ => Some((i, a)),
    }) else {
        return mask.clone();
    };
    let keep = best.0 as u32 + 1;
    SegMask::new(mask.width(), mask.height(), labels.iter().map(|&l| (l == keep) as u8).collect())
        .expect("same size")
}

/// Turn every background pixel that cannot reach the border through
/// 4-connected background into foreground.
pub fn fill_holes(mask: &SegMask) -> SegMask {
    let (w, h) = (mask.width(), mask.height());
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed = |x: usize, y: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        let i = y * w + x;
        if mask.data()[i] == 0 && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut queue);
        seed(x, h - 1, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut queue);
        seed(w - 1, y, &mut outside, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for &(dx, dy) in &N4 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if mask.data()[j] == 0 && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    SegMask::new(w, h, outside.iter().map(|&o| (!o) as u8).collect()).expect("same size")
}

/// Largest component followed by hole filling.
pub fn postprocess(mask: &SegMask) -> SegMask {
    fill_holes(&largest_component(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> impl Fn(usize, usize) -> bool {
        move |x, y| x >= x0 && x < x1 && y >= y0 && y < y1
    }

    #[test]
    fn largest_blob_survives() {
        let big = rect(2, 2, 12, 7); // 50
        let small = rect(20, 20, 27, 21); // 7
        let m = SegMask::from_fn(30, 30, |x, y| big(x, y) || small(x, y));
        let out = largest_component(&m);
        assert_eq!(out.positive_count(), 50);
        assert!(out.get(2, 2) && !out.get(20, 20));
    }

    #[test]
    fn single_blob_unchanged() {
        let m = SegMask::from_fn(10, 10, rect(2, 3, 6, 8));
        assert_eq!(largest_component(&m), m);
    }

    #[test]
    fn diagonal_pixels_connect() {
        let m = SegMask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(largest_component(&m).positive_count(), 4);
    }

    #[test]
    fn tie_keeps_first_in_scan_order() {
        let a = rect(6, 1, 8, 3);
        let b = rect(1, 5, 3, 7);
        let m = SegMask::from_fn(10, 10, |x, y| a(x, y) || b(x, y));
        let out = largest_component(&m);
        assert!(out.get(6, 1) && !out.get(1, 5));
    }

    #[test]
    fn empty_passes_through() {
        let m = SegMask::empty(5, 5);
        assert_eq!(largest_component(&m), m);
        assert_eq!(fill_holes(&m), m);
    }

    #[test]
    fn ring_becomes_solid() {
        let ring = SegMask::from_fn(9, 9, |x, y| {
            let d = (x as i32 - 4).pow(2) + (y as i32 - 4).pow(2);
            (4..=9).contains(&d)
        });
        let solid = SegMask::from_fn(9, 9, |x, y| (x as i32 - 4).pow(2) + (y as i32 - 4).pow(2) <= 9);
        assert_eq!(fill_holes(&ring), solid);
    }

    #[test]
    fn open_channel_is_not_a_hole() {
        // square outline with a gap in the top edge
        let m = SegMask::from_fn(7, 7, |x, y| {
            let edge = (1..=5).contains(&x) && (1..=5).contains(&y) && (x == 1 || x == 5 || y == 1 || y == 5);
            edge && !(y == 1 && x == 3)
        });
        assert_eq!(fill_holes(&m), m);
    }

    #[test]
    fn diagonal_gap_still_encloses() {
        // diamond: the center reaches the outside only diagonally
        let m = SegMask::from_fn(5, 5, |x, y| (x as i32 - 2).abs() + (y as i32 - 2).abs() == 1);
        let filled = fill_holes(&m);
        assert!(filled.get(2, 2));
        assert_eq!(filled.positive_count(), 5);
    }
}
