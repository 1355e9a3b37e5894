use std::collections::VecDeque;

use crate::dataset::Point;
use crate::grid::Grid;

use super::Cpm;

/// A 4-connected component of the thresholded CPM.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Row-major pixel indices, in discovery order.
    pub pixels: Vec<usize>,
    /// Pixel-mass centroid (pixel centres at `+0.5`).
    pub center: Point,
}

impl Blob {
    pub fn mask(&self, height: usize, width: usize) -> Grid<bool> {
        let mut m = Grid::filled(height, width, false);
        for &p in &self.pixels {
            m.as_mut_slice()[p] = true;
        }
        m
    }
}

/// Labels 4-connected components of the pixels selected by `on`. Components
/// are numbered from 0 in raster order of their first pixel.
pub(crate) fn components(height: usize, width: usize, on: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; height * width];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..height * width {
        if seen[start] || !on(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if !seen[q] && on(q) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        out.push(pixels);
    }
    out
}

pub(crate) fn centroid(pixels: &[usize], width: usize) -> Point {
    let n = pixels.len() as f64;
    let (sr, sc) = pixels.iter().fold((0.0, 0.0), |(sr, sc), &p| {
        (sr + (p / width) as f64 + 0.5, sc + (p % width) as f64 + 0.5)
    });
    Point::new(sr / n, sc / n)
}

/// Connected components of `cpm >= prob_threshold`; the predicted count is
/// the number of blobs.
pub fn extract_blobs(cpm: &Cpm, prob_threshold: f32) -> Vec<Blob> {
    let (h, w) = cpm.probs.shape();
    let probs = cpm.probs.as_slice();
    components(h, w, |p| probs[p] >= prob_threshold)
        .into_iter()
        .map(|pixels| {
            let center = centroid(&pixels, w);
            Blob { pixels, center }
        })
        .collect()
}
