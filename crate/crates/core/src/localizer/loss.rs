//! Four-term blob loss restricted to labeled pixels.
//!
//! Every term is a sum of per-pixel binary cross-entropies whose pixel set
//! and targets are chosen from the current prediction (argmax pixel, blobs,
//! watershed boundaries). Those choices are piecewise constant in the
//! logits, so the gradient is `weight * (sigmoid(z) - target)` per pixel.
//! Pixels marked `Unlabeled` never enter any term.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{LoocError, Result};
use crate::grid::Grid;

use super::{components, sigmoid, PseudoPointSet, RegionLabel, RegionPartition};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub image: f64,
    pub point: f64,
    pub split: f64,
    pub false_positive: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.image + self.point + self.split + self.false_positive
    }
}

/// `-[t log s + (1 - t) log(1 - s)]` with `s = sigmoid(z)`, computed stably.
#[inline]
fn bce_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - target * z
}

struct Accumulator<'a> {
    logits: &'a [f64],
    grad: Option<&'a mut [f64]>,
}

impl Accumulator<'_> {
    fn add(&mut self, pixel: usize, target: f64, weight: f64) -> f64 {
        let z = self.logits[pixel];
        if let Some(g) = self.grad.as_deref_mut() {
            g[pixel] += weight * (sigmoid(z) - target);
        }
        weight * bce_logit(z, target)
    }
}

/// Priority-flood watershed over `pixels` on elevation `-logit`, seeded by
/// `seeds` (one label per seed). Returns the label of each pixel of the
/// region, indexed like `in_region`.
fn watershed(
    width: usize,
    logits: &[f64],
    in_region: &[bool],
    seeds: &[usize],
) -> Vec<Option<usize>> {
    let n = logits.len();
    let height = n / width;
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push_neighbours = |p: usize, l: usize, label: &Vec<Option<usize>>, heap: &mut BinaryHeap<_>| {
        let (r, c) = (p / width, p % width);
        let mut nb = [usize::MAX; 4];
        if r > 0 {
            nb[0] = p - width;
        }
        if c > 0 {
            nb[1] = p - 1;
        }
        if c + 1 < width {
            nb[2] = p + 1;
        }
        if r + 1 < height {
            nb[3] = p + width;
        }
        for q in nb {
            if q != usize::MAX && in_region[q] && label[q].is_none() {
                heap.push(Reverse((ElevKey(-logits[q]), seq, q, l)));
                seq += 1;
            }
        }
    };
    for (l, &s) in seeds.iter().enumerate() {
        label[s] = Some(l);
    }
    for (l, &s) in seeds.iter().enumerate() {
        push_neighbours(s, l, &label, &mut heap);
    }
    while let Some(Reverse((_, _, p, l))) = heap.pop() {
        if label[p].is_some() {
            continue;
        }
        label[p] = Some(l);
        push_neighbours(p, l, &label, &mut heap);
    }
    label
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ElevKey(f64);

impl Eq for ElevKey {}

impl PartialOrd for ElevKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ElevKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Pixels of a multi-point blob lying on a watershed boundary between the
/// regions grown from its points. Seed pixels are never boundaries.
pub(crate) fn split_boundaries(width: usize, logits: &[f64], blob: &[usize], seeds: &[usize]) -> Vec<usize> {
    let mut in_region = vec![false; logits.len()];
    for &p in blob {
        in_region[p] = true;
    }
    let label = watershed(width, logits, &in_region, seeds);
    let height = logits.len() / width;
    let mut out = Vec::new();
    for &p in blob {
        if seeds.contains(&p) {
            continue;
        }
        let (r, c) = (p / width, p % width);
        let mine = label[p];
        let differs = |q: usize| in_region[q] && label[q] != mine;
        if (r > 0 && differs(p - width))
            || (r + 1 < height && differs(p + width))
            || (c > 0 && differs(p - 1))
            || (c + 1 < width && differs(p + 1))
        {
            out.push(p);
        }
    }
    out
}

fn check_inputs(logits: &Grid<f64>, points: &PseudoPointSet, partition: &RegionPartition) -> Result<Vec<usize>> {
    let (h, w) = logits.shape();
    if partition.shape() != (h, w) {
        return Err(LoocError::Contract(format!(
            "partition {:?} does not match logits {:?}",
            partition.shape(),
            (h, w)
        )));
    }
    points.check(h, w)?;
    let mut pixels = Vec::with_capacity(points.points.len());
    for p in &points.points {
        let (r, c) = p.pixel();
        let idx = r * w + c;
        if partition.mask.as_slice()[idx] != RegionLabel::Foreground {
            return Err(LoocError::Contract(format!(
                "{}: point ({}, {}) is not on a foreground pixel",
                points.image_id, p.row, p.col
            )));
        }
        pixels.push(idx);
    }
    Ok(pixels)
}

fn compute(
    logits: &Grid<f64>,
    points: &PseudoPointSet,
    partition: &RegionPartition,
    grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let point_pixels = check_inputs(logits, points, partition)?;
    let (h, w) = logits.shape();
    let z = logits.as_slice();
    let mut acc = Accumulator { logits: z, grad };
    let mut out = LossBreakdown::default();

    // Image level: the most confident labeled pixel is foreground iff the
    // image has objects; the least confident one is always background.
    let labeled = (0..z.len()).filter(|&p| partition.is_labeled(p));
    let extremes = labeled.fold(None, |acc: Option<(usize, usize)>, p| match acc {
        None => Some((p, p)),
        Some((lo, hi)) => Some((if z[p] < z[lo] { p } else { lo }, if z[p] > z[hi] { p } else { hi })),
    });
    if let Some((lo, hi)) = extremes {
        if points.count > 0 {
            out.image += acc.add(hi, 1.0, 0.5) + acc.add(lo, 0.0, 0.5);
        } else {
            out.image += acc.add(hi, 0.0, 1.0) + acc.add(lo, 0.0, 1.0);
        }
    }

    for &p in &point_pixels {
        out.point += acc.add(p, 1.0, 1.0);
    }

    // Blobs of the full prediction; penalties only on labeled pixels.
    let blobs = components(h, w, |p| z[p] >= 0.0);
    let mut blob_of = vec![usize::MAX; z.len()];
    for (b, pixels) in blobs.iter().enumerate() {
        for &p in pixels {
            blob_of[p] = b;
        }
    }
    let mut seeds_in: Vec<Vec<usize>> = vec![Vec::new(); blobs.len()];
    let mut points_in = vec![0usize; blobs.len()];
    for &p in &point_pixels {
        let b = blob_of[p];
        if b != usize::MAX {
            points_in[b] += 1;
            if !seeds_in[b].contains(&p) {
                seeds_in[b].push(p);
            }
        }
    }
    for (b, pixels) in blobs.iter().enumerate() {
        match points_in[b] {
            0 => {
                if pixels.iter().all(|&p| partition.is_labeled(p)) {
                    for &p in pixels {
                        out.false_positive += acc.add(p, 0.0, 1.0);
                    }
                }
            }
            1 => {}
            n => {
                if seeds_in[b].len() < 2 {
                    continue;
                }
                let weight = (n - 1) as f64;
                for p in split_boundaries(w, z, pixels, &seeds_in[b]) {
                    if partition.is_labeled(p) {
                        out.split += acc.add(p, 0.0, weight);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Loss value only.
pub fn lcfcn_loss(logits: &Grid<f64>, points: &PseudoPointSet, partition: &RegionPartition) -> Result<LossBreakdown> {
    compute(logits, points, partition, None)
}

/// Loss value and its gradient with respect to the logits.
pub fn lcfcn_loss_and_grad(
    logits: &Grid<f64>,
    points: &PseudoPointSet,
    partition: &RegionPartition,
) -> Result<(LossBreakdown, Grid<f64>)> {
    let (h, w) = logits.shape();
    let mut grad = vec![0.0; h * w];
    let loss = compute(logits, points, partition, Some(&mut grad))?;
    Ok((loss, Grid::from_vec(h, w, grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;

    fn pps(points: &[(f64, f64)], count: usize) -> PseudoPointSet {
        PseudoPointSet {
            image_id: "t".into(),
            points: points.iter().map(|&(r, c)| Point::new(r, c)).collect(),
            count,
        }
    }

    #[test]
    fn optimum_is_near_zero() {
        let pts = [(1.5, 1.5), (5.5, 6.5)];
        let mut z = Grid::filled(8, 8, -30.0);
        for &(r, c) in &pts {
            *z.get_mut(r as usize, c as usize) = 30.0;
        }
        let part = RegionPartition::uniform(8, 8, RegionLabel::Foreground);
        let l = lcfcn_loss(&z, &pps(&pts, 2), &part).unwrap();
        assert!(l.total() < 1e-3, "{l:?}");
    }

    #[test]
    fn point_off_foreground_rejected() {
        let z = Grid::filled(8, 8, 0.0);
        let part = RegionPartition::uniform(8, 8, RegionLabel::Background);
        assert!(lcfcn_loss(&z, &pps(&[(2.0, 2.0)], 1), &part).is_err());
        let part = RegionPartition::uniform(8, 8, RegionLabel::Unlabeled);
        assert!(lcfcn_loss(&z, &pps(&[(2.0, 2.0)], 1), &part).is_err());
    }

    #[test]
    fn too_many_points_rejected() {
        let z = Grid::filled(8, 8, 0.0);
        let part = RegionPartition::uniform(8, 8, RegionLabel::Foreground);
        assert!(lcfcn_loss(&z, &pps(&[(2.0, 2.0), (3.0, 3.0)], 1), &part).is_err());
    }

    #[test]
    fn merged_blob_gets_split_penalty() {
        // One elongated blob with a saddle in the middle.
        let mut z = Grid::filled(5, 9, -5.0);
        for c in 0..9 {
            *z.get_mut(2, c) = if c == 4 { 0.5 } else { 4.0 };
        }
        let part = RegionPartition::uniform(5, 9, RegionLabel::Foreground);
        let l = lcfcn_loss(&z, &pps(&[(2.5, 1.5), (2.5, 7.5)], 2), &part).unwrap();
        assert!(l.split > 0.0);
        assert_eq!(l.false_positive, 0.0);
        let bounds = split_boundaries(9, z.as_slice(), &(18..27).collect::<Vec<_>>(), &[19, 25]);
        assert!(bounds.contains(&22));
    }

    #[test]
    fn unlabeled_blob_is_not_a_false_positive() {
        let mut z = Grid::filled(8, 8, -5.0);
        *z.get_mut(6, 6) = 5.0;
        let mut part = RegionPartition::uniform(8, 8, RegionLabel::Background);
        let l = lcfcn_loss(&z, &pps(&[], 0), &part).unwrap();
        assert!(l.false_positive > 4.0);
        *part.mask.get_mut(6, 6) = RegionLabel::Unlabeled;
        let l = lcfcn_loss(&z, &pps(&[], 0), &part).unwrap();
        assert_eq!(l.false_positive, 0.0);
    }
}
