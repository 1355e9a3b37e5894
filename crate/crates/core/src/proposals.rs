//! Class-agnostic region proposals and IoU / NMS machinery.
//!
//! The generator sweeps grayscale thresholds and boxes every connected
//! component, then adds multi-scale sliding windows. Objectness is the
//! contrast between a box interior and the ring around it, min-max
//! normalized per image.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LoocError, Result};
use crate::grid::{Grid, Image};

/// Axis-aligned pixel box, rows `row0..row1`, columns `col0..col1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoxRegion {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoxRegion {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Result<Self> {
        if row0 >= row1 || col0 >= col1 {
            return Err(LoocError::Contract(format!(
                "degenerate box ({row0}, {col0}, {row1}, {col1})"
            )));
        }
        Ok(BoxRegion {
            row0,
            col0,
            row1,
            col1,
        })
    }

    pub fn is_valid(&self) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn center(&self) -> crate::dataset::Point {
        crate::dataset::Point::new(
            (self.row0 + self.row1) as f64 / 2.0,
            (self.col0 + self.col1) as f64 / 2.0,
        )
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.is_valid() && self.row1 <= height && self.col1 <= width
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row1 && col >= self.col0 && col < self.col1
    }

    pub fn intersection_area(&self, other: &BoxRegion) -> usize {
        let r0 = self.row0.max(other.row0);
        let r1 = self.row1.min(other.row1);
        let c0 = self.col0.max(other.col0);
        let c1 = self.col1.min(other.col1);
        r1.saturating_sub(r0) * c1.saturating_sub(c0)
    }
}

/// Intersection over union. Panics on a degenerate box.
pub fn iou(a: &BoxRegion, b: &BoxRegion) -> f64 {
    assert!(a.is_valid() && b.is_valid(), "iou on degenerate box");
    let inter = a.intersection_area(b);
    inter as f64 / (a.area() + b.area() - inter) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposal_id: usize,
    #[serde(rename = "box")]
    pub region: BoxRegion,
    pub objectness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    pub image_shape: (usize, usize),
    pub generator_tag: String,
}

impl ProposalSet {
    pub fn new(proposals: Vec<Proposal>, image_shape: (usize, usize), generator_tag: &str) -> Result<Self> {
        let set = ProposalSet {
            proposals,
            image_shape,
            generator_tag: generator_tag.to_string(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(image_shape: (usize, usize), generator_tag: &str) -> Self {
        ProposalSet {
            proposals: Vec::new(),
            image_shape,
            generator_tag: generator_tag.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_shape;
        let mut ids = BTreeSet::new();
        for p in &self.proposals {
            if !p.region.fits(h, w) {
                return Err(LoocError::Contract(format!(
                    "proposal {} box {:?} outside {h}x{w}",
                    p.proposal_id, p.region
                )));
            }
            if !(0.0..=1.0).contains(&p.objectness) {
                return Err(LoocError::Contract(format!(
                    "proposal {} objectness {} outside [0, 1]",
                    p.proposal_id, p.objectness
                )));
            }
            if !ids.insert(p.proposal_id) {
                return Err(LoocError::Contract(format!("duplicate proposal_id {}", p.proposal_id)));
            }
        }
        Ok(())
    }

    /// Subset by position, keeping the given order.
    pub fn subset(&self, indices: &[usize]) -> ProposalSet {
        ProposalSet {
            proposals: indices.iter().map(|&i| self.proposals[i]).collect(),
            image_shape: self.image_shape,
            generator_tag: self.generator_tag.clone(),
        }
    }

    /// One JSON record per line: proposal_id, box, objectness.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.proposals {
            out.push_str(&serde_json::to_string(p).map_err(|e| LoocError::json(path, e))?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| LoocError::io(path, e))
    }
}

/// Greedy suppression over a precomputed visiting order. Returns positions
/// of the kept proposals in visiting order.
pub(crate) fn greedy_suppress(boxes: &[BoxRegion], order: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

fn check_nms_args(proposals: &ProposalSet, scores: &[f64], iou_threshold: f64) -> Result<()> {
    if scores.len() != proposals.len() {
        return Err(LoocError::Contract(format!(
            "{} scores for {} proposals",
            scores.len(),
            proposals.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(LoocError::Contract(format!("iou threshold {iou_threshold} outside (0, 1]")));
    }
    Ok(())
}

/// Positions kept by greedy NMS, highest score first. Equal scores are
/// visited lower `proposal_id` first.
pub fn nms_indices(proposals: &ProposalSet, scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    check_nms_args(proposals, scores, iou_threshold)?;
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(proposals.proposals[a].proposal_id.cmp(&proposals.proposals[b].proposal_id))
    });
    let boxes: Vec<BoxRegion> = proposals.proposals.iter().map(|p| p.region).collect();
    Ok(greedy_suppress(&boxes, &order, iou_threshold))
}

/// Greedy non-maximum suppression; the result is in descending score order
/// and every kept pair has IoU at most `iou_threshold`.
pub fn nms(proposals: &ProposalSet, scores: &[f64], iou_threshold: f64) -> Result<ProposalSet> {
    let kept = nms_indices(proposals, scores, iou_threshold)?;
    Ok(proposals.subset(&kept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub max_count: usize,
    /// Number of grayscale thresholds in the sweep.
    pub thresholds: usize,
    /// Components smaller than this many pixels are dropped.
    pub min_area: usize,
    /// Boxes with a side shorter than this are dropped.
    pub min_side: usize,
    /// Boxes covering more than this fraction of the image are dropped.
    pub max_area_fraction: f64,
    pub window_sizes: Vec<usize>,
    /// Boxes whose interior is not brighter than their surround by more
    /// than this (in intensity units) are dropped.
    pub min_contrast: f64,
    pub iou_threshold: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            max_count: 300,
            thresholds: 16,
            min_area: 4,
            min_side: 1,
            max_area_fraction: 0.25,
            window_sizes: vec![6, 10, 14],
            min_contrast: 0.08,
            iou_threshold: 0.5,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_count == 0 {
            return Err(LoocError::Config("proposals.max_count must be >= 1".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(LoocError::Config("proposals.iou_threshold must lie in (0, 1]".into()));
        }
        if !(self.max_area_fraction > 0.0 && self.max_area_fraction <= 1.0) {
            return Err(LoocError::Config("proposals.max_area_fraction must lie in (0, 1]".into()));
        }
        if !self.min_contrast.is_finite() {
            return Err(LoocError::Config("proposals.min_contrast must be finite".into()));
        }
        if self.min_side == 0 {
            return Err(LoocError::Config("proposals.min_side must be >= 1".into()));
        }
        if self.window_sizes.contains(&0) {
            return Err(LoocError::Config("proposals.window_sizes must be positive".into()));
        }
        Ok(())
    }
}

pub const GENERATOR_TAG: &str = "multi-threshold-cc+windows";

/// Summed-area table with one row/column of zero padding.
struct Integral {
    width: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(gray: &Grid<f32>) -> Self {
        let (h, w) = gray.shape();
        let stride = w + 1;
        let mut sums = vec![0.0; (h + 1) * stride];
        for r in 0..h {
            let mut row_sum = 0.0;
            for c in 0..w {
                row_sum += *gray.get(r, c) as f64;
                sums[(r + 1) * stride + c + 1] = sums[r * stride + c + 1] + row_sum;
            }
        }
        Integral { width: w, sums }
    }

    fn sum(&self, b: &BoxRegion) -> f64 {
        let s = self.width + 1;
        self.sums[b.row1 * s + b.col1] - self.sums[b.row0 * s + b.col1] - self.sums[b.row1 * s + b.col0]
            + self.sums[b.row0 * s + b.col0]
    }
}

/// Interior mean minus the mean of the surrounding ring.
fn contrast(integral: &Integral, b: &BoxRegion, height: usize, width: usize) -> f64 {
    let margin = (b.height().min(b.width()) / 4).max(1);
    let outer = BoxRegion {
        row0: b.row0.saturating_sub(margin),
        col0: b.col0.saturating_sub(margin),
        row1: (b.row1 + margin).min(height),
        col1: (b.col1 + margin).min(width),
    };
    let ring_area = outer.area() - b.area();
    if ring_area == 0 {
        return 0.0;
    }
    let inner = integral.sum(b);
    let ring = integral.sum(&outer) - inner;
    inner / b.area() as f64 - ring / ring_area as f64
}

fn component_boxes(gray: &Grid<f32>, threshold: f32, min_area: usize, out: &mut BTreeSet<BoxRegion>) {
    let (h, w) = gray.shape();
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || gray.as_slice()[start] < threshold {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0, 0);
        let mut area = 0;
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            area += 1;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r + 1);
            c1 = c1.max(c + 1);
            let mut visit = |q: usize| {
                if !seen[q] && gray.as_slice()[q] >= threshold {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        if area >= min_area {
            out.insert(BoxRegion {
                row0: r0,
                col0: c0,
                row1: r1,
                col1: c1,
            });
        }
    }
}

/// Proposals for one image, sorted by objectness (descending) and truncated
/// to `config.max_count`. A constant image yields an empty set.
pub fn generate_proposals(image: &Image, config: &ProposalConfig) -> Result<ProposalSet> {
    config.validate()?;
    let gray = image.grayscale();
    let (h, w) = gray.shape();
    let shape = (h, w);
    let (lo, hi) = gray
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if gray.is_empty() || hi <= lo {
        return Ok(ProposalSet::empty(shape, GENERATOR_TAG));
    }

    let mut boxes = BTreeSet::new();
    for k in 1..=config.thresholds {
        let t = lo + (hi - lo) * k as f32 / (config.thresholds + 1) as f32;
        component_boxes(&gray, t, config.min_area, &mut boxes);
    }
    for &size in &config.window_sizes {
        if size > h || size > w {
            continue;
        }
        let stride = (size / 2).max(1);
        let mut r = 0;
        while r + size <= h {
            let mut c = 0;
            while c + size <= w {
                boxes.insert(BoxRegion {
                    row0: r,
                    col0: c,
                    row1: r + size,
                    col1: c + size,
                });
                c += stride;
            }
            r += stride;
        }
    }
    let max_area = config.max_area_fraction * (h * w) as f64;
    let integral = Integral::new(&gray);
    let scored: Vec<(BoxRegion, f64)> = boxes
        .into_iter()
        .filter(|b| b.area() as f64 <= max_area && b.height().min(b.width()) >= config.min_side)
        .map(|b| (b, contrast(&integral, &b, h, w)))
        .filter(|&(_, c)| c > config.min_contrast)
        .collect();
    if scored.is_empty() {
        return Ok(ProposalSet::empty(shape, GENERATOR_TAG));
    }
    let (cmin, cmax) = scored
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, c)| (a.min(c), b.max(c)));
    let span = cmax - cmin;
    let mut normalized: Vec<(BoxRegion, f64)> = scored
        .into_iter()
        .map(|(b, c)| {
            let o = if span > 0.0 { ((c - cmin) / span).clamp(0.0, 1.0) } else { 0.5 };
            (b, o)
        })
        .collect();
    // BTreeSet iteration gave a stable order; the sort is stable too.
    normalized.sort_by(|a, b| b.1.total_cmp(&a.1));
    normalized.truncate(config.max_count);
    let proposals = normalized
        .into_iter()
        .enumerate()
        .map(|(i, (region, objectness))| Proposal {
            proposal_id: i,
            region,
            objectness,
        })
        .collect();
    ProposalSet::new(proposals, shape, GENERATOR_TAG)
}
