//! Independent reference implementations shared by the integration and
//! acceptance tests. None of them call into the library code they check.
#![allow(dead_code)]

pub mod checks;

use looc_core::dataset::Point;
use looc_core::experiment::ExperimentConfig;
use looc_core::grid::Grid;
use looc_core::localizer::nn::NetConfig;
use looc_core::localizer::{PseudoPointSet, RegionLabel, RegionPartition};
use looc_core::proposals::{BoxRegion, Proposal, ProposalSet};
use rand::Rng;

/// IoU from float box corners.
pub fn iou_oracle(a: &BoxRegion, b: &BoxRegion) -> f64 {
    let (ar0, ac0, ar1, ac1) = (a.row0 as f64, a.col0 as f64, a.row1 as f64, a.col1 as f64);
    let (br0, bc0, br1, bc1) = (b.row0 as f64, b.col0 as f64, b.row1 as f64, b.col1 as f64);
    let ih = (ar1.min(br1) - ar0.max(br0)).max(0.0);
    let iw = (ac1.min(bc1) - ac0.max(bc0)).max(0.0);
    let inter = ih * iw;
    let union = (ar1 - ar0) * (ac1 - ac0) + (br1 - br0) * (bc1 - bc0) - inter;
    inter / union
}

/// Classic quadratic NMS: repeatedly take the best remaining proposal and
/// drop everything that overlaps it too much. Returns kept positions.
pub fn nms_oracle(set: &ProposalSet, scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..set.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for j in 1..remaining.len() {
            let (a, b) = (remaining[j], remaining[best]);
            let better = scores[a] > scores[b]
                || (scores[a] == scores[b] && set.proposals[a].proposal_id < set.proposals[b].proposal_id);
            if better {
                best = j;
            }
        }
        let top = remaining.remove(best);
        kept.push(top);
        remaining.retain(|&i| iou_oracle(&set.proposals[top].region, &set.proposals[i].region) <= threshold);
    }
    kept
}

pub fn random_box(rng: &mut impl Rng, h: usize, w: usize, max_side: usize) -> BoxRegion {
    let bh = rng.gen_range(1..=max_side.min(h));
    let bw = rng.gen_range(1..=max_side.min(w));
    let r0 = rng.gen_range(0..=h - bh);
    let c0 = rng.gen_range(0..=w - bw);
    BoxRegion::new(r0, c0, r0 + bh, c0 + bw).unwrap()
}

/// Random proposals with shuffled ids and objectness drawn from a coarse
/// grid, so that ties occur.
pub fn random_proposals(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> ProposalSet {
    let mut ids: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.gen_range(0..=i));
    }
    let proposals = ids
        .into_iter()
        .map(|id| Proposal {
            proposal_id: id,
            region: random_box(rng, h, w, 12),
            objectness: rng.gen_range(0..=10) as f64 / 10.0,
        })
        .collect();
    ProposalSet::new(proposals, (h, w), "random").unwrap()
}

/// 4-connected components of `on` by explicit-stack flood fill, each
/// returned as a sorted pixel list; components sorted by first pixel.
pub fn flood_fill_oracle(h: usize, w: usize, on: &[bool]) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for seed in 0..h * w {
        if !on[seed] || label[seed] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        let mut stack = vec![seed];
        label[seed] = id;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if on[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Random probability map with blobby structure: a few bright discs on noise.
pub fn random_cpm_grid(rng: &mut impl Rng, h: usize, w: usize) -> Grid<f32> {
    let mut v: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..0.6)).collect();
    for _ in 0..rng.gen_range(0..6) {
        let (cr, cc) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let rad: f64 = rng.gen_range(1.0..5.0);
        for r in 0..h {
            for c in 0..w {
                let d2 = (r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2);
                if d2 <= rad * rad {
                    v[r * w + c] = rng.gen_range(0.5..1.0);
                }
            }
        }
    }
    Grid::from_vec(h, w, v)
}

/// GAME(L) of one image by explicit cell bounds: cell `(i, j)` covers rows
/// `[i*h/n, (i+1)*h/n)`; the last cell is closed so border points count.
pub fn game_image_oracle(pred: &[Point], gt: &[Point], h: usize, w: usize, level: u32) -> f64 {
    let n = 1usize << level;
    let inside = |p: &Point, i: usize, j: usize| {
        let (r0, r1) = (i as f64 * h as f64 / n as f64, (i + 1) as f64 * h as f64 / n as f64);
        let (c0, c1) = (j as f64 * w as f64 / n as f64, (j + 1) as f64 * w as f64 / n as f64);
        let in_r = p.row >= r0 && (p.row < r1 || (i + 1 == n && p.row <= r1));
        let in_c = p.col >= c0 && (p.col < c1 || (j + 1 == n && p.col <= c1));
        in_r && in_c
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = pred.iter().filter(|p| inside(p, i, j)).count() as f64;
            let b = gt.iter().filter(|p| inside(p, i, j)).count() as f64;
            total += (a - b).abs();
        }
    }
    total
}

pub fn mae_oracle(pred: &[f64], gt: &[usize]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i] as f64).abs();
    }
    s / pred.len() as f64
}

pub fn random_points(rng: &mut impl Rng, n: usize, h: usize, w: usize) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
        .collect()
}

/// Random partition and a consistent point set: points sit on distinct
/// foreground pixels.
pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize, max_points: usize) -> (PseudoPointSet, RegionPartition) {
    let mut part = RegionPartition::uniform(h, w, RegionLabel::Background);
    for v in part.mask.as_mut_slice() {
        *v = match rng.gen_range(0..10) {
            0..=4 => RegionLabel::Background,
            5..=7 => RegionLabel::Unlabeled,
            _ => RegionLabel::Foreground,
        };
    }
    let n = rng.gen_range(0..=max_points);
    let mut points = Vec::new();
    let mut used = Vec::new();
    for _ in 0..n {
        let p = rng.gen_range(0..h * w);
        if used.contains(&p) {
            continue;
        }
        used.push(p);
        part.mask.as_mut_slice()[p] = RegionLabel::Foreground;
        points.push(Point::new((p / w) as f64 + 0.5, (p % w) as f64 + 0.5));
    }
    let count = points.len() + rng.gen_range(0..2);
    (
        PseudoPointSet {
            image_id: "x".into(),
            points,
            count,
        },
        part,
    )
}

/// Logits bounded away from zero, so that no blob changes under a small
/// perturbation.
pub fn random_logits(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..4.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Small, fast experiment used by the end-to-end tests.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.dataset.train_scenes = 10;
    c.dataset.test_scenes = 4;
    c.dataset.scene.height = 32;
    c.dataset.scene.width = 32;
    c.dataset.scene.count_max = 5;
    c.proposals.iou_threshold = 0.3;
    c.proposals.window_sizes = vec![6, 10];
    c.localizer.net = NetConfig {
        in_channels: 1,
        base_channels: 4,
        depth: 2,
        convs_per_stage: 1,
        max_channels: 16,
    };
    c.localizer.glance_epochs = 2;
    c.curriculum.epochs_per_round = 1;
    c.curriculum.final_min_epochs = 1;
    c.curriculum.final_max_epochs = 2;
    c.eval.seeds = vec![0];
    c.eval.previews = 1;
    c
}
