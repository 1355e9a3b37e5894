//! Pseudo point labels from scored proposals, and the region partition
//! that tells the loss which pixels are labeled.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Point;
use crate::error::{LoocError, Result};
use crate::localizer::{Cpm, PseudoPointSet, RegionLabel, RegionPartition};
use crate::proposals::{greedy_suppress, BoxRegion, ProposalSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Objectness,
    CpmMean,
    /// `sqrt(objectness * cpm_mean)`.
    GeometricMean,
}

/// How proposals are scored once a CPM is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreCombination {
    #[default]
    CpmMean,
    GeometricMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProposalSet {
    pub base: ProposalSet,
    pub scores: Vec<f64>,
    pub score_source: ScoreSource,
}

/// Scores each proposal by the mean CPM inside its box, or by its own
/// objectness when no CPM exists yet.
pub fn score_proposals(proposals: &ProposalSet, cpm: Option<&Cpm>, combination: ScoreCombination) -> Result<ScoredProposalSet> {
    let Some(cpm) = cpm else {
        return Ok(ScoredProposalSet {
            base: proposals.clone(),
            scores: proposals.proposals.iter().map(|p| p.objectness).collect(),
            score_source: ScoreSource::Objectness,
        });
    };
    let (h, w) = cpm.image_shape();
    if let Some(p) = proposals.proposals.iter().find(|p| !p.region.fits(h, w)) {
        return Err(LoocError::Contract(format!(
            "proposal {} lies outside the {h}x{w} CPM",
            p.proposal_id
        )));
    }
    let (scores, source) = match combination {
        ScoreCombination::CpmMean => (
            proposals.proposals.iter().map(|p| cpm.box_mean(&p.region)).collect(),
            ScoreSource::CpmMean,
        ),
        ScoreCombination::GeometricMean => (
            proposals
                .proposals
                .iter()
                .map(|p| (p.objectness * cpm.box_mean(&p.region)).sqrt())
                .collect(),
            ScoreSource::GeometricMean,
        ),
    };
    Ok(ScoredProposalSet {
        base: proposals.clone(),
        scores,
        score_source: source,
    })
}

/// Number of labels to select: none for an empty image, otherwise at least
/// one and never more than the count.
pub fn selection_size(count: usize, r: f64) -> usize {
    if count == 0 {
        return 0;
    }
    // The epsilon absorbs decimal drift in r (0.7 * 10 = 6.999...).
    let k = (r * count as f64 + 1e-9).floor() as usize;
    k.clamp(1, count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub points: PseudoPointSet,
    pub selected: ProposalSet,
    pub selected_scores: Vec<f64>,
    /// Set when labels were wanted but no proposal was available.
    pub starved: bool,
}

/// Visiting order: score, then objectness (both descending), then id.
pub(crate) fn selection_order(scored: &ScoredProposalSet) -> Vec<usize> {
    let ps = &scored.base.proposals;
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|&a, &b| {
        scored.scores[b]
            .total_cmp(&scored.scores[a])
            .then(ps[b].objectness.total_cmp(&ps[a].objectness))
            .then(ps[a].proposal_id.cmp(&ps[b].proposal_id))
    });
    order
}

/// Greedy NMS over the scored proposals, keeping the best
/// `selection_size(count, r)` survivors; their box centres become points.
pub fn select_pseudo_labels(
    scored: &ScoredProposalSet,
    image_id: &str,
    count: usize,
    r: f64,
    iou_threshold: f64,
) -> Result<Selection> {
    if !(r > 0.0 && r <= 1.0 + 1e-9) {
        return Err(LoocError::Contract(format!("selection ratio {r} outside (0, 1]")));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(LoocError::Contract(format!("iou threshold {iou_threshold} outside (0, 1]")));
    }
    if scored.scores.len() != scored.base.len() {
        return Err(LoocError::Contract("scores not aligned with proposals".into()));
    }
    let k = selection_size(count, r);
    let boxes: Vec<BoxRegion> = scored.base.proposals.iter().map(|p| p.region).collect();
    let mut kept = greedy_suppress(&boxes, &selection_order(scored), iou_threshold);
    kept.truncate(k);
    let selected = scored.base.subset(&kept);
    let points = selected.proposals.iter().map(|p| p.region.center()).collect();
    Ok(Selection {
        points: PseudoPointSet {
            image_id: image_id.to_string(),
            points,
            count,
        },
        selected_scores: kept.iter().map(|&i| scored.scores[i]).collect(),
        starved: k > 0 && selected.is_empty(),
        selected,
    })
}

/// Foreground where any selected box covers the pixel, unlabeled where only
/// unselected boxes do, background elsewhere.
pub fn build_partition(image_shape: (usize, usize), all: &ProposalSet, selected: &ProposalSet) -> Result<RegionPartition> {
    for s in &selected.proposals {
        if !all.proposals.iter().any(|p| p.proposal_id == s.proposal_id && p.region == s.region) {
            return Err(LoocError::Contract(format!(
                "selected proposal {} is not in the proposal set",
                s.proposal_id
            )));
        }
    }
    let (h, w) = image_shape;
    let mut part = RegionPartition::uniform(h, w, RegionLabel::Background);
    let mut paint = |b: &BoxRegion, label: RegionLabel| -> Result<()> {
        if !b.fits(h, w) {
            return Err(LoocError::Contract(format!("box {b:?} outside {h}x{w}")));
        }
        for r in b.row0..b.row1 {
            for c in b.col0..b.col1 {
                let cell = part.mask.get_mut(r, c);
                if label == RegionLabel::Foreground || *cell == RegionLabel::Background {
                    *cell = label;
                }
            }
        }
        Ok(())
    };
    for p in &all.proposals {
        paint(&p.region, RegionLabel::Unlabeled)?;
    }
    for p in &selected.proposals {
        paint(&p.region, RegionLabel::Foreground)?;
    }
    Ok(part)
}

/// Partition for fully supervised training on true points: every pixel is
/// labeled, point pixels are foreground.
pub fn supervised_partition(image_shape: (usize, usize), points: &[Point]) -> RegionPartition {
    let (h, w) = image_shape;
    let mut part = RegionPartition::uniform(h, w, RegionLabel::Background);
    for p in points {
        let (r, c) = p.pixel();
        *part.mask.get_mut(r, c) = RegionLabel::Foreground;
    }
    part
}

/// One line of a per-round pseudo-label dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub round: usize,
    pub r: f64,
    pub count: usize,
    pub points: Vec<Point>,
    pub boxes: Vec<BoxRegion>,
    pub scores: Vec<f64>,
}

impl PseudoLabelRecord {
    pub fn from_selection(sel: &Selection, round: usize, r: f64) -> Self {
        PseudoLabelRecord {
            image_id: sel.points.image_id.clone(),
            round,
            r,
            count: sel.points.count,
            points: sel.points.points.clone(),
            boxes: sel.selected.proposals.iter().map(|p| p.region).collect(),
            scores: sel.selected_scores.clone(),
        }
    }
}

pub fn write_pseudolabels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| LoocError::json(path, e))?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LoocError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| LoocError::io(path, e))
}

pub fn read_pseudolabels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let file = fs::File::open(path).map_err(|e| LoocError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| LoocError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LoocError::json(path, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::proposals::Proposal;

    fn set(boxes: &[(usize, usize, usize, usize, f64)], shape: (usize, usize)) -> ProposalSet {
        let ps = boxes
            .iter()
            .enumerate()
            .map(|(i, &(r0, c0, r1, c1, o))| Proposal {
                proposal_id: i,
                region: BoxRegion::new(r0, c0, r1, c1).unwrap(),
                objectness: o,
            })
            .collect();
        ProposalSet::new(ps, shape, "test").unwrap()
    }

    #[test]
    fn constant_cpm_scores() {
        let ps = set(&[(0, 0, 3, 3, 0.9), (2, 2, 8, 8, 0.1)], (8, 8));
        let cpm = Cpm::new(Grid::filled(8, 8, 0.5)).unwrap();
        let s = score_proposals(&ps, Some(&cpm), ScoreCombination::CpmMean).unwrap();
        assert_eq!(s.scores, vec![0.5, 0.5]);
        assert_eq!(s.score_source, ScoreSource::CpmMean);
    }

    #[test]
    fn box_mean_of_checkerboard() {
        let ps = set(&[(0, 0, 2, 2, 0.3)], (2, 2));
        let cpm = Cpm::new(Grid::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        let s = score_proposals(&ps, Some(&cpm), ScoreCombination::CpmMean).unwrap();
        assert_eq!(s.scores, vec![0.5]);
    }

    #[test]
    fn no_cpm_uses_objectness() {
        let ps = set(&[(0, 0, 3, 3, 0.9), (2, 2, 8, 8, 0.125)], (8, 8));
        let s = score_proposals(&ps, None, ScoreCombination::CpmMean).unwrap();
        assert_eq!(s.scores, vec![0.9, 0.125]);
        assert_eq!(s.score_source, ScoreSource::Objectness);
    }

    #[test]
    fn selection_sizes() {
        assert_eq!(selection_size(10, 0.3), 3);
        assert_eq!(selection_size(0, 0.5), 0);
        assert_eq!(selection_size(10, 1.0), 10);
        assert_eq!(selection_size(5, 0.1), 1);
        assert_eq!(selection_size(10, 0.1 + 6.0 * 0.1), 7);
    }

    #[test]
    fn select_counts() {
        let boxes: Vec<_> = (0..12).map(|i| (i * 5, 0, i * 5 + 4, 4, 1.0 - i as f64 / 20.0)).collect();
        let ps = set(&boxes, (64, 64));
        let scored = score_proposals(&ps, None, ScoreCombination::CpmMean).unwrap();
        let sel = select_pseudo_labels(&scored, "a", 10, 0.3, 0.5).unwrap();
        assert_eq!(sel.points.points.len(), 3);
        let sel = select_pseudo_labels(&scored, "a", 10, 1.0, 0.5).unwrap();
        assert_eq!(sel.points.points.len(), 10);
        let sel = select_pseudo_labels(&scored, "a", 0, 1.0, 0.5).unwrap();
        assert!(sel.points.points.is_empty() && !sel.starved);
        let empty = score_proposals(&ProposalSet::empty((8, 8), "t"), None, ScoreCombination::CpmMean).unwrap();
        assert!(select_pseudo_labels(&empty, "b", 3, 0.5, 0.5).unwrap().starved);
    }

    #[test]
    fn partition_pixel_counts() {
        let all = set(&[(0, 0, 4, 4, 0.9), (6, 6, 9, 9, 0.5)], (10, 10));
        let selected = all.subset(&[0]);
        let p = build_partition((10, 10), &all, &selected).unwrap();
        assert_eq!(p.count(RegionLabel::Foreground), 16);
        assert_eq!(p.count(RegionLabel::Unlabeled), 9);
        assert_eq!(p.count(RegionLabel::Background), 75);

        let none = ProposalSet::empty((10, 10), "t");
        assert_eq!(build_partition((10, 10), &none, &none).unwrap().count(RegionLabel::Background), 100);
        let p = build_partition((10, 10), &all, &all).unwrap();
        assert_eq!(p.count(RegionLabel::Unlabeled), 0);
    }

    #[test]
    fn foreign_selection_rejected() {
        let all = set(&[(0, 0, 4, 4, 0.9)], (10, 10));
        let other = set(&[(1, 1, 4, 4, 0.9)], (10, 10));
        assert!(build_partition((10, 10), &all, &other).is_err());
    }
}
