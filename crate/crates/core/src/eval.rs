//! Counting and localization metrics, the pseudo-label audit and
//! `metrics.csv` persistence.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSplit, Point};
use crate::error::{LoocError, Result};
use crate::exec::{self, ExecMode};
use crate::localizer::glance::GlanceModel;
use crate::localizer::train::LocalizerModel;
use crate::localizer::{extract_blobs, PseudoPointSet};

/// Grid levels reported everywhere; level 3 is the headline.
pub const GAME_LEVELS: [u32; 4] = [0, 1, 2, 3];

/// Mean absolute count error.
pub fn mae(pred_counts: &[f64], gt_counts: &[usize]) -> Result<f64> {
    if pred_counts.len() != gt_counts.len() {
        return Err(LoocError::Contract(format!(
            "{} predictions for {} ground-truth counts",
            pred_counts.len(),
            gt_counts.len()
        )));
    }
    if pred_counts.is_empty() {
        return Err(LoocError::Contract("mae of an empty list".into()));
    }
    let sum: f64 = pred_counts.iter().zip(gt_counts).map(|(p, &g)| (p - g as f64).abs()).sum();
    Ok(sum / pred_counts.len() as f64)
}

fn cell_of(v: f64, extent: usize, cells: usize) -> usize {
    (((v / extent as f64) * cells as f64).floor().max(0.0) as usize).min(cells - 1)
}

/// Sum over the `2^L x 2^L` cells of one image of the absolute difference
/// between predicted and true point counts.
pub fn game_image(pred: &[Point], gt: &[Point], image_shape: (usize, usize), level: u32) -> f64 {
    let (h, w) = image_shape;
    let n = 1usize << level;
    let mut diff = vec![0i64; n * n];
    for p in pred {
        diff[cell_of(p.row, h, n) * n + cell_of(p.col, w, n)] += 1;
    }
    for p in gt {
        diff[cell_of(p.row, h, n) * n + cell_of(p.col, w, n)] -= 1;
    }
    diff.iter().map(|d| d.unsigned_abs() as f64).sum()
}

/// Dataset GAME(L): mean of the per-image values.
pub fn game(pred: &[Vec<Point>], gt: &[Vec<Point>], shapes: &[(usize, usize)], level: u32) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != shapes.len() {
        return Err(LoocError::Contract("game inputs differ in length".into()));
    }
    if pred.is_empty() {
        return Err(LoocError::Contract("game of an empty dataset".into()));
    }
    let sum: f64 = (0..pred.len()).map(|i| game_image(&pred[i], &gt[i], shapes[i], level)).sum();
    Ok(sum / pred.len() as f64)
}

/// GAME of pseudo-labels against the hidden points of the same images.
pub fn audit_pseudo_labels(pseudo: &[PseudoPointSet], gt: &DatasetSplit, level: u32) -> Result<f64> {
    let by_id: HashMap<&str, &crate::dataset::Scene> = gt.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut preds = Vec::with_capacity(pseudo.len());
    let mut truth = Vec::with_capacity(pseudo.len());
    let mut shapes = Vec::with_capacity(pseudo.len());
    for p in pseudo {
        let scene = by_id.get(p.image_id.as_str()).ok_or_else(|| {
            LoocError::Contract(format!("no ground truth for image {}", p.image_id))
        })?;
        preds.push(p.points.clone());
        truth.push(scene.gt_points.clone());
        shapes.push(scene.image.shape());
    }
    game(&preds, &truth, &shapes, level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub scene_id: String,
    pub pred_count: f64,
    /// Raw regression output, for count regressors.
    pub raw_count: Option<f64>,
    pub gt_count: usize,
    /// Per-image GAME at each level of [`GAME_LEVELS`]; empty when the
    /// method does not localize.
    pub game: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub split: String,
    pub seed: u64,
    pub mae: f64,
    /// Level -> GAME; empty for methods without localization.
    pub game: BTreeMap<u32, f64>,
    pub per_image: Vec<PerImage>,
}

impl EvalResult {
    fn from_rows(method: &str, split: &DatasetSplit, seed: u64, rows: Vec<PerImage>) -> Result<Self> {
        let preds: Vec<f64> = rows.iter().map(|r| r.pred_count).collect();
        let gts: Vec<usize> = rows.iter().map(|r| r.gt_count).collect();
        let mae = mae(&preds, &gts)?;
        let mut game = BTreeMap::new();
        if rows.iter().all(|r| r.game.len() == GAME_LEVELS.len()) {
            for (i, &l) in GAME_LEVELS.iter().enumerate() {
                game.insert(l, rows.iter().map(|r| r.game[i]).sum::<f64>() / rows.len() as f64);
            }
        }
        Ok(EvalResult {
            method: method.to_string(),
            split: split.split_name.as_str().to_string(),
            seed,
            mae,
            game,
            per_image: rows,
        })
    }

    pub fn game_at(&self, level: u32) -> Option<f64> {
        self.game.get(&level).copied()
    }
}

/// Blob count and blob centres of a trained localizer, scored against the
/// hidden points.
pub fn evaluate_localizer(
    model: &LocalizerModel,
    split: &DatasetSplit,
    prob_threshold: f32,
    method: &str,
    seed: u64,
    mode: ExecMode,
) -> Result<EvalResult> {
    let rows = exec::try_map(mode, &split.scenes, |scene| -> Result<PerImage> {
        let cpm = model.forward(&scene.image)?;
        let centres: Vec<Point> = extract_blobs(&cpm, prob_threshold).into_iter().map(|b| b.center).collect();
        Ok(PerImage {
            scene_id: scene.scene_id.clone(),
            pred_count: centres.len() as f64,
            raw_count: None,
            gt_count: scene.count,
            game: GAME_LEVELS
                .iter()
                .map(|&l| game_image(&centres, &scene.gt_points, scene.image.shape(), l))
                .collect(),
        })
    })?;
    EvalResult::from_rows(method, split, seed, rows)
}

pub fn evaluate_glance(model: &GlanceModel, split: &DatasetSplit, method: &str, seed: u64, mode: ExecMode) -> Result<EvalResult> {
    let rows = exec::try_map(mode, &split.scenes, |scene| -> Result<PerImage> {
        let p = model.predict(&scene.image)?;
        Ok(PerImage {
            scene_id: scene.scene_id.clone(),
            pred_count: p.reported,
            raw_count: Some(p.raw),
            gt_count: scene.count,
            game: Vec::new(),
        })
    })?;
    EvalResult::from_rows(method, split, seed, rows)
}

pub const METRICS_HEADER: &str = "method,seed,mae,game0,game1,game2,game3";

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub mae: f64,
    pub game: [Option<f64>; 4],
}

impl From<&EvalResult> for MetricsRow {
    fn from(r: &EvalResult) -> Self {
        MetricsRow {
            method: r.method.clone(),
            seed: r.seed,
            mae: r.mae,
            game: [r.game_at(0), r.game_at(1), r.game_at(2), r.game_at(3)],
        }
    }
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        let g: Vec<String> = self.game.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
        format!("{},{},{},{}", self.method, self.seed, self.mae, g.join(","))
    }

    fn parse(line: &str, path: &Path) -> Result<Self> {
        let bad = || LoocError::Contract(format!("malformed metrics row in {}: {line}", path.display()));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(MetricsRow {
            method: cols[0].to_string(),
            seed: cols[1].parse().map_err(|_| bad())?,
            mae: num(cols[2])?,
            game: [opt(cols[3])?, opt(cols[4])?, opt(cols[5])?, opt(cols[6])?],
        })
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LoocError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| LoocError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| LoocError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(LoocError::Contract(format!("{} lacks the metrics header", path.display())));
    }
    lines.filter(|l| !l.trim().is_empty()).map(|l| MetricsRow::parse(l, path)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(r, c)| Point::new(r, c)).collect()
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[3.0, 5.0], &[4, 4]).unwrap(), 1.0);
        assert_eq!(mae(&[2.0, 7.0], &[2, 7]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1, 2]).is_err());
    }

    #[test]
    fn game_examples() {
        assert_eq!(game_image(&pts(&[(1.0, 1.0), (5.0, 5.0)]), &pts(&[(2.0, 2.0)]), (10, 10), 0), 1.0);
        let pred = pts(&[(1.0, 1.0), (8.0, 8.0)]);
        let gt = pts(&[(1.0, 2.0)]);
        assert_eq!(game_image(&pred, &gt, (10, 10), 1), 1.0);
        assert_eq!(game_image(&pts(&[(0.0, 0.0)]), &pts(&[(9.0, 9.0)]), (10, 10), 1), 2.0);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            MetricsRow { method: "looc".into(), seed: 1, mae: 0.1 + 0.2, game: [Some(0.3), Some(1.0), Some(2.5), Some(3.0)] },
            MetricsRow { method: "glance".into(), seed: 1, mae: 1.25, game: [None; 4] },
        ];
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("glance,1,1.25,,,,"));
    }
}
