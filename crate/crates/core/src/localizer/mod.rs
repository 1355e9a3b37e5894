//! Blob-based point-supervised localizer: network, masked loss, blob
//! extraction and the count-regression baseline.

mod blobs;
pub mod checkpoint;
pub mod glance;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::dataset::Point;
use crate::error::{LoocError, Result};
use crate::grid::Grid;

pub use blobs::{extract_blobs, Blob};
pub(crate) use blobs::components;
pub use loss::{lcfcn_loss, lcfcn_loss_and_grad, LossBreakdown};

/// Per-pixel foreground probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpm {
    pub probs: Grid<f32>,
}

impl Cpm {
    pub fn new(probs: Grid<f32>) -> Result<Self> {
        if probs.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(LoocError::Contract("CPM value outside [0, 1]".into()));
        }
        Ok(Cpm { probs })
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.probs.shape()
    }

    /// Mean probability over a box.
    pub fn box_mean(&self, region: &crate::proposals::BoxRegion) -> f64 {
        let mut sum = 0.0f64;
        for r in region.row0..region.row1 {
            let row = &self.probs.as_slice()[r * self.probs.width()..][region.col0..region.col1];
            sum += row.iter().map(|&v| v as f64).sum::<f64>();
        }
        sum / region.area() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum RegionLabel {
    Background = 0,
    Foreground = 1,
    Unlabeled = 2,
}

/// Three-way pixel labelling that decides which pixels the loss sees.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub mask: Grid<RegionLabel>,
}

impl RegionPartition {
    pub fn uniform(height: usize, width: usize, label: RegionLabel) -> Self {
        RegionPartition {
            mask: Grid::filled(height, width, label),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn count(&self, label: RegionLabel) -> usize {
        self.mask.as_slice().iter().filter(|&&l| l == label).count()
    }

    #[inline]
    pub fn is_labeled(&self, pixel: usize) -> bool {
        self.mask.as_slice()[pixel] != RegionLabel::Unlabeled
    }
}

/// Point labels for one image together with that image's count label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoPointSet {
    pub image_id: String,
    pub points: Vec<Point>,
    pub count: usize,
}

impl PseudoPointSet {
    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.points.len() > self.count {
            return Err(LoocError::Contract(format!(
                "{}: {} points exceed count {}",
                self.image_id,
                self.points.len(),
                self.count
            )));
        }
        if let Some(p) = self.points.iter().find(|p| !p.in_bounds(height, width)) {
            return Err(LoocError::Contract(format!(
                "{}: point ({}, {}) out of bounds",
                self.image_id, p.row, p.col
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
