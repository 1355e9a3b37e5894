//! Localizing overlapping objects from per-image counts.
//!
//! Training alternates two stages. Region proposals are scored (first by
//! their own objectness, later by the localizer's probability map) and the
//! centres of the best `max(1, floor(r * count))` of them become point
//! labels; the localizer is then trained on those points while pixels
//! covered only by unselected proposals are left out of the loss. The ratio
//! `r` grows each round until every counted object has a label.

pub mod curriculum;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod grid;
pub mod localizer;
pub mod proposals;
pub mod pseudolabel;

pub use error::{LoocError, Result};
pub use exec::ExecMode;
