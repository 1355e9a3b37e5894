//! Alternating pseudo-label generation and localizer training with a
//! growing selection ratio, the fixed-score variant, and the fully
//! supervised reference trainer.
//!
//! Weakly supervised runs take a [`CountsOnlySplit`], so they have no way
//! to reach ground-truth points.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{CountsOnlySplit, DatasetSplit};
use crate::error::{LoocError, Result};
use crate::exec::{self, ExecMode};
use crate::grid::Image;
use crate::localizer::checkpoint::{localizer_checkpoint, restore_localizer, Checkpoint};
use crate::localizer::train::{train_epoch, LocalizerConfig, LocalizerModel, TrainSample, TrainerState};
use crate::localizer::{Cpm, PseudoPointSet, RegionPartition};
use crate::proposals::{generate_proposals, ProposalConfig, ProposalSet};
use crate::pseudolabel::{
    build_partition, read_pseudolabels, score_proposals, select_pseudo_labels, selection_size, supervised_partition,
    write_pseudolabels, PseudoLabelRecord, ScoreCombination, Selection,
};

pub const STATE_VERSION: u32 = 1;
const STATE_FILE: &str = "state.json";
const FINAL_DIR: &str = "final";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumMethod {
    /// Proposals re-scored by the current model's probability map.
    Looc,
    /// Proposals keep their objectness scores in every round.
    #[serde(rename = "topk")]
    TopK,
}

impl CurriculumMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CurriculumMethod::Looc => "looc",
            CurriculumMethod::TopK => "topk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Selection ratio of the first round.
    pub r0: f64,
    /// Ratio increment per round.
    pub delta: f64,
    pub epochs_per_round: usize,
    /// Epochs of the final pass before early stopping may trigger.
    pub final_min_epochs: usize,
    /// Upper bound on epochs of the final pass.
    pub final_max_epochs: usize,
    /// Epochs without relative improvement before the final pass stops.
    pub final_patience: usize,
    pub final_min_improvement: f64,
    /// Keep training the same parameters across rounds.
    pub warm_start: bool,
    pub score_combination: ScoreCombination,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            r0: 0.1,
            delta: 0.1,
            epochs_per_round: 10,
            final_min_epochs: 20,
            final_max_epochs: 100,
            final_patience: 5,
            final_min_improvement: 1e-3,
            warm_start: true,
            score_combination: ScoreCombination::CpmMean,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0 <= 1.0) {
            return Err(LoocError::Config(format!("curriculum.r0 = {} must lie in (0, 1]", self.r0)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(LoocError::Config(format!("curriculum.delta = {} must be positive", self.delta)));
        }
        if self.final_max_epochs == 0 || self.final_patience == 0 {
            return Err(LoocError::Config("curriculum final epochs and patience must be >= 1".into()));
        }
        if self.final_min_epochs > self.final_max_epochs {
            return Err(LoocError::Config(format!(
                "curriculum.final_min_epochs = {} exceeds final_max_epochs = {}",
                self.final_min_epochs, self.final_max_epochs
            )));
        }
        if !(self.final_min_improvement >= 0.0 && self.final_min_improvement < 1.0) {
            return Err(LoocError::Config("curriculum.final_min_improvement must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Ratios of the alternation rounds: `r0 + t * delta` while at most 1.
    pub fn schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut t = 0usize;
        loop {
            let r = self.r0 + t as f64 * self.delta;
            if r > 1.0 + 1e-9 {
                break;
            }
            out.push(r);
            t += 1;
        }
        out
    }
}

/// Training image with its proposals, generated once per run.
#[derive(Debug, Clone)]
pub struct CachedImage {
    pub scene_id: String,
    pub image: Image,
    pub count: usize,
    pub proposals: ProposalSet,
}

pub fn cache_proposals(data: &CountsOnlySplit, config: &ProposalConfig, mode: ExecMode) -> Result<Vec<CachedImage>> {
    exec::try_map(mode, &data.scenes, |s| -> Result<CachedImage> {
        Ok(CachedImage {
            scene_id: s.scene_id.clone(),
            image: s.image.clone(),
            count: s.count,
            proposals: generate_proposals(&s.image, config)?,
        })
    })
}

/// Pseudo-labels and partitions of every image for one round.
#[derive(Debug, Clone)]
pub struct RoundLabels {
    pub round: usize,
    pub r: f64,
    pub selections: Vec<Selection>,
    pub partitions: Vec<RegionPartition>,
}

impl RoundLabels {
    pub fn records(&self) -> Vec<PseudoLabelRecord> {
        self.selections
            .iter()
            .map(|s| PseudoLabelRecord::from_selection(s, self.round, self.r))
            .collect()
    }

    pub fn point_sets(&self) -> Vec<PseudoPointSet> {
        self.selections.iter().map(|s| s.points.clone()).collect()
    }

    pub fn total_points(&self) -> usize {
        self.selections.iter().map(|s| s.points.points.len()).sum()
    }
}

/// Scores, selects and partitions every cached image. `cpms`, when given,
/// must align with `cache`.
pub fn label_round(
    cache: &[CachedImage],
    cpms: Option<&[Cpm]>,
    r: f64,
    round: usize,
    iou_threshold: f64,
    combination: ScoreCombination,
    mode: ExecMode,
) -> Result<RoundLabels> {
    if let Some(c) = cpms {
        if c.len() != cache.len() {
            return Err(LoocError::Contract(format!("{} maps for {} images", c.len(), cache.len())));
        }
    }
    let indices: Vec<usize> = (0..cache.len()).collect();
    let rows = exec::try_map(mode, &indices, |&i| -> Result<(Selection, RegionPartition)> {
        let item = &cache[i];
        let scored = score_proposals(&item.proposals, cpms.map(|c| &c[i]), combination)?;
        let sel = select_pseudo_labels(&scored, &item.scene_id, item.count, r, iou_threshold)?;
        let part = build_partition(item.proposals.image_shape, &item.proposals, &sel.selected)?;
        Ok((sel, part))
    })?;
    let (selections, partitions): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let labels = RoundLabels {
        round,
        r,
        selections,
        partitions,
    };
    let wanted: usize = cache.iter().map(|c| c.count).sum();
    if wanted > 0 && labels.total_points() == 0 {
        return Err(LoocError::DegenerateProposals { round });
    }
    Ok(labels)
}

/// Images whose count is positive but which got no proposal at all carry
/// no usable label and are left out.
pub fn training_samples(cache: &[CachedImage], labels: &RoundLabels) -> Vec<TrainSample> {
    cache
        .iter()
        .zip(labels.selections.iter().zip(&labels.partitions))
        .filter(|(_, (sel, _))| !sel.starved)
        .map(|(item, (sel, part))| TrainSample::new(&item.scene_id, &item.image, sel.points.clone(), part.clone()))
        .collect()
}

/// Early-stopping rule for training to convergence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Epochs without relative improvement of `min_improvement` before stopping.
    pub patience: usize,
    pub min_improvement: f64,
}

impl CurriculumConfig {
    pub fn final_rule(&self) -> StopRule {
        StopRule {
            min_epochs: self.final_min_epochs,
            max_epochs: self.final_max_epochs,
            patience: self.final_patience,
            min_improvement: self.final_min_improvement,
        }
    }
}

/// Trains until `rule` says stop; returns the mean loss of every epoch.
pub fn train_to_convergence(
    model: &mut LocalizerModel,
    samples: &[TrainSample],
    trainer: &mut TrainerState,
    rng: &mut ChaCha8Rng,
    rule: StopRule,
    mode: ExecMode,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..rule.max_epochs {
        let loss = train_epoch(model, samples, trainer, rng, mode)?;
        losses.push(loss);
        if loss < best * (1.0 - rule.min_improvement) || !best.is_finite() {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= rule.patience && epoch + 1 >= rule.min_epochs {
                break;
            }
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub r: f64,
    /// Requested label count per image, `selection_size(count, r)`.
    pub targets: Vec<usize>,
    /// Pseudo-points actually produced per image.
    pub produced: Vec<usize>,
    pub starved: usize,
    pub epoch_losses: Vec<f64>,
}

impl RoundSummary {
    fn new(labels: &RoundLabels, cache: &[CachedImage], epoch_losses: Vec<f64>) -> Self {
        RoundSummary {
            round: labels.round,
            r: labels.r,
            targets: cache.iter().map(|c| selection_size(c.count, labels.r)).collect(),
            produced: labels.selections.iter().map(|s| s.points.points.len()).collect(),
            starved: labels.selections.iter().filter(|s| s.starved).count(),
            epoch_losses,
        }
    }
}

/// Progress of one curriculum run; mirrored to `state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub format_version: u32,
    pub method: CurriculumMethod,
    pub r0: f64,
    pub delta: f64,
    /// Ratio of the most recent round (`r0` before the first).
    pub r: f64,
    /// Completed alternation rounds.
    pub round: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Checkpoint of the most recent round, relative to the state directory.
    pub checkpoint: Option<String>,
    pub history: Vec<RoundSummary>,
    pub final_pass: Option<RoundSummary>,
    pub finished: bool,
    /// Pseudo-points of the most recent round (or of the final pass).
    #[serde(skip)]
    pub labels: Vec<PseudoPointSet>,
}

impl CurriculumState {
    fn new(method: CurriculumMethod, config: &CurriculumConfig, seed: u64, config_hash: String) -> Self {
        CurriculumState {
            format_version: STATE_VERSION,
            method,
            r0: config.r0,
            delta: config.delta,
            r: config.r0,
            round: 0,
            seed,
            config_hash,
            checkpoint: None,
            history: Vec::new(),
            final_pass: None,
            finished: false,
            labels: Vec::new(),
        }
    }
}

/// Where and how far to run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Persist round checkpoints and pseudo-labels here.
    pub state_dir: Option<PathBuf>,
    /// Continue from `state_dir` if it holds a state file.
    pub resume: bool,
    /// Return once this many rounds are complete, before the final pass.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CurriculumOutcome {
    pub state: CurriculumState,
    /// Model of the final pass; `None` if the run stopped early.
    pub model: Option<LocalizerModel>,
    /// Pseudo-labels the final model was trained on.
    pub final_labels: Vec<PseudoLabelRecord>,
}

/// Hash of everything that affects a curriculum run besides data and seed.
pub fn config_hash(
    method: CurriculumMethod,
    proposals: &ProposalConfig,
    localizer: &LocalizerConfig,
    curriculum: &CurriculumConfig,
) -> Result<String> {
    let echo = serde_json::json!({
        "method": method,
        "proposals": proposals,
        "localizer": localizer,
        "curriculum": curriculum,
    });
    let bytes = serde_json::to_vec(&echo).map_err(|e| LoocError::Config(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn round_dir(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round}"))
}

fn write_state(dir: &Path, state: &CurriculumState) -> Result<()> {
    let path = dir.join(STATE_FILE);
    let tmp = dir.join(format!("{STATE_FILE}.tmp"));
    let text = serde_json::to_string_pretty(state).map_err(|e| LoocError::json(&path, e))?;
    fs::write(&tmp, text).map_err(|e| LoocError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| LoocError::io(&path, e))
}

fn save_step(
    dir: &Path,
    sub: &Path,
    model: &LocalizerModel,
    trainer: &TrainerState,
    rng: &ChaCha8Rng,
    records: &[PseudoLabelRecord],
    state: &mut CurriculumState,
) -> Result<()> {
    let full = dir.join(sub);
    fs::create_dir_all(&full).map_err(|e| LoocError::io(&full, e))?;
    let echo = serde_json::json!({ "config_hash": state.config_hash, "method": state.method });
    localizer_checkpoint(model, Some(trainer), Some(rng), Some(state.round), echo).save(&full.join("checkpoint.bin"))?;
    write_pseudolabels(&full.join("pseudolabels.jsonl"), records)?;
    state.checkpoint = Some(format!("{}/checkpoint.bin", sub.display()));
    write_state(dir, state)
}

fn records_to_points(records: Vec<PseudoLabelRecord>) -> Vec<PseudoPointSet> {
    records
        .into_iter()
        .map(|r| PseudoPointSet {
            image_id: r.image_id,
            points: r.points,
            count: r.count,
        })
        .collect()
}

/// Loads the state of an interrupted or finished run, including the
/// pseudo-points of its last completed step.
pub fn resume(state_dir: &Path) -> Result<CurriculumState> {
    let path = state_dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LoocError::io(&path, e))?;
    let probe: serde_json::Value = serde_json::from_str(&text).map_err(|e| LoocError::json(&path, e))?;
    let found = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != STATE_VERSION {
        return Err(LoocError::Version {
            found,
            expected: STATE_VERSION,
        });
    }
    let mut state: CurriculumState = serde_json::from_str(&text).map_err(|e| LoocError::json(&path, e))?;
    let labels_dir = if state.finished {
        Some(state_dir.join(FINAL_DIR))
    } else if state.round > 0 {
        Some(round_dir(state_dir, state.round - 1))
    } else {
        None
    };
    if let Some(d) = labels_dir {
        state.labels = records_to_points(read_pseudolabels(&d.join("pseudolabels.jsonl"))?);
    }
    Ok(state)
}

fn load_checkpoint(state_dir: &Path, state: &CurriculumState) -> Result<(LocalizerModel, TrainerState, ChaCha8Rng)> {
    let rel = state
        .checkpoint
        .as_ref()
        .ok_or_else(|| LoocError::Contract("state has no checkpoint to resume from".into()))?;
    let ckpt = Checkpoint::load(&state_dir.join(rel))?;
    let (model, trainer) = restore_localizer(&ckpt)?;
    let trainer = trainer.ok_or_else(|| LoocError::Contract("checkpoint lacks optimizer state".into()))?;
    let rng = ckpt
        .header
        .rng
        .as_ref()
        .ok_or_else(|| LoocError::Contract("checkpoint lacks RNG state".into()))?
        .restore()?;
    Ok((model, trainer, rng))
}

/// Runs the full schedule for `method`: rounds at `r0, r0 + delta, ...`,
/// then a fresh model trained on labels selected at `r = 1`.
#[allow(clippy::too_many_arguments)]
pub fn run_curriculum(
    method: CurriculumMethod,
    data: &CountsOnlySplit,
    proposals: &ProposalConfig,
    localizer: &LocalizerConfig,
    config: &CurriculumConfig,
    seed: u64,
    mode: ExecMode,
    options: &RunOptions,
) -> Result<CurriculumOutcome> {
    proposals.validate()?;
    localizer.validate()?;
    config.validate()?;
    if data.is_empty() {
        return Err(LoocError::Contract("empty training split".into()));
    }
    let hash = config_hash(method, proposals, localizer, config)?;
    let dir = options.state_dir.as_deref();
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| LoocError::io(d, e))?;
    }

    let resumed = match dir {
        Some(d) if options.resume && d.join(STATE_FILE).exists() => {
            let state = resume(d)?;
            if state.config_hash != hash || state.seed != seed || state.method != method {
                return Err(LoocError::Config(format!(
                    "state in {} belongs to a different configuration or seed",
                    d.display()
                )));
            }
            Some(state)
        }
        _ => None,
    };
    if let (Some(state), Some(d)) = (&resumed, dir) {
        if state.finished {
            let (model, _, _) = load_checkpoint(d, state)?;
            let final_labels = read_pseudolabels(&d.join(FINAL_DIR).join("pseudolabels.jsonl"))?;
            return Ok(CurriculumOutcome {
                state: state.clone(),
                model: Some(model),
                final_labels,
            });
        }
    }

    let cache = cache_proposals(data, proposals, mode)?;
    let schedule = config.schedule();
    let (mut state, mut model, mut trainer, mut rng) = match (resumed, dir) {
        (Some(state), Some(d)) if state.round > 0 => {
            let (m, t, r) = load_checkpoint(d, &state)?;
            (state, m, t, r)
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = LocalizerModel::new(localizer.net.clone(), &mut rng)?;
            let trainer = TrainerState::new(localizer.optim.clone(), model.params.len());
            (CurriculumState::new(method, config, seed, hash), model, trainer, rng)
        }
    };

    let images: Vec<&Image> = cache.iter().map(|c| &c.image).collect();
    let maps = |model: &LocalizerModel, first: bool| -> Result<Option<Vec<Cpm>>> {
        match method {
            CurriculumMethod::Looc if !first => Ok(Some(model.forward_batch(&images, mode)?)),
            _ => Ok(None),
        }
    };

    while state.round < schedule.len() {
        if options.stop_after.is_some_and(|n| state.round >= n) {
            return Ok(CurriculumOutcome {
                state,
                model: None,
                final_labels: Vec::new(),
            });
        }
        let t = state.round;
        let r = schedule[t];
        let cpms = maps(&model, t == 0)?;
        let labels = label_round(
            &cache,
            cpms.as_deref(),
            r,
            t,
            proposals.iou_threshold,
            config.score_combination,
            mode,
        )?;
        if t > 0 && !config.warm_start {
            model = LocalizerModel::new(localizer.net.clone(), &mut rng)?;
            trainer = TrainerState::new(localizer.optim.clone(), model.params.len());
        }
        let samples = training_samples(&cache, &labels);
        let mut losses = Vec::with_capacity(config.epochs_per_round);
        for _ in 0..config.epochs_per_round {
            losses.push(train_epoch(&mut model, &samples, &mut trainer, &mut rng, mode)?);
        }
        log::info!(
            "{} round {t}: r={r:.2}, {} pseudo-points, last loss {:.4}",
            method.as_str(),
            labels.total_points(),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        state.history.push(RoundSummary::new(&labels, &cache, losses));
        state.round += 1;
        state.r = r;
        state.labels = labels.point_sets();
        if let Some(d) = dir {
            let sub = PathBuf::from(format!("round_{t}"));
            save_step(d, &sub, &model, &trainer, &rng, &labels.records(), &mut state)?;
        }
    }

    let final_round = schedule.len();
    let cpms = maps(&model, final_round == 0)?;
    let labels = label_round(
        &cache,
        cpms.as_deref(),
        1.0,
        final_round,
        proposals.iou_threshold,
        config.score_combination,
        mode,
    )?;
    let mut model = LocalizerModel::new(localizer.net.clone(), &mut rng)?;
    let mut trainer = TrainerState::new(localizer.optim.clone(), model.params.len());
    let samples = training_samples(&cache, &labels);
    let losses = train_to_convergence(
        &mut model,
        &samples,
        &mut trainer,
        &mut rng,
        config.final_rule(),
        mode,
    )?;
    log::info!("{} final pass: {} epochs", method.as_str(), losses.len());
    state.final_pass = Some(RoundSummary::new(&labels, &cache, losses));
    state.finished = true;
    state.labels = labels.point_sets();
    let final_labels = labels.records();
    if let Some(d) = dir {
        save_step(d, Path::new(FINAL_DIR), &model, &trainer, &rng, &final_labels, &mut state)?;
    }
    Ok(CurriculumOutcome {
        state,
        model: Some(model),
        final_labels,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn run_looc(
    data: &CountsOnlySplit,
    proposals: &ProposalConfig,
    localizer: &LocalizerConfig,
    config: &CurriculumConfig,
    seed: u64,
    mode: ExecMode,
    options: &RunOptions,
) -> Result<CurriculumOutcome> {
    run_curriculum(CurriculumMethod::Looc, data, proposals, localizer, config, seed, mode, options)
}

#[allow(clippy::too_many_arguments)]
pub fn run_topk(
    data: &CountsOnlySplit,
    proposals: &ProposalConfig,
    localizer: &LocalizerConfig,
    config: &CurriculumConfig,
    seed: u64,
    mode: ExecMode,
    options: &RunOptions,
) -> Result<CurriculumOutcome> {
    run_curriculum(CurriculumMethod::TopK, data, proposals, localizer, config, seed, mode, options)
}

/// Reference localizer trained on the true points with every pixel
/// labeled, using the same stopping rule as the final pass.
pub fn train_supervised(
    data: &DatasetSplit,
    localizer: &LocalizerConfig,
    config: &CurriculumConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<(LocalizerModel, Vec<f64>)> {
    localizer.validate()?;
    config.validate()?;
    if data.scenes.is_empty() {
        return Err(LoocError::Contract("empty training split".into()));
    }
    let samples: Vec<TrainSample> = data
        .scenes
        .iter()
        .map(|s| {
            let points = PseudoPointSet {
                image_id: s.scene_id.clone(),
                points: s.gt_points.clone(),
                count: s.count,
            };
            let part = supervised_partition(s.image.shape(), &s.gt_points);
            TrainSample::new(&s.scene_id, &s.image, points, part)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = LocalizerModel::new(localizer.net.clone(), &mut rng)?;
    let mut trainer = TrainerState::new(localizer.optim.clone(), model.params.len());
    let losses = train_to_convergence(
        &mut model,
        &samples,
        &mut trainer,
        &mut rng,
        config.final_rule(),
        mode,
    )?;
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_has_ten_rounds() {
        let s = CurriculumConfig::default().schedule();
        assert_eq!(s.len(), 10);
        assert!((s[9] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_lengths() {
        let cfg = |r0, delta| CurriculumConfig {
            r0,
            delta,
            ..Default::default()
        };
        assert_eq!(cfg(0.25, 0.25).schedule(), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(cfg(1.0, 0.1).schedule().len(), 1);
        assert_eq!(cfg(0.2, 0.3).schedule().len(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            CurriculumConfig {
                r0: 0.0,
                ..Default::default()
            },
            CurriculumConfig {
                delta: -0.1,
                ..Default::default()
            },
            CurriculumConfig {
                final_patience: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [CurriculumMethod::Looc, CurriculumMethod::TopK] {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.as_str()));
            assert_eq!(serde_json::from_str::<CurriculumMethod>(&s).unwrap(), m);
        }
    }
}
