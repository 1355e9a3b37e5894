//! Experiment configuration and the train / evaluate / audit drivers shared
//! by the command-line tool and the benchmark tests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{run_curriculum, train_supervised, CurriculumConfig, CurriculumMethod, CurriculumState, RunOptions};
use crate::dataset::{generate_split, read_counts_only, read_dataset, CountsOnlySplit, DatasetSplit, SceneConfig, SplitName};
use crate::error::{LoocError, Result};
use crate::eval::{self, evaluate_glance, evaluate_localizer, EvalResult, MetricsRow, GAME_LEVELS};
use crate::exec::ExecMode;
use crate::localizer::checkpoint::{glance_checkpoint, localizer_checkpoint, restore_glance, restore_localizer, Checkpoint, ModelKind};
use crate::localizer::glance::{train_glance, GlanceConfig, GlanceModel};
use crate::localizer::nn::NetConfig;
use crate::localizer::optim::OptimConfig;
use crate::localizer::train::{LocalizerConfig, LocalizerModel};
use crate::localizer::PseudoPointSet;
use crate::proposals::ProposalConfig;
use crate::pseudolabel::{read_pseudolabels, write_pseudolabels, PseudoLabelRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "looc")]
    Looc,
    #[serde(rename = "topk")]
    TopK,
    #[serde(rename = "glance")]
    Glance,
    #[serde(rename = "lcfcn-supervised")]
    LcfcnSupervised,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Looc, Method::TopK, Method::Glance, Method::LcfcnSupervised];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Looc => "looc",
            Method::TopK => "topk",
            Method::Glance => "glance",
            Method::LcfcnSupervised => "lcfcn-supervised",
        }
    }

    /// Methods that train from counts alone.
    pub fn is_count_supervised(self) -> bool {
        self != Method::LcfcnSupervised
    }

    /// The curriculum variant behind `looc` and `topk`.
    pub fn curriculum(self) -> Option<CurriculumMethod> {
        match self {
            Method::Looc => Some(CurriculumMethod::Looc),
            Method::TopK => Some(CurriculumMethod::TopK),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = LoocError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| LoocError::Config(format!("unknown method '{s}' (expected looc, topk, glance or lcfcn-supervised)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_scenes: 200,
            test_scenes: 50,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerSection {
    pub net: NetConfig,
    pub optim: OptimConfig,
    /// Epochs of the count-regression baseline, which shares `net` and `optim`.
    pub glance_epochs: usize,
}

impl Default for LocalizerSection {
    fn default() -> Self {
        LocalizerSection {
            net: NetConfig::default(),
            optim: OptimConfig::default(),
            glance_epochs: 60,
        }
    }
}

impl LocalizerSection {
    pub fn localizer(&self) -> LocalizerConfig {
        LocalizerConfig {
            net: self.net.clone(),
            optim: self.optim.clone(),
        }
    }

    pub fn glance(&self) -> GlanceConfig {
        GlanceConfig {
            net: self.net.clone(),
            optim: self.optim.clone(),
            epochs: self.glance_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// CPM threshold for blob extraction.
    pub prob_threshold: f32,
    /// Seeds of a multi-seed benchmark.
    pub seeds: Vec<u64>,
    /// Number of test images written as CPM previews per run.
    pub previews: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            prob_threshold: 0.5,
            seeds: vec![0, 1, 2],
            previews: 4,
        }
    }
}

/// Full experiment configuration, read from a TOML file with the sections
/// `[dataset]`, `[proposals]`, `[localizer]`, `[curriculum]` and `[eval]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub proposals: ProposalConfig,
    pub localizer: LocalizerSection,
    pub curriculum: CurriculumConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LoocError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LoocError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LoocError::Config(msg) => LoocError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LoocError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        if self.dataset.train_scenes == 0 || self.dataset.test_scenes == 0 {
            return Err(LoocError::Config("dataset needs at least one train and one test scene".into()));
        }
        if self.localizer.net.in_channels != self.dataset.scene.channels {
            return Err(LoocError::Config(format!(
                "localizer.net.in_channels = {} but scenes have {} channels",
                self.localizer.net.in_channels, self.dataset.scene.channels
            )));
        }
        let side = self.localizer.net.min_side();
        if self.dataset.scene.height < side || self.dataset.scene.width < side {
            return Err(LoocError::Config(format!("scenes smaller than {side}x{side} cannot pass the network")));
        }
        self.proposals.validate()?;
        self.localizer.localizer().validate()?;
        self.curriculum.validate()?;
        if !(self.eval.prob_threshold > 0.0 && self.eval.prob_threshold < 1.0) {
            return Err(LoocError::Config("eval.prob_threshold must lie in (0, 1)".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(LoocError::Config("eval.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self).map_err(|e| LoocError::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}

fn split_seed(seed: u64, split: SplitName) -> u64 {
    let tag: u64 = match split {
        SplitName::Train => 1,
        SplitName::Val => 2,
        SplitName::Test => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

/// Train and test splits for one seed.
pub fn generate_splits(config: &ExperimentConfig, seed: u64, mode: ExecMode) -> Result<(DatasetSplit, DatasetSplit)> {
    let d = &config.dataset;
    let train = generate_split(&d.scene, SplitName::Train, d.train_scenes, split_seed(seed, SplitName::Train), mode)?;
    let test = generate_split(&d.scene, SplitName::Test, d.test_scenes, split_seed(seed, SplitName::Test), mode)?;
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Localizer(LocalizerModel),
    Glance(GlanceModel),
}

/// A trained model with the pseudo-labels it was trained on (if any).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub method: Method,
    pub seed: u64,
    pub model: TrainedModel,
    pub pseudolabels: Vec<PseudoLabelRecord>,
    pub curriculum: Option<CurriculumState>,
}

/// Trains a count-supervised method. Ground-truth points are out of reach
/// here by construction.
pub fn train_count_supervised(
    method: Method,
    config: &ExperimentConfig,
    data: &CountsOnlySplit,
    seed: u64,
    mode: ExecMode,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    if let Some(cm) = method.curriculum() {
        let out = run_curriculum(
            cm,
            data,
            &config.proposals,
            &config.localizer.localizer(),
            &config.curriculum,
            seed,
            mode,
            options,
        )?;
        let model = out
            .model
            .ok_or_else(|| LoocError::Contract("curriculum stopped before the final pass".into()))?;
        return Ok(TrainOutcome {
            method,
            seed,
            model: TrainedModel::Localizer(model),
            pseudolabels: out.final_labels,
            curriculum: Some(out.state),
        });
    }
    match method {
        Method::Glance => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (model, _) = train_glance(data, &config.localizer.glance(), &mut rng, mode)?;
            Ok(TrainOutcome {
                method,
                seed,
                model: TrainedModel::Glance(model),
                pseudolabels: Vec::new(),
                curriculum: None,
            })
        }
        _ => Err(LoocError::Contract(format!("{method} needs point labels"))),
    }
}

/// Trains the point-supervised reference localizer.
pub fn train_point_supervised(config: &ExperimentConfig, data: &DatasetSplit, seed: u64, mode: ExecMode) -> Result<TrainOutcome> {
    let (model, _) = train_supervised(data, &config.localizer.localizer(), &config.curriculum, seed, mode)?;
    Ok(TrainOutcome {
        method: Method::LcfcnSupervised,
        seed,
        model: TrainedModel::Localizer(model),
        pseudolabels: Vec::new(),
        curriculum: None,
    })
}

/// Trains `method` on the split stored in `data_dir`. Only the
/// point-supervised reference loads the point annotations.
pub fn train_from_dir(
    method: Method,
    config: &ExperimentConfig,
    data_dir: &Path,
    seed: u64,
    mode: ExecMode,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    if method.is_count_supervised() {
        let data = read_counts_only(data_dir)?;
        train_count_supervised(method, config, &data, seed, mode, options)
    } else {
        let data = read_dataset(data_dir)?;
        train_point_supervised(config, &data, seed, mode)
    }
}

pub fn evaluate(outcome: &TrainOutcome, config: &ExperimentConfig, test: &DatasetSplit, mode: ExecMode) -> Result<EvalResult> {
    match &outcome.model {
        TrainedModel::Localizer(m) => evaluate_localizer(
            m,
            test,
            config.eval.prob_threshold,
            outcome.method.as_str(),
            outcome.seed,
            mode,
        ),
        TrainedModel::Glance(m) => evaluate_glance(m, test, outcome.method.as_str(), outcome.seed, mode),
    }
}

/// Pseudo-label quality on the training split at every GAME level.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub method: String,
    pub seed: u64,
    pub game: [f64; 4],
}

pub const AUDIT_HEADER: &str = "method,seed,game0,game1,game2,game3";

pub fn audit(records: &[PseudoLabelRecord], train: &DatasetSplit, method: Method, seed: u64) -> Result<AuditRow> {
    let sets: Vec<PseudoPointSet> = records
        .iter()
        .map(|r| PseudoPointSet {
            image_id: r.image_id.clone(),
            points: r.points.clone(),
            count: r.count,
        })
        .collect();
    let mut game = [0.0; 4];
    for (g, &level) in game.iter_mut().zip(GAME_LEVELS.iter()) {
        *g = eval::audit_pseudo_labels(&sets, train, level)?;
    }
    Ok(AuditRow {
        method: method.as_str().to_string(),
        seed,
        game,
    })
}

pub fn write_audit_csv(path: &Path, rows: &[AuditRow]) -> Result<()> {
    let mut out = String::from(AUDIT_HEADER);
    out.push('\n');
    for r in rows {
        let g: Vec<String> = r.game.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{},{},{}\n", r.method, r.seed, g.join(",")));
    }
    fs::write(path, out).map_err(|e| LoocError::io(path, e))
}

const MODEL_FILE: &str = "model.bin";
const LABELS_FILE: &str = "pseudolabels.jsonl";
const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunInfo {
    method: Method,
    seed: u64,
    config_hash: String,
}

/// Directory of one trained (method, seed) pair inside a results directory.
pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.as_str()).join(format!("seed_{seed}"))
}

pub fn save_outcome(dir: &Path, outcome: &TrainOutcome, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LoocError::io(dir, e))?;
    let hash = config.hash()?;
    let echo = serde_json::json!({ "method": outcome.method, "seed": outcome.seed, "config_hash": hash });
    let ckpt = match &outcome.model {
        TrainedModel::Localizer(m) => localizer_checkpoint(m, None, None, None, echo),
        TrainedModel::Glance(m) => glance_checkpoint(m, echo),
    };
    ckpt.save(&dir.join(MODEL_FILE))?;
    if !outcome.pseudolabels.is_empty() {
        write_pseudolabels(&dir.join(LABELS_FILE), &outcome.pseudolabels)?;
    }
    let info = RunInfo {
        method: outcome.method,
        seed: outcome.seed,
        config_hash: hash,
    };
    let path = dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&info).map_err(|e| LoocError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| LoocError::io(&path, e))
}

pub fn load_outcome(dir: &Path) -> Result<TrainOutcome> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LoocError::io(&path, e))?;
    let info: RunInfo = serde_json::from_str(&text).map_err(|e| LoocError::json(&path, e))?;
    let ckpt = Checkpoint::load(&dir.join(MODEL_FILE))?;
    let model = match ckpt.header.kind {
        ModelKind::Localizer => TrainedModel::Localizer(restore_localizer(&ckpt)?.0),
        ModelKind::Glance => TrainedModel::Glance(restore_glance(&ckpt)?),
    };
    let labels = dir.join(LABELS_FILE);
    let pseudolabels = if labels.exists() { read_pseudolabels(&labels)? } else { Vec::new() };
    Ok(TrainOutcome {
        method: info.method,
        seed: info.seed,
        model,
        pseudolabels,
        curriculum: None,
    })
}

/// Every trained run under `out`, ordered by method then seed.
pub fn find_runs(out: &Path) -> Result<Vec<(Method, u64, PathBuf)>> {
    let mut found = BTreeMap::new();
    for method in Method::ALL {
        let mdir = out.join(method.as_str());
        if !mdir.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&mdir).map_err(|e| LoocError::io(&mdir, e))? {
            let entry = entry.map_err(|e| LoocError::io(&mdir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(seed) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) {
                if entry.path().join(RUN_FILE).exists() {
                    found.insert((method, seed), entry.path());
                }
            }
        }
    }
    Ok(found.into_iter().map(|((m, s), p)| (m, s, p)).collect())
}

/// Metrics and audits of a multi-method, multi-seed benchmark.
#[derive(Debug, Clone, Default)]
pub struct BenchmarkReport {
    pub metrics: Vec<MetricsRow>,
    pub audits: Vec<AuditRow>,
}

impl BenchmarkReport {
    /// Mean of a metrics column over seeds for one method.
    pub fn mean(&self, method: Method, column: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self
            .metrics
            .iter()
            .filter(|r| r.method == method.as_str())
            .filter_map(&column)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn mean_audit(&self, method: Method, level: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .audits
            .iter()
            .filter(|r| r.method == method.as_str())
            .map(|r| r.game[level])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Generates data, trains and evaluates every method for every seed in
/// `config.eval.seeds`. Rows are ordered by seed, then by `methods`.
pub fn run_benchmark(config: &ExperimentConfig, methods: &[Method], mode: ExecMode) -> Result<BenchmarkReport> {
    config.validate()?;
    let mut report = BenchmarkReport::default();
    for &seed in &config.eval.seeds {
        let (train, test) = generate_splits(config, seed, mode)?;
        let counts = train.counts_only();
        for &method in methods {
            let outcome = if method.is_count_supervised() {
                train_count_supervised(method, config, &counts, seed, mode, &RunOptions::default())?
            } else {
                train_point_supervised(config, &train, seed, mode)?
            };
            let result = evaluate(&outcome, config, &test, mode)?;
            log::info!("{method} seed {seed}: mae {:.3}", result.mae);
            report.metrics.push(MetricsRow::from(&result));
            if !outcome.pseudolabels.is_empty() {
                report.audits.push(audit(&outcome.pseudolabels, &train, method, seed)?);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("lcfcn".parse::<Method>().is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[curriculum]\nepochs_per_round = 2\n[eval]\nseeds = [5]\n").unwrap();
        assert_eq!(cfg.curriculum.epochs_per_round, 2);
        assert_eq!(cfg.eval.seeds, vec![5]);
        assert_eq!(cfg.dataset, DatasetSection::default());
    }

    #[test]
    fn malformed_configs_rejected() {
        for bad in [
            "[dataset]\nunknown_key = 1\n",
            "[nonsense]\n",
            "[curriculum]\nr0 = 0.0\n",
            "[localizer.net]\nin_channels = 3\n",
            "[eval]\nprob_threshold = 1.5\n",
            "this is not toml",
        ] {
            assert!(ExperimentConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn splits_differ_by_seed_and_split() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.train_scenes = 2;
        cfg.dataset.test_scenes = 2;
        let (a, b) = generate_splits(&cfg, 0, ExecMode::Sequential).unwrap();
        let (c, _) = generate_splits(&cfg, 1, ExecMode::Sequential).unwrap();
        assert_ne!(a.scenes[0].image, b.scenes[0].image);
        assert_ne!(a.scenes[0].image, c.scenes[0].image);
    }
}
