//! The localizer model and its training loop.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LoocError, Result};
use crate::exec::{self, ExecMode};
use crate::grid::{Grid, Image};

use super::nn::{NetConfig, UNet};
use super::optim::{Adam, OptimConfig};
use super::{lcfcn_loss_and_grad, sigmoid, Cpm, LossBreakdown, PseudoPointSet, RegionPartition};

/// Network shape and optimizer settings for the localizer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub net: NetConfig,
    pub optim: OptimConfig,
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerModel {
    pub net: UNet,
    pub params: Vec<f32>,
}

impl LocalizerModel {
    pub fn new(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let net = UNet::new(config)?;
        let params = net.init_params(rng);
        Ok(LocalizerModel { net, params })
    }

    pub fn logits(&self, image: &Image) -> Result<Grid<f32>> {
        self.net.check_input(image.channels, image.height, image.width)?;
        let z = self.net.forward(&self.params, &image.to_chw(), image.height, image.width);
        Ok(Grid::from_vec(image.height, image.width, z))
    }

    /// Class probability map; deterministic for fixed parameters.
    pub fn forward(&self, image: &Image) -> Result<Cpm> {
        let z = self.logits(image)?;
        Cpm::new(z.map(|&v| sigmoid(v as f64) as f32))
    }

    pub fn forward_batch(&self, images: &[&Image], mode: ExecMode) -> Result<Vec<Cpm>> {
        exec::try_map(mode, images, |img| self.forward(img))
    }
}

/// One training example: an image with its point labels and partition.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub input_chw: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub points: PseudoPointSet,
    pub partition: RegionPartition,
}

impl TrainSample {
    pub fn new(id: &str, image: &Image, points: PseudoPointSet, partition: RegionPartition) -> Self {
        TrainSample {
            id: id.to_string(),
            input_chw: image.to_chw(),
            channels: image.channels,
            height: image.height,
            width: image.width,
            points,
            partition,
        }
    }
}

/// Mutable training state: parameters live in the model, moments here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub optim: OptimConfig,
    pub adam: Adam,
}

impl TrainerState {
    pub fn new(optim: OptimConfig, n_params: usize) -> Self {
        TrainerState {
            optim,
            adam: Adam::new(n_params),
        }
    }
}

fn sample_grad(model: &LocalizerModel, s: &TrainSample) -> Result<(LossBreakdown, Vec<f32>)> {
    model.net.check_input(s.channels, s.height, s.width)?;
    let (logits, tape) = model.net.forward_train(&model.params, &s.input_chw, s.height, s.width);
    let z = Grid::from_vec(s.height, s.width, logits.iter().map(|&v| v as f64).collect());
    let (loss, dz) = lcfcn_loss_and_grad(&z, &s.points, &s.partition)?;
    let dz: Vec<f32> = dz.as_slice().iter().map(|&g| g as f32).collect();
    Ok((loss, model.net.backward(&model.params, &tape, dz)))
}

/// One Adam step on the mean loss of `batch`. Per-sample gradients may be
/// computed in parallel; they are summed in batch order.
pub fn train_step(
    model: &mut LocalizerModel,
    batch: &[&TrainSample],
    state: &mut TrainerState,
    mode: ExecMode,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(LoocError::Contract("empty batch".into()));
    }
    let results = exec::map(mode, batch, |s| sample_grad(model, s));
    let mut total = vec![0.0f32; model.params.len()];
    let mut loss = LossBreakdown::default();
    for r in results {
        let (l, g) = r?;
        loss.image += l.image;
        loss.point += l.point;
        loss.split += l.split;
        loss.false_positive += l.false_positive;
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v;
        }
    }
    let n = batch.len() as f64;
    loss.image /= n;
    loss.point /= n;
    loss.split /= n;
    loss.false_positive /= n;
    if !loss.total().is_finite() || total.iter().any(|g| !g.is_finite()) {
        return Err(LoocError::NonFiniteLoss {
            loss: loss.total(),
            batch_ids: batch.iter().map(|s| s.id.clone()).collect(),
        });
    }
    let inv = 1.0 / batch.len() as f32;
    total.iter_mut().for_each(|g| *g *= inv);
    state.adam.step(&state.optim, &mut model.params, &total);
    Ok(loss)
}

/// Runs one shuffled pass over `samples`; returns the mean step loss.
pub fn train_epoch(
    model: &mut LocalizerModel,
    samples: &[TrainSample],
    state: &mut TrainerState,
    rng: &mut ChaCha8Rng,
    mode: ExecMode,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut sum = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(state.optim.batch_size) {
        let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
        sum += train_step(model, &batch, state, mode)?.total();
        steps += 1;
    }
    Ok(if steps == 0 { 0.0 } else { sum / steps as f64 })
}
