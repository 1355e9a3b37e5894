//! Count regression baseline: pooled convolutional features and a linear
//! head trained with squared error against the count label. It has no
//! notion of object location.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::CountsOnlySplit;
use crate::error::{LoocError, Result};
use crate::exec::{self, ExecMode};
use crate::grid::Image;

use super::nn::{GlanceNet, NetConfig};
use super::optim::{Adam, OptimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct GlanceModel {
    pub net: GlanceNet,
    pub params: Vec<f32>,
}

/// A count prediction: the raw regression output and the clamped, rounded
/// value used for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    pub raw: f64,
    pub reported: f64,
}

impl CountPrediction {
    pub fn from_raw(raw: f64) -> Self {
        CountPrediction {
            raw,
            reported: raw.max(0.0).round(),
        }
    }
}

impl GlanceModel {
    pub fn new(config: NetConfig, rng: &mut ChaCha8Rng, initial_bias: f32) -> Result<Self> {
        let net = GlanceNet::new(config)?;
        let params = net.init_params(rng, initial_bias);
        Ok(GlanceModel { net, params })
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.channels != self.net.config.in_channels {
            return Err(LoocError::Contract(format!(
                "glance expects {} channels, got {}",
                self.net.config.in_channels, image.channels
            )));
        }
        let min = self.net.config.min_side();
        if image.height < min || image.width < min {
            return Err(LoocError::Contract(format!("input smaller than {min}x{min}")));
        }
        Ok(())
    }

    /// Raw scalar regression output.
    pub fn glance_forward(&self, image: &Image) -> Result<f64> {
        self.check(image)?;
        Ok(self.net.forward(&self.params, &image.to_chw(), image.height, image.width) as f64)
    }

    pub fn predict(&self, image: &Image) -> Result<CountPrediction> {
        self.glance_forward(image).map(CountPrediction::from_raw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlanceConfig {
    pub net: NetConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
}

impl Default for GlanceConfig {
    fn default() -> Self {
        GlanceConfig {
            net: NetConfig::default(),
            optim: OptimConfig::default(),
            epochs: 60,
        }
    }
}

/// Trains the regressor on counts only. Returns the model and the mean
/// squared error of each epoch.
pub fn train_glance(
    data: &CountsOnlySplit,
    config: &GlanceConfig,
    rng: &mut ChaCha8Rng,
    mode: ExecMode,
) -> Result<(GlanceModel, Vec<f64>)> {
    config.optim.validate()?;
    if data.is_empty() {
        return Err(LoocError::Contract("cannot train on an empty split".into()));
    }
    let mean = data.scenes.iter().map(|s| s.count as f64).sum::<f64>() / data.len() as f64;
    let mut model = GlanceModel::new(config.net.clone(), rng, mean as f32)?;
    for s in &data.scenes {
        model.check(&s.image)?;
    }
    let inputs: Vec<(Vec<f32>, usize, usize, f32, &str)> = data
        .scenes
        .iter()
        .map(|s| (s.image.to_chw(), s.image.height, s.image.width, s.count as f32, s.scene_id.as_str()))
        .collect();
    let mut adam = Adam::new(model.params.len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.optim.batch_size) {
            let per = exec::map(mode, chunk, |&i| {
                let (x, h, w, target, _) = &inputs[i];
                let (y, tape) = model.net.forward_train(&model.params, x, *h, *w);
                let err = y - target;
                (err as f64 * err as f64, model.net.backward(&model.params, &tape, 2.0 * err))
            });
            let mut grad = vec![0.0f32; model.params.len()];
            let mut loss = 0.0;
            for (l, g) in per {
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let n = chunk.len() as f32;
            grad.iter_mut().for_each(|g| *g /= n);
            if !loss.is_finite() {
                return Err(LoocError::NonFiniteLoss {
                    loss,
                    batch_ids: chunk.iter().map(|&i| inputs[i].4.to_string()).collect(),
                });
            }
            adam.step(&config.optim, &mut model.params, &grad);
            epoch_loss += loss;
        }
        history.push(epoch_loss / inputs.len() as f64);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn untrained_output_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = GlanceModel::new(NetConfig::default(), &mut rng, 0.0).unwrap();
        let img = crate::dataset::generate_scene(&Default::default(), 0).unwrap().image;
        assert!(m.glance_forward(&img).unwrap().is_finite());
    }

    #[test]
    fn clamps_negative_predictions() {
        let p = CountPrediction::from_raw(-0.3);
        assert_eq!(p.reported, 0.0);
        assert_eq!(p.raw, -0.3);
        assert_eq!(CountPrediction::from_raw(4.6).reported, 5.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = GlanceModel::new(NetConfig::default(), &mut rng, 0.0).unwrap();
        assert!(m.glance_forward(&Image::new(64, 64, 3)).is_err());
    }
}
