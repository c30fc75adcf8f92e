//! Plain SGD on the synthetic caption task. The encoder never trains.

use crate::error::{Error, Result};

use super::mllm::{Mllm, PatchCache, Trainable};
use super::task::SyntheticTask;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// 1: projector and decoder together. 2: projector only, then both.
    pub stages: u8,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 1,
            steps_stage1: 400,
            steps_stage2: 0,
            lr: 0.3,
            batch_size: 8,
            data_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stages) {
            return Err(Error::Config(format!("stages must be 1 or 2, got {}", self.stages)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps_stage1 + if self.stages == 2 { self.steps_stage2 } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    /// 1-based global step.
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
}

/// Trains `model` in place and returns the loss before each update.
pub fn train(model: &mut Mllm, cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    let mut task = SyntheticTask::new(model.config().patch_grid_side, cfg.data_seed);
    let mut cache = PatchCache::default();
    let schedule: Vec<(u8, Trainable)> = match cfg.stages {
        1 => vec![(1, Trainable::ProjectorAndDecoder); cfg.steps_stage1],
        _ => std::iter::repeat_n((1, Trainable::Projector), cfg.steps_stage1)
            .chain(std::iter::repeat_n((2, Trainable::ProjectorAndDecoder), cfg.steps_stage2))
            .collect(),
    };

    let mut history = Vec::with_capacity(schedule.len());
    for (i, (stage, trainable)) in schedule.into_iter().enumerate() {
        let mut patches = Vec::with_capacity(cfg.batch_size);
        let mut captions = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = task.sample();
            patches.push(cache.get(model, &s.image)?);
            captions.push(s.caption);
        }
        let batch: Vec<_> = patches.iter().zip(&captions).map(|(p, c)| (p, c.as_slice())).collect();
        let loss = sgd_step(model, &batch, trainable, cfg.lr)?;
        history.push(LossPoint {
            step: i + 1,
            stage,
            loss,
        });
    }
    Ok(history)
}

fn sgd_step(
    model: &mut Mllm,
    batch: &[(&crate::Tensor, &[usize])],
    trainable: Trainable,
    lr: f64,
) -> Result<f64> {
    let (mut g, loss) = model.loss_graph(batch, trainable)?;
    g.forward(model.params().bindings())?;
    let value = g.value(loss).expect("evaluated").data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let grads = g.backward(loss)?;
    let names: Vec<String> = grads.input_names().map(str::to_string).collect();
    for name in names {
        let grad = grads.input(&name).expect("listed gradient");
        let p = model.params_mut().get_mut(&name).expect("graph inputs are parameters");
        for (w, d) in p.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * d;
        }
    }
    Ok(value)
}

/// Fraction of `samples` fresh task images whose greedy caption is exact.
pub fn caption_accuracy(model: &Mllm, samples: usize, seed: u64) -> Result<f64> {
    let mut task = SyntheticTask::new(model.config().patch_grid_side, seed);
    let mut correct = 0;
    for _ in 0..samples {
        let s = task.sample();
        if model.greedy_caption(&s.image, s.caption.len() + 1)? == s.caption {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelConfig, ProjectorKind};

    #[test]
    fn encoder_is_frozen_and_stage1_leaves_decoder() {
        let mut model = Mllm::new(ModelConfig::default()).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            stages: 2,
            steps_stage1: 3,
            steps_stage2: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let hist = train(&mut model, &cfg).unwrap();
        assert_eq!(hist.len(), 3);
        for (name, t) in model.params().iter() {
            let changed = t != before.params().get(name).unwrap();
            let module = name.split('/').next().unwrap();
            match module {
                "encoder" | "decoder" => assert!(!changed, "{name} changed"),
                _ => {}
            }
        }
        assert!(model.params().module("projector").any(|(n, t)| t != before.params().get(n).unwrap()));
    }

    #[test]
    fn loss_decreases_on_short_run() {
        let mut model = Mllm::new(ModelConfig::default().with_projector(ProjectorKind::AdaptiveAvgPool, 4)).unwrap();
        let cfg = TrainConfig {
            steps_stage1: 60,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let hist = train(&mut model, &cfg).unwrap();
        let head: f64 = hist[..10].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        let tail: f64 = hist[50..].iter().map(|p| p.loss).sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            steps_stage1: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut a = Mllm::new(ModelConfig::default()).unwrap();
        let mut b = Mllm::new(ModelConfig::default()).unwrap();
        assert_eq!(train(&mut a, &cfg).unwrap(), train(&mut b, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut m = Mllm::new(ModelConfig::default()).unwrap();
        for cfg in [
            TrainConfig { stages: 3, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
        ] {
            assert!(train(&mut m, &cfg).is_err());
        }
    }
}
