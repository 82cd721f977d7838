//! Training and evaluation loops.
//!
//! [`TrainSession`] owns a model, its optimizer state and the loss history,
//! and advances one epoch per call so a caller can checkpoint between
//! epochs. Every source of randomness is derived from the run seed:
//! the model is initialized from it and the epoch `e` shuffle uses
//! ChaCha8 stream `e` of it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelSpec};
use crate::objectives::{self, LossConfig, MetricsRecord};
use crate::optim::{step_decay, AmsGrad, OptimizerState};
use crate::synth::SegmentationSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between halvings of the step size.
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub folds: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            decay_every: 30,
            batch_size: 4,
            epochs: 90,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            folds: 5,
            runs: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0) {
            return Err(Error::Config("beta1 and beta2 must be below 1".into()));
        }
        let counts = [
            ("decay_every", self.decay_every),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("folds", self.folds),
            ("runs", self.runs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.loss.validate()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        step_decay(self.lr0, self.decay_every, epoch)
    }

    pub fn optimizer(&self) -> AmsGrad {
        AmsGrad {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Training and held-out indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Holds out fold `test_fold` and trains on the union of the others.
    pub fn from_folds(folds: &[Vec<usize>], test_fold: usize) -> Result<Split> {
        if test_fold >= folds.len() {
            return Err(Error::Config(format!(
                "test fold {test_fold} out of range for {} folds",
                folds.len()
            )));
        }
        let mut train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != test_fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        let split = Split {
            train,
            test: folds[test_fold].clone(),
        };
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        match self.test.iter().find(|i| self.train.contains(i)) {
            Some(i) => Err(Error::Config(format!("sample {i} is in both the training and held-out sets"))),
            None => Ok(()),
        }
    }
}

/// Permutation of `train` used in `epoch`; a pure function of its inputs.
pub fn epoch_order(train: &[usize], run_seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(epoch as u64);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

/// Stacks per-sample `(1, H, W)` images into `(N, 1, H, W)` batches.
pub struct Batch {
    pub master: Tensor,
    pub assistant: Tensor,
    pub label: Tensor,
}

pub fn make_batch(data: &[SegmentationSample], indices: &[usize]) -> Result<Batch> {
    let pick = |f: fn(&SegmentationSample) -> &Tensor| -> Result<Tensor> {
        let items: Vec<&Tensor> = indices
            .iter()
            .map(|&i| data.get(i).map(f).ok_or(Error::shape("batch", format!("index {i} out of range"))))
            .collect::<Result<_>>()?;
        Tensor::stack(&items)
    };
    Ok(Batch {
        master: pick(|s| &s.master)?,
        assistant: pick(|s| &s.assistant)?,
        label: pick(|s| &s.label)?,
    })
}

/// Probability maps for a batch, `(N, 1, H, W)`.
pub fn predict_batch(model: &Model, batch: &Batch) -> Result<Tensor> {
    let assistant = model.spec().variant.uses_assistant().then_some(&batch.assistant);
    Ok(model.predict(&batch.master, assistant)?.0)
}

/// Per-image metrics on `indices`, in order, evaluated `batch_size` at a time.
pub fn evaluate(
    model: &Model,
    data: &[SegmentationSample],
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<(String, MetricsRecord)>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch(data, chunk)?;
        let prob = predict_batch(model, &batch)?;
        for (k, &i) in chunk.iter().enumerate() {
            let pred = objectives::binarize(&prob.index_first(k)?, 0.5);
            let label = batch.label.index_first(k)?;
            out.push((data[i].sample_id.clone(), objectives::compute_metrics(&pred, &label)?));
        }
    }
    Ok(out)
}

fn mean_dice(model: &Model, data: &[SegmentationSample], indices: &[usize], batch_size: usize) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch(data, chunk)?;
        let prob = predict_batch(model, &batch)?;
        for k in 0..chunk.len() {
            let pred = objectives::binarize(&prob.index_first(k)?, 0.5);
            total += objectives::overlap_metrics(&pred, &batch.label.index_first(k)?)?.0;
        }
    }
    Ok(total / indices.len() as f64)
}

/// A model being trained together with everything needed to resume it.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub run_seed: u64,
    /// Next epoch to run, 0-based.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainSession {
    pub fn new(spec: &ModelSpec, config: TrainConfig, run_seed: u64) -> Result<Self> {
        config.validate()?;
        let model = Model::build(spec, run_seed)?;
        let optimizer = OptimizerState::new(model.params());
        Ok(TrainSession {
            model,
            optimizer,
            config,
            run_seed,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimizer step on `indices`; returns the batch loss.
    pub fn train_batch(&mut self, data: &[SegmentationSample], indices: &[usize]) -> Result<f64> {
        let batch = make_batch(data, indices)?;
        let uses_assistant = self.model.spec().variant.uses_assistant();
        let (loss, grads) = {
            let mut g = Graph::new();
            let m = g.input(batch.master);
            let a = uses_assistant.then(|| g.input(batch.assistant));
            let out = self.model.forward(&mut g, m, a)?;
            let loss = objectives::combined_loss(&mut g, out.prob, &batch.label, &self.config.loss)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss became {value} in epoch {}", self.epoch)));
            }
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = out
                .params
                .iter()
                .map(|&p| {
                    let len = g.value(p).len();
                    g.take_grad(p).unwrap_or_else(|| vec![0.0; len])
                })
                .collect();
            (value, grads)
        };
        let lr = self.config.lr_at_epoch(self.epoch);
        let opt = self.config.optimizer();
        self.optimizer
            .step(&opt, self.model.params_mut(), &grads, lr)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {}: {m}", self.epoch)),
                other => other,
            })?;
        Ok(loss)
    }

    /// Trains one epoch on `split.train` and scores `split.test`.
    pub fn run_epoch(&mut self, data: &[SegmentationSample], split: &Split) -> Result<EpochRecord> {
        split.check_disjoint()?;
        if split.train.is_empty() {
            return Err(Error::Empty { op: "train_run" });
        }
        let order = epoch_order(&split.train, self.run_seed, self.epoch);
        let mut weighted = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            weighted += self.train_batch(data, chunk)? * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: weighted / order.len() as f64,
            val_dice: mean_dice(&self.model, data, &split.test, self.config.batch_size)?,
        };
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }
}

pub struct RunResult {
    pub model: Model,
    pub metrics: Vec<(String, MetricsRecord)>,
    pub history: Vec<EpochRecord>,
}

/// Full training run on `split`, then per-image metrics on the held-out set.
pub fn train_run(
    spec: &ModelSpec,
    data: &[SegmentationSample],
    split: &Split,
    config: &TrainConfig,
    run_seed: u64,
) -> Result<RunResult> {
    if data.is_empty() {
        return Err(Error::Empty { op: "train_run" });
    }
    let mut session = TrainSession::new(spec, config.clone(), run_seed)?;
    while !session.finished() {
        session.run_epoch(data, split)?;
    }
    let metrics = evaluate(&session.model, data, &split.test, config.batch_size)?;
    Ok(RunResult {
        model: session.model,
        metrics,
        history: session.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_excludes_test_fold() {
        let folds = alloc::vec![alloc::vec![0, 3], alloc::vec![1, 4], alloc::vec![2]];
        let s = Split::from_folds(&folds, 1).unwrap();
        assert_eq!(s.train, [0, 2, 3]);
        assert_eq!(s.test, [1, 4]);
        assert!(Split::from_folds(&folds, 3).is_err());
        let overlapping = Split { train: alloc::vec![1, 2], test: alloc::vec![2] };
        assert!(overlapping.check_disjoint().is_err());
    }

    #[test]
    fn epoch_order_is_pure_and_varies_by_epoch() {
        let train: Vec<usize> = (0..40).collect();
        assert_eq!(epoch_order(&train, 5, 3), epoch_order(&train, 5, 3));
        assert_ne!(epoch_order(&train, 5, 3), epoch_order(&train, 5, 4));
        let mut sorted = epoch_order(&train, 5, 3);
        sorted.sort_unstable();
        assert_eq!(sorted, train);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr0: -1.0, ..Default::default() }.validate().is_err());
    }
}
