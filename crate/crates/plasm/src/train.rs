//! Binary-cross-entropy training with Adam.
//!
//! One step: seeded shuffle -> optional MixUp/CutMix -> recorded forward in
//! train mode -> BCE -> backward -> bias-corrected Adam update -> fold batch
//! statistics into the batch-norm running stats. `fit` tracks the best
//! validation accuracy (ties broken by lower validation loss), persists that
//! checkpoint, and never reads the test split.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use crate::augment::{augment_pipeline, AugmentConfig, AugmentedBatch};
use crate::data::{batch_from_samples, DatasetSplits, LabeledSample, SplitData};
use crate::error::{Error, Result};
use crate::model::{forward, forward_on_tape, ModelConfig, ModelParams, BN_MOMENTUM};
use crate::tensor::{ops, BnMode, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Parameter-name prefixes excluded from updates (e.g. "stage0", "stem").
    pub freeze_prefixes: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            freeze_prefixes: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in [0,1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates per parameter plus the shared step counter.
#[derive(Debug, Default, Clone)]
pub struct AdamState {
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// Mean binary cross entropy of probabilities against (possibly soft) labels.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    ops::bce(probs, labels)?.item()
}

/// One bias-corrected Adam step. `grads` must cover exactly the non-frozen
/// (requires-grad) parameters; frozen parameters stay bit-identical.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    let trainable = params.trainable_names();
    if grads.len() != trainable.len() {
        return Err(Error::InvalidInput(format!(
            "got {} gradients for {} trainable parameters",
            grads.len(),
            trainable.len()
        )));
    }

    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);

    for name in &trainable {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing gradient for {name:?}")))?;
        let param = params.get(name).expect("trainable name exists");
        if grad.shape() != param.shape() {
            return Err(Error::InvalidInput(format!(
                "gradient shape {:?} does not match parameter {name:?} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let mut m = state
            .m
            .remove(name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; grad.len()]);
        let mut v = state
            .v
            .remove(name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; grad.len()]);

        let mut updated = param.data().to_vec();
        for i in 0..grad.len() {
            let g = grad.data()[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            updated[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
        let shape = param.shape().to_vec();
        params.insert(
            name.clone(),
            Tensor::new(shape.clone(), updated)?.with_requires_grad(true),
        );
        state.m.insert(name.clone(), Tensor::new(shape.clone(), m)?);
        state.v.insert(name.clone(), Tensor::new(shape, v)?);
    }
    Ok(())
}

/// Per-epoch summary. `train_epoch` fills the training fields; `fit` fills the
/// validation fields afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

fn batch_accuracy(probs: &[f64], labels: &[f64]) -> usize {
    probs
        .iter()
        .zip(labels.iter())
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count()
}

/// One pass over the training split: seeded shuffle, per-batch augmentation,
/// forward/backward, Adam update, running-stat update.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut AdamState,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    augment: Option<&AugmentConfig>,
    train_split: &SplitData,
    epoch: usize,
) -> Result<EpochStats> {
    train_config.validate()?;
    let started = Instant::now();
    let samples = train_split.samples();
    if samples.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::stream(train_config.seed, &[0x73687566, epoch as u64]); // "shuf"
        order.shuffle(&mut rng);
    }

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for (batch_idx, chunk) in order.chunks(train_config.batch_size).enumerate() {
        let refs: Vec<&LabeledSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let (images, labels) = batch_from_samples(&refs)?;
        let mut batch = AugmentedBatch::new(images, labels)?;
        if let Some(aug) = augment {
            let mut rng =
                crate::rng::stream(aug.seed, &[0x617567, epoch as u64, batch_idx as u64]); // "aug"
            batch = augment_pipeline(&batch, aug, &mut rng)?;
        }

        let mut tape = Tape::new();
        let taped = forward_on_tape(&mut tape, params, model_config, &batch.images)?;
        let loss_node = tape.bce_loss(taped.probs, &batch.labels)?;
        let loss = tape.value(loss_node).item()?;
        let grads = tape.backward(loss_node)?;
        adam_step(params, &grads.into_map(), state, train_config)?;
        for (bn_name, stats) in &taped.bn_stats {
            params.update_running_stats(bn_name, stats, BN_MOMENTUM)?;
        }

        let probs = tape.value(taped.probs);
        correct += batch_accuracy(probs.data(), batch.labels.data());
        total_loss += loss * chunk.len() as f64;
    }

    Ok(EpochStats {
        epoch,
        train_loss: total_loss / samples.len() as f64,
        train_accuracy: correct as f64 / samples.len() as f64,
        val_loss: 0.0,
        val_accuracy: 0.0,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Eval-mode loss, accuracy, and per-sample probabilities over `samples`
/// (taken in order, no augmentation).
pub fn evaluate(
    params: &ModelParams,
    model_config: &ModelConfig,
    samples: &[LabeledSample],
    batch_size: usize,
) -> Result<(f64, f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut all_probs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let (images, labels) = batch_from_samples(&refs)?;
        let probs = forward(params, model_config, &images, BnMode::Eval)?;
        total_loss += bce_loss(&probs, &labels)? * chunk.len() as f64;
        correct += batch_accuracy(probs.data(), labels.data());
        all_probs.extend_from_slice(probs.data());
    }
    Ok((
        total_loss / samples.len() as f64,
        correct as f64 / samples.len() as f64,
        all_probs,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Default)]
pub struct FitResult {
    pub stats: Vec<EpochStats>,
    pub best: Option<BestEpoch>,
}

/// Run the full training loop. The best-validation checkpoint (accuracy, ties
/// by lower loss) is written to `checkpoint_path` whenever it improves. The
/// test split is never read.
pub fn fit(
    params: &mut ModelParams,
    model_config: &ModelConfig,
    splits: &DatasetSplits,
    train_config: &TrainConfig,
    augment: Option<&AugmentConfig>,
    checkpoint_path: Option<&Path>,
) -> Result<FitResult> {
    train_config.validate()?;
    if train_config.epochs > 0 && (splits.train.len() == 0 || splits.validation.len() == 0) {
        return Err(Error::InvalidInput(
            "fit needs non-empty train and validation splits".into(),
        ));
    }
    params.freeze_prefixes(&train_config.freeze_prefixes);

    let mut state = AdamState::new();
    let mut result = FitResult::default();
    for epoch in 0..train_config.epochs {
        let mut stats = train_epoch(
            params,
            &mut state,
            model_config,
            train_config,
            augment,
            &splits.train,
            epoch,
        )?;
        let (val_loss, val_accuracy, _) = evaluate(
            params,
            model_config,
            splits.validation.samples(),
            train_config.batch_size,
        )?;
        stats.val_loss = val_loss;
        stats.val_accuracy = val_accuracy;

        let improved = match result.best {
            None => true,
            Some(best) => {
                val_accuracy > best.val_accuracy
                    || (val_accuracy == best.val_accuracy && val_loss < best.val_loss)
            }
        };
        if improved {
            result.best = Some(BestEpoch {
                epoch,
                val_accuracy,
                val_loss,
            });
            if let Some(path) = checkpoint_path {
                crate::model::checkpoint::save_checkpoint(params, model_config, path)?;
            }
        }
        result.stats.push(stats);
    }
    Ok(result)
}

/// Tab-separated epoch log: `epoch loss train_acc val_loss val_acc seconds`.
pub fn format_epoch_log(stats: &[EpochStats]) -> String {
    let mut out = String::new();
    for s in stats {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
            s.epoch, s.train_loss, s.train_accuracy, s.val_loss, s.val_accuracy, s.seconds
        ));
    }
    out
}

pub fn write_epoch_log(path: &Path, stats: &[EpochStats]) -> Result<()> {
    std::fs::write(path, format_epoch_log(stats)).map_err(|e| Error::io(path, e))
}
