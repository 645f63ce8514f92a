//! Training loop and pooled AUC evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::model::{KtModel, Mode};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the skill projection loss.
    pub lambda: f64,
    /// Evaluations without improvement before stopping; 0 disables early
    /// stopping.
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 2e-4,
            lambda: 1.0,
            patience: 10,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean knowledge tracing loss over valid training positions.
    pub train_kt: f64,
    /// Mean projection loss; absent when the term is disabled.
    pub train_projection: Option<f64>,
    pub eval_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Eval AUC of the returned (best) parameters.
    pub final_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    /// AUC at the last evaluated epoch, before restoring the best parameters.
    pub last_auc: Option<f64>,
    pub stopped_early: bool,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentResult {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

/// Per-epoch hook; receives the model after the epoch's updates.
pub trait EpochObserver<T> {
    fn on_epoch(&mut self, model: &KtModel<T>, adam: &AdamState<T>, metrics: &EpochMetrics) -> Result<()>;
}

impl<T> EpochObserver<T> for () {
    fn on_epoch(&mut self, _: &KtModel<T>, _: &AdamState<T>, _: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

/// Trains `model` in place. See [`train_observed`].
pub fn train<T: Real>(
    model: &mut KtModel<T>,
    train_batches: &[Batch],
    eval_batches: &[Batch],
    skill_table: Option<&EmbeddingTable>,
    config: &TrainConfig,
) -> Result<ExperimentResult> {
    train_observed(model, train_batches, eval_batches, skill_table, config, &mut ())
}

/// Mini-batch Adam on `L = L_k + λ·L_p`, evaluating pooled AUC every
/// `eval_every` epochs. The best-AUC parameters are restored before
/// returning. A non-finite loss or gradient aborts with
/// [`Error::NonFinite`]; no update is applied for the failing step, so
/// `model` keeps the last good parameters.
pub fn train_observed<T: Real>(
    model: &mut KtModel<T>,
    train_batches: &[Batch],
    eval_batches: &[Batch],
    skill_table: Option<&EmbeddingTable>,
    config: &TrainConfig,
    observer: &mut dyn EpochObserver<T>,
) -> Result<ExperimentResult> {
    config.validate()?;
    if train_batches.is_empty() {
        return Err(Error::InvalidArgument("no training batches".into()));
    }
    let table = if config.lambda > 0.0 {
        Some(skill_table.ok_or_else(|| Error::Config("lambda > 0 requires a skill embedding table".into()))?)
    } else {
        None
    };
    let started = Instant::now();
    let mut adam = AdamState::new(config.adam(), model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_batches.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut last_auc = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut dropout_seeds = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_seeds.set_stream(1);
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut kt_sum, mut proj_sum, mut weight) = (0.0, 0.0, 0.0);
        for &bi in &order {
            let batch = &train_batches[bi];
            let n_valid = batch.valid_count() as f64;
            step += 1;
            let (pass, losses) = model.loss(batch, table, config.lambda, Mode::Train, dropout_seeds.random())?;
            let total = pass.tape.value(losses.total).item()?;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, step {step}")));
            }
            let mut grads = pass.tape.backward(losses.total)?;
            let grads: Vec<Tensor<T>> = pass.params.iter().map(|&v| grads.take(v)).collect();
            adam_step(model.params_mut().tensors_mut(), &grads, &mut adam)?;

            kt_sum += pass.tape.value(losses.kt).item()?.to_f64_lossy() * n_valid;
            if let Some(lp) = losses.projection {
                proj_sum += pass.tape.value(lp).item()?.to_f64_lossy() * n_valid;
            }
            weight += n_valid;
        }
        let weight = weight.max(1.0);
        let mut metrics = EpochMetrics {
            epoch,
            train_kt: kt_sum / weight,
            train_projection: table.map(|_| proj_sum / weight),
            eval_auc: None,
        };

        if !eval_batches.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs) {
            let value = evaluate(model, eval_batches)?;
            metrics.eval_auc = Some(value);
            last_auc = Some(value);
            if best.as_ref().is_none_or(|(b, _, _)| value > *b) {
                best = Some((value, epoch, model.params().tensors().to_vec()));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "epoch {epoch}: L_k {:.5}{}{}",
            metrics.train_kt,
            metrics.train_projection.map(|v| format!(" L_p {v:.5}")).unwrap_or_default(),
            metrics.eval_auc.map(|v| format!(" AUC {v:.4}")).unwrap_or_default()
        );
        observer.on_epoch(model, &adam, &metrics)?;
        epochs.push(metrics);
        if config.patience > 0 && stale >= config.patience {
            stopped_early = true;
            break;
        }
    }

    let (final_auc, best_epoch) = match best {
        Some((value, epoch, params)) => {
            for (dst, src) in model.params_mut().tensors_mut().iter_mut().zip(params) {
                *dst = src;
            }
            (Some(value), Some(epoch))
        }
        None => (None, None),
    };
    Ok(ExperimentResult {
        config: config.clone(),
        seed: config.seed,
        epochs,
        final_auc,
        best_epoch,
        last_auc,
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Predicted probabilities and labels of every valid position, in batch
/// order, with dropout off.
pub fn pooled_predictions<T: Real>(model: &KtModel<T>, batches: &[Batch]) -> Result<(Vec<f64>, Vec<u8>)> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for batch in batches {
        let out = model.predict(batch)?;
        for ((p, &m), &r) in out.probs.iter().zip(&out.mask).zip(&out.labels) {
            if m {
                scores.push(p.to_f64_lossy());
                labels.push(r);
            }
        }
    }
    Ok((scores, labels))
}

/// One AUC over all valid positions of `batches`.
pub fn evaluate<T: Real>(model: &KtModel<T>, batches: &[Batch]) -> Result<f64> {
    let (scores, labels) = pooled_predictions(model, batches)?;
    auc(&scores, &labels)
}
