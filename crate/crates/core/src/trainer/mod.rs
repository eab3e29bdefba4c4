//! Multi-head cross-entropy training with AdamW and a OneCycle schedule.

mod adamw;
mod schedule;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adamw::{AdamW, AdamWConfig};
pub use schedule::{OneCycle, FINAL_DIV, START_DIV};

use crate::corpus::{DatasetSplit, Sample};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{ForwardOutput, Layout, Model, ModelConfig, ModelError};
use crate::schema::SlotName;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::tokenizer::{Encoding, TokenizerModel};

// Dropout draws come from a stream separate from the shuffle stream.
const DROPOUT_STREAM: u64 = 0x5eed_d20f;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("training split is empty")]
    EmptyTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("history I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub max_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            max_lr: 2e-4,
            epochs: 15,
            weight_decay: 0.01,
            warmup_fraction: 0.10,
            seed: 42,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// Short-budget settings for the reduced model: 5 epochs with smaller
    /// batches and a higher peak rate, so the run takes enough steps.
    pub fn desk() -> Self {
        TrainConfig {
            batch: 16,
            max_lr: 1e-3,
            epochs: 5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(TrainError::InvalidConfig("batch and epochs must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::InvalidConfig(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_size: usize) -> usize {
        train_size.div_ceil(self.batch)
    }

    /// `ceil(train_size / batch) * epochs`; the last short batch counts.
    pub fn total_steps(&self, train_size: usize) -> usize {
        self.steps_per_epoch(train_size) * self.epochs
    }

    pub fn schedule(&self, train_size: usize) -> Result<OneCycle, TrainError> {
        OneCycle::new(self.max_lr, self.total_steps(train_size), self.warmup_fraction)
    }
}

/// Records the unweighted mean over slots of the per-slot mean
/// cross-entropy. `labels[b][s]` is the gold index of slot `s` in row `b`.
pub fn multi_head_loss_on_tape(tape: &mut Tape<'_>, logits: &[Var], labels: &[[usize; 9]]) -> Result<Var, TrainError> {
    if logits.len() != SlotName::COUNT {
        return Err(TrainError::Shape(format!("{} logit groups, expected 9", logits.len())));
    }
    let mut per_slot = Vec::with_capacity(SlotName::COUNT);
    for (s, &l) in logits.iter().enumerate() {
        let targets: Vec<usize> = labels.iter().map(|row| row[s]).collect();
        per_slot.push(tape.cross_entropy(l, &targets)?);
    }
    Ok(tape.mean(&per_slot)?)
}

/// Value of [`multi_head_loss_on_tape`] for already computed logits.
pub fn multi_head_loss(output: &ForwardOutput, labels: &[[usize; 9]]) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = output.logits.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = multi_head_loss_on_tape(&mut tape, &vars, labels)?;
    Ok(tape.value(loss).data()[0] as f64)
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = (max_norm / (norm + 1e-12)) as f32;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// A model with its optimizer state and dropout stream.
pub struct Trainer {
    model: Model,
    optimizer: AdamW,
    config: TrainConfig,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let decays = model.specs().iter().map(|s| s.kind.decays()).collect();
        let optimizer = AdamW::new(adam, model.params(), decays)?;
        let dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DROPOUT_STREAM);
        Ok(Trainer {
            model,
            optimizer,
            config,
            dropout_rng,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Loss and raw parameter gradients for one batch, with dropout.
    pub fn gradients(
        &mut self,
        batch: &[Encoding],
        labels: &[[usize; 9]],
    ) -> Result<(f64, Vec<Tensor>), TrainError> {
        let mut tape = Tape::new();
        let fwd = self
            .model
            .forward_on_tape(&mut tape, batch, Layout::Trimmed, Some(&mut self.dropout_rng))?;
        let loss = multi_head_loss_on_tape(&mut tape, &fwd.logits, labels)?;
        let value = tape.value(loss).data()[0] as f64;
        tape.backward(loss)?;
        let grads = fwd.params.iter().map(|&p| tape.take_grad(p)).collect();
        Ok((value, grads))
    }

    /// Forward, backward, clip and one AdamW update at learning rate `lr`.
    pub fn step(&mut self, batch: &[Encoding], labels: &[[usize; 9]], lr: f64) -> Result<StepStats, TrainError> {
        let step = self.optimizer.steps() as usize;
        let (loss, mut grads) = self.gradients(batch, labels)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::Diverged { step, loss: grad_norm });
        }
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        Ok(StepStats { loss, grad_norm })
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub accuracies: [f64; 9],
    pub average: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
    /// Training loss at every optimizer step.
    pub loss_trace: Vec<f64>,
}

impl TrainHistory {
    /// Writes one JSON record per epoch.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.epochs {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub final_model: Model,
    /// Model after the epoch with the highest validation average.
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_report: EvalReport,
    pub history: TrainHistory,
    pub steps: usize,
}

fn encode_split(samples: &[Sample], tokenizer: &TokenizerModel, max_len: usize) -> (Vec<Encoding>, Vec<[usize; 9]>) {
    samples
        .iter()
        .map(|s| (tokenizer.encode(&s.text, max_len), s.labels.indices()))
        .unzip()
}

/// Trains a freshly initialized model (seeded by `train_config.seed`) on
/// `data.train`, evaluating on `data.val` after every epoch. `on_epoch` sees
/// each record as soon as it is complete.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &DatasetSplit,
    tokenizer: &TokenizerModel,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    train_config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if data.val.is_empty() {
        return Err(EvalError::Empty.into());
    }
    if tokenizer.vocab_size() > model_config.vocab {
        return Err(ModelError::VocabMismatch {
            tokenizer: tokenizer.vocab_size(),
            model: model_config.vocab,
        }
        .into());
    }
    let model = Model::init(model_config.clone(), train_config.seed)?;
    let (encodings, labels) = encode_split(&data.train, tokenizer, model_config.max_len);
    let schedule = train_config.schedule(encodings.len())?;
    let mut trainer = Trainer::new(model, train_config.clone())?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..encodings.len()).collect();
    let mut best: Option<(usize, Model, EvalReport)> = None;
    let mut step = 0;
    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(train_config.batch) {
            let batch: Vec<Encoding> = chunk.iter().map(|&i| encodings[i].clone()).collect();
            let batch_labels: Vec<[usize; 9]> = chunk.iter().map(|&i| labels[i]).collect();
            lr = schedule.lr(step)?;
            let stats = trainer.step(&batch, &batch_labels, lr)?;
            history.lr_trace.push(lr);
            history.loss_trace.push(stats.loss);
            loss_sum += stats.loss;
            batches += 1;
            step += 1;
        }
        let report = evaluate(trainer.model(), tokenizer, &data.val)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            lr,
            accuracies: report.accuracies,
            average: report.average,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val average {:.4}, condition {:.4}",
            record.loss,
            record.average,
            report.accuracy(SlotName::Condition)
        );
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(_, _, r)| report.average > r.average) {
            best = Some((epoch, trainer.model().clone(), report));
        }
    }
    let (best_epoch, best_model, best_report) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_model: trainer.into_model(),
        best_model,
        best_epoch,
        best_report,
        history,
        steps: step,
    })
}
