use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::analysis::{overfit_gap, OVERFIT_GAP_THRESHOLD};
use super::eval::{argmax, evaluate, ModelPredictor};
use super::prepare::{prepare_samples, to_batch, KnowledgeContext, PreparedSample};
use super::PipelineError;
use crate::models::{forward_batch, ModelConfig, ModelError, ModelParams};
use crate::synthvqa::{Dataset, Split};
use crate::tensorcore::{Tape, Tensor, TensorError};

/// Random stream for batch order; parameter init uses the seed directly.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Validation runs every `eval_every` epochs and after the last one.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            seed,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        // lr 0 is allowed: it leaves the parameters untouched.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be a non-negative number");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad("adam needs 0 <= beta < 1 and eps > 0");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean loss over the epoch's steps, weighted by batch size.
    pub train_loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub overfit_gap: f64,
    pub overfit_flag: bool,
    /// Seconds spent on the epoch. Kept out of the report file so that
    /// reruns produce identical bytes.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub param_count: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_train_accuracy: f64,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    /// Epochs whose train/val gap exceeded the overfitting threshold.
    pub overfit_epochs: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub reports: Vec<EpochReport>,
    pub summary: TrainSummary,
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, params: &ModelParams<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn apply(&mut self, params: &mut ModelParams<f32>, grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        let lr = self.lr as f32;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            match self.kind {
                Optimizer::Sgd => {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (beta1 as f32, beta2 as f32);
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    let step_size = (self.lr / c1) as f32;
                    let c2_sqrt = c2.sqrt() as f32;
                    let eps = eps as f32;
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = b1 * *m + (1.0 - b1) * d;
                        *v = b2 * *v + (1.0 - b2) * d * d;
                        *w -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
                    }
                }
            }
        }
    }
}

fn non_finite(epoch: usize, batch: usize) -> impl Fn(ModelError) -> PipelineError {
    move |e| match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => PipelineError::NonFinite {
            epoch,
            batch,
            detail: format!("{op} produced a non-finite value"),
        },
        other => PipelineError::Model(other),
    }
}

/// Prepares `data` with `ctx` and trains on its train split, validating on
/// its val split.
pub fn train(
    model_cfg: &ModelConfig,
    data: &Dataset,
    ctx: &KnowledgeContext,
    cfg: &TrainConfig,
    on_report: impl FnMut(&EpochReport),
) -> Result<TrainOutcome, PipelineError> {
    if data.answers.len() != model_cfg.answer_vocab_size {
        return Err(PipelineError::VocabularyMismatch {
            dataset: data.answers.len(),
            model: model_cfg.answer_vocab_size,
        });
    }
    let prepared = prepare_samples(data, ctx)?;
    let train: Vec<&PreparedSample> = prepared.iter().filter(|s| s.split == Split::Train).collect();
    let val: Vec<&PreparedSample> = prepared.iter().filter(|s| s.split == Split::Val).collect();
    train_prepared(model_cfg, &train, &val, cfg, None, on_report)
}

/// Training loop over already-prepared samples. `init` overrides the seeded
/// initialization.
pub fn train_prepared(
    model_cfg: &ModelConfig,
    train: &[&PreparedSample],
    val: &[&PreparedSample],
    cfg: &TrainConfig,
    init: Option<ModelParams<f32>>,
    mut on_report: impl FnMut(&EpochReport),
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::Empty("train on"));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.target >= model_cfg.answer_vocab_size) {
        return Err(PipelineError::VocabularyMismatch {
            dataset: s.target + 1,
            model: model_cfg.answer_vocab_size,
        });
    }
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::<f32>::init(model_cfg, cfg.seed)?,
    };
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut reports = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = non_finite(epoch, b);
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| train[i]).collect();
            let targets: Vec<usize> = samples.iter().map(|s| s.target).collect();
            let batch = to_batch(&samples)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape).map_err(ModelError::from).map_err(&wrap)?;
            let fwd = forward_batch(&mut tape, &bound, model_cfg, &batch).map_err(&wrap)?;
            let loss = tape
                .cross_entropy(fwd.logits, &targets)
                .map_err(ModelError::from)
                .map_err(&wrap)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(wrap(ModelError::Tensor(TensorError::NonFinite { op: "loss" })));
            }
            let logits = tape.value(fwd.logits);
            correct += (0..logits.rows())
                .filter(|&r| argmax(logits.row(r)) == targets[r])
                .count();
            loss_sum += loss_value * samples.len() as f64;
            let mut grads = tape.backward(loss).map_err(ModelError::from).map_err(&wrap)?;
            let grads: Vec<Option<Tensor<f32>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
            opt.apply(&mut params, &grads);
            if !params.is_finite() {
                return Err(wrap(ModelError::Tensor(TensorError::NonFinite { op: "optimizer step" })));
            }
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let val_accuracy = if val.is_empty() {
                0.0
            } else {
                let last_batch = train.len().div_ceil(cfg.batch_size).saturating_sub(1);
                match evaluate(&ModelPredictor::new(&params, model_cfg), val) {
                    Ok(r) => r.accuracy,
                    Err(PipelineError::Model(ModelError::Tensor(TensorError::NonFinite { op }))) => {
                        return Err(PipelineError::NonFinite {
                            epoch,
                            batch: last_batch,
                            detail: format!("validation: {op} produced a non-finite value"),
                        })
                    }
                    Err(e) => return Err(e),
                }
            };
            let train_accuracy = correct as f64 / train.len() as f64;
            let gap = overfit_gap(train_accuracy, val_accuracy);
            let report = EpochReport {
                epoch,
                train_loss: loss_sum / train.len() as f64,
                train_accuracy,
                val_accuracy,
                overfit_gap: gap,
                overfit_flag: gap > OVERFIT_GAP_THRESHOLD,
                wall_time: started.elapsed().as_secs_f64(),
            };
            on_report(&report);
            reports.push(report);
        }
    }

    let last = reports.last().expect("the final epoch always reports");
    let (best_epoch, best_val_accuracy) = reports
        .iter()
        .fold((0, f64::NEG_INFINITY), |(e, a), r| if r.val_accuracy > a { (r.epoch, r.val_accuracy) } else { (e, a) });
    let summary = TrainSummary {
        model: model_cfg.clone(),
        train: cfg.clone(),
        param_count: params.scalar_count(),
        train_samples: train.len(),
        val_samples: val.len(),
        epochs_run: cfg.epochs,
        final_train_loss: last.train_loss,
        final_train_accuracy: last.train_accuracy,
        final_val_accuracy: last.val_accuracy,
        best_val_accuracy,
        best_epoch,
        overfit_epochs: reports.iter().filter(|r| r.overfit_flag).map(|r| r.epoch).collect(),
    };
    Ok(TrainOutcome {
        params,
        reports,
        summary,
    })
}

/// One JSON object per line.
pub fn write_reports(path: impl AsRef<Path>, reports: &[EpochReport]) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EpochReport>, PipelineError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
