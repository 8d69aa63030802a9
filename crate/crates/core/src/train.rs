//! Adam, the training loop, prediction and joint-accuracy evaluation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::autograd::Tape;
use crate::data::{collate, Batches, DataError, DatasetSplit, ImageCache, StudyRecord};
use crate::model::{DenseNetModel, ModelError, Param};
use crate::ops::{bce_with_logits, sigmoid_scalar};
use crate::preprocess::{Image2d, PreprocessConfig};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter {0} has no gradient")]
    IncompleteGradient(String),
    #[error("loss diverged to {loss} at epoch {epoch}, batch {batch}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
        /// Metrics of the epochs that completed before the divergence.
        log: MetricsLog,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("metrics file line {line}: {detail}")]
    Metrics { line: usize, detail: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every parameter, in the model's enumeration order.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Param<T>], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every parameter; gradients are cleared
    /// afterwards.
    pub fn step(&mut self, params: &mut [Param<T>]) -> Result<(), TrainError> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TrainError::IncompleteGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            for (((w, m), v), &g) in values.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let g = g.to_f64_lossy();
                let mn = beta1 * m.to_f64_lossy() + (1.0 - beta1) * g;
                let vn = beta2 * v.to_f64_lossy() + (1.0 - beta2) * g * g;
                *m = T::from_f64_lossy(mn);
                *v = T::from_f64_lossy(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub preprocess: PreprocessConfig,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            preprocess: PreprocessConfig::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be finite and non-negative, got {}", self.adam.lr)));
        }
        check_threshold(self.threshold)?;
        self.preprocess
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

fn check_threshold(threshold: f64) -> Result<(), TrainError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(TrainError::Config(format!("threshold must lie in (0, 1), got {threshold}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.val_accuracy)
    }
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for m in &self.epochs {
            let _ = writeln!(out, "{}", m.csv_row());
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            Some((_, h)) => {
                return Err(TrainError::Metrics {
                    line: 1,
                    detail: format!("expected header {METRICS_HEADER:?}, got {h:?}"),
                })
            }
            None => {
                return Err(TrainError::Metrics {
                    line: 1,
                    detail: "empty file".into(),
                })
            }
        }
        let mut epochs = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| TrainError::Metrics { line: line_no, detail };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [epoch, train, val, acc] = fields[..] else {
                return Err(bad(format!("expected 4 fields, got {}", fields.len())));
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}")));
            epochs.push(EpochMetrics {
                epoch: epoch.parse().map_err(|_| bad(format!("bad epoch {epoch:?}")))?,
                train_loss: num(train)?,
                val_loss: num(val)?,
                val_accuracy: num(acc)?,
            });
        }
        Ok(Self { epochs })
    }
}

/// Appends one row per epoch to a CSV file, flushing after each.
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            context: format!("writing {}", path.display()),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        writeln!(file, "{METRICS_HEADER}").map_err(io)?;
        file.sync_data().map_err(io)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            context: "appending metrics".into(),
            source,
        };
        writeln!(self.file, "{}", m.csv_row()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probabilities: [f64; 2],
    pub labels: [u8; 2],
}

impl Prediction {
    /// Sigmoid per logit; a label is 1 when its probability is ≥ `threshold`.
    pub fn from_logits(logits: [f64; 2], threshold: f64) -> Self {
        let probabilities = logits.map(sigmoid_scalar);
        Self {
            probabilities,
            labels: probabilities.map(|p| u8::from(p >= threshold)),
        }
    }
}

/// Eval-mode prediction for one preprocessed image.
pub fn predict(model: &DenseNetModel<f32>, image: &Image2d, threshold: f64) -> Result<Prediction, TrainError> {
    check_threshold(threshold)?;
    let batch = Tensor::new([1, 1, image.height, image.width], image.pixels.clone())?;
    let logits = model.forward_eval(batch)?;
    let d = logits.data();
    Ok(Prediction::from_logits([d[0] as f64, d[1] as f64], threshold))
}

/// Fraction of rows where both labels match.
pub fn joint_accuracy(predictions: &[[u8; 2]], labels: &[[u8; 2]]) -> Result<f64, TrainError> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(TensorError::Shape {
            op: "joint_accuracy",
            detail: format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        }
        .into());
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientResult {
    pub patient_id: String,
    pub probabilities: [f64; 2],
    pub predicted: [u8; 2],
    pub truth: [u8; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub patients: Vec<PatientResult>,
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,prob_covid,prob_severe,pred_covid,pred_severe,true_covid,true_severe\n");
        for p in &self.patients {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.patient_id, p.probabilities[0], p.probabilities[1], p.predicted[0], p.predicted[1], p.truth[0], p.truth[1]
            );
        }
        out
    }
}

/// Eval-mode loss and joint accuracy over `records`, in record order.
pub fn evaluate(
    model: &DenseNetModel<f32>,
    records: &[StudyRecord],
    preprocess: &PreprocessConfig,
    threshold: f64,
    batch_size: usize,
    cache: Option<&ImageCache>,
) -> Result<Evaluation, TrainError> {
    check_threshold(threshold)?;
    if records.is_empty() {
        return Err(TrainError::Config("nothing to evaluate".into()));
    }
    let mut loss_sum = 0.0;
    let mut patients = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&StudyRecord> = chunk.iter().collect();
        let batch = collate(&refs, preprocess, cache)?;
        let logits = model.forward_eval(batch.images)?;
        loss_sum += bce_with_logits(&logits.cast::<f64>(), &batch.labels.cast::<f64>())? * (2 * chunk.len()) as f64;
        for (r, row) in chunk.iter().zip(logits.data().chunks_exact(2)) {
            let p = Prediction::from_logits([row[0] as f64, row[1] as f64], threshold);
            patients.push(PatientResult {
                patient_id: r.patient_id.clone(),
                probabilities: p.probabilities,
                predicted: p.labels,
                truth: r.labels(),
            });
        }
    }
    let predicted: Vec<[u8; 2]> = patients.iter().map(|p| p.predicted).collect();
    let truth: Vec<[u8; 2]> = patients.iter().map(|p| p.truth).collect();
    Ok(Evaluation {
        loss: loss_sum / (2 * records.len()) as f64,
        accuracy: joint_accuracy(&predicted, &truth)?,
        patients,
    })
}

/// Trains for `config.epochs` epochs, validating after each.
///
/// `on_epoch` runs after every epoch with the fresh metrics; it is where
/// callers persist logs and checkpoints.
pub fn train<F>(
    model: &mut DenseNetModel<f32>,
    split: &DatasetSplit,
    config: &TrainConfig,
    cache: Option<&ImageCache>,
    mut on_epoch: F,
) -> Result<MetricsLog, TrainError>
where
    F: FnMut(&EpochMetrics, &DenseNetModel<f32>) -> Result<(), TrainError>,
{
    config.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(TrainError::Config("both train and validation sets must be nonempty".into()));
    }
    let mut adam = AdamState::new(model.params(), config.adam);
    let mut log = MetricsLog::default();
    for epoch in 1..=config.epochs {
        let batches = Batches::new(&split.train, config.batch_size, Some(config.seed), epoch, config.preprocess, cache)?;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let n = batch.patient_ids.len();
            let mut tape = Tape::new();
            let logits = model.forward_train(&mut tape, batch.images)?;
            let loss = tape.bce_with_logits(logits, batch.labels)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: value,
                    log,
                });
            }
            tape.backward(loss)?;
            model.accumulate_grads(&tape);
            adam.step(model.params_mut())?;
            loss_sum += value * n as f64;
            count += n;
        }
        let eval = evaluate(model, &split.validation, &config.preprocess, config.threshold, config.batch_size, cache)?;
        if !eval.loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: 0,
                loss: eval.loss,
                log,
            });
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / count as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
        };
        log.epochs.push(metrics);
        on_epoch(&metrics, model)?;
    }
    Ok(log)
}
