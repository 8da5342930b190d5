//! Mini-batch training loop shared by plain training, distillation and
//! pruning fine-tunes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::netlib::{ForwardPass, Mode, Model};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::synthdata::LabeledImages;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Stop once this many epochs pass without a new best validation accuracy.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(1e-3),
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2 (batch norm needs two samples)"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Zero-based index of the epoch whose weights were kept; `None` when no
    /// epoch ran.
    pub best_epoch: Option<usize>,
    pub stop_reason: StopReason,
}

/// Per-batch loss builder: receives the tape, the forward pass, the input
/// batch and its labels, and returns a scalar loss node.
pub type LossFn<'a> = dyn FnMut(&mut Tape<f32>, &ForwardPass, &Tensor<f32>, &[usize]) -> Result<Var> + 'a;

/// One pass over `data` in shuffled mini-batches. A trailing batch of a
/// single sample is skipped. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut Model,
    data: &LabeledImages,
    opt: &mut OptimizerState<f32>,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
    loss_fn: &mut LossFn<'_>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    model.set_mode(Mode::Train);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for idx in order.chunks(batch_size) {
        if idx.len() < 2 {
            continue;
        }
        let x = data.batch(idx);
        let labels = data.labels_of(idx);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let pass = model.forward(&mut tape, xv, Some(rng), true)?;
        let loss = loss_fn(&mut tape, &pass, &x, &labels)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        tape.backward(loss)?;
        model.apply_step(&tape, &pass, opt)?;
        model.update_running_stats(&pass.bn_stats);
        total += value;
        batches += 1;
    }
    model.set_mode(Mode::Eval);
    if batches == 0 {
        return Err(Error::Dataset("no batch with at least two samples".into()));
    }
    Ok(total / batches as f64)
}

/// Top-1 accuracy in eval mode.
pub fn accuracy(model: &Model, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(128) {
        let logits = eval.forward_logits(&data.batch(chunk), None)?;
        let classes = logits.shape()[1];
        for (row, &i) in logits.data().chunks(classes).zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0;
            correct += usize::from(pred == data.labels[i]);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Runs epochs with early stopping on validation accuracy and returns the
/// best-epoch weights in eval mode. Without validation data every epoch runs
/// and the last weights are kept.
pub fn fit(
    mut model: Model,
    train: &LabeledImages,
    val: &LabeledImages,
    cfg: &TrainConfig,
    loss_fn: &mut LossFn<'_>,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let classes = model.spec().num_classes;
    if train.num_classes() > classes || val.num_classes() > classes {
        return Err(Error::Dataset(format!("labels exceed the model's {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut train_loss = Vec::new();
    let mut val_acc = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(&mut model, train, &mut opt, &mut rng, cfg.batch_size, loss_fn)?;
        let acc = if val.is_empty() { 0.0 } else { accuracy(&model, val)? };
        log::info!("epoch {epoch}: loss {loss:.4} val_acc {acc:.4}");
        train_loss.push(loss);
        val_acc.push(acc);
        if val.is_empty() || best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((epoch, acc, model.clone()));
        } else if epoch - best.as_ref().expect("set").0 > cfg.patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, mut kept) = match best {
        Some((epoch, _, m)) => (Some(epoch), m),
        None => (None, model),
    };
    kept.set_mode(Mode::Eval);
    let report = TrainReport {
        epochs: train_loss.len(),
        train_loss,
        val_acc,
        best_epoch,
        stop_reason,
    };
    Ok((kept, report))
}

/// Cross-entropy training with early stopping.
pub fn train_plain(model: Model, train: &LabeledImages, val: &LabeledImages, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    fit(model, train, val, cfg, &mut |tape, pass, _, labels| tape.cross_entropy_with_softmax(pass.logits, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlib::{student_plain, InputShape};

    fn toy(n_per_class: usize) -> LabeledImages {
        let shape = InputShape::new(8, 8, 1);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for k in 0..n_per_class {
                for p in 0..64 {
                    let on = p % 3 == c;
                    images.push(if on { 0.9 } else { 0.1 } + 0.01 * k as f32);
                }
                labels.push(c);
            }
        }
        LabeledImages { shape, images, labels }
    }

    #[test]
    fn learns_separable_toy_problem() {
        let data = toy(8);
        let model = Model::build(student_plain(InputShape::new(8, 8, 1), 8, 3), 1).unwrap();
        let before = accuracy(&model, &data).unwrap();
        let cfg = TrainConfig { epochs: 15, batch_size: 8, optimizer: OptimizerConfig::adam(1e-2), patience: 15, seed: 2 };
        let (trained, report) = train_plain(model, &data, &data, &cfg).unwrap();
        assert_eq!(report.val_acc.len(), report.epochs);
        assert!(report.val_acc[report.best_epoch.unwrap()] >= 0.99, "{before} -> {report:?}");
        assert_eq!(trained.mode(), Mode::Eval);
        assert_eq!(accuracy(&trained, &data).unwrap(), report.val_acc[report.best_epoch.unwrap()]);
    }

    #[test]
    fn zero_epochs_and_patience_zero() {
        let data = toy(4);
        let model = Model::build(student_plain(InputShape::new(8, 8, 1), 8, 3), 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (same, report) = train_plain(model.clone(), &data, &data, &cfg).unwrap();
        assert_eq!(same, model);
        assert_eq!((report.epochs, report.best_epoch), (0, None));
        let cfg = TrainConfig { epochs: 40, patience: 0, optimizer: OptimizerConfig::adam(1e-2), batch_size: 4, seed: 5 };
        let (_, report) = train_plain(model, &data, &data, &cfg).unwrap();
        let best = report.best_epoch.unwrap();
        assert!(report.epochs == 40 || report.epochs == best + 2, "{report:?}");
        let again = train_plain(Model::build(student_plain(InputShape::new(8, 8, 1), 8, 3), 1).unwrap(), &data, &data, &cfg).unwrap().1;
        assert_eq!(report, again);
    }

    #[test]
    fn empty_training_set_rejected() {
        let model = Model::build(student_plain(InputShape::new(8, 8, 1), 8, 3), 1).unwrap();
        let empty = LabeledImages { shape: InputShape::new(8, 8, 1), images: vec![], labels: vec![] };
        assert!(matches!(train_plain(model, &empty, &empty, &TrainConfig::default()), Err(Error::Dataset(_))));
    }
}
