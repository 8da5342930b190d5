//! Unstructured weight pruning: scoring rules, mask selection and the
//! iterative prune / fine-tune loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::json::{deserialize_float_or_sentinel, float_or_sentinel};
use crate::netlib::cost::ratio;
use crate::netlib::{Mode, Model};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::seed;
use crate::synthdata::LabeledImages;
use crate::tensor::Tensor;
use crate::training::{accuracy, train_epoch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    GlobalMagnitude,
    LayerwiseMagnitude,
    GlobalGradientMagnitude,
    LayerwiseGradientMagnitude,
    Random,
}

impl ScoringRule {
    pub const ALL: [ScoringRule; 5] = [
        ScoringRule::GlobalMagnitude,
        ScoringRule::LayerwiseMagnitude,
        ScoringRule::GlobalGradientMagnitude,
        ScoringRule::LayerwiseGradientMagnitude,
        ScoringRule::Random,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ScoringRule::GlobalMagnitude => "global_magnitude",
            ScoringRule::LayerwiseMagnitude => "layerwise_magnitude",
            ScoringRule::GlobalGradientMagnitude => "global_gradient_magnitude",
            ScoringRule::LayerwiseGradientMagnitude => "layerwise_gradient_magnitude",
            ScoringRule::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.id() == s)
    }

    /// Random pruning draws at the same rate in every tensor.
    pub fn scope(self) -> Scope {
        match self {
            ScoringRule::GlobalMagnitude | ScoringRule::GlobalGradientMagnitude => Scope::Global,
            _ => Scope::Layerwise,
        }
    }

    pub fn needs_batch(self) -> bool {
        matches!(self, ScoringRule::GlobalGradientMagnitude | ScoringRule::LayerwiseGradientMagnitude)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Layerwise,
}

/// Per-weight scores for each prunable tensor, in declaration order.
pub type Scores = Vec<(String, Vec<f64>)>;

/// A labelled batch used for gradient scoring.
pub struct ScoringBatch<'a> {
    pub images: &'a Tensor<f32>,
    pub labels: &'a [usize],
}

/// Scores every prunable weight. Already-masked weights score `+∞`.
pub fn score(model: &Model, rule: ScoringRule, batch: Option<ScoringBatch<'_>>, seed: u64) -> Result<Scores> {
    let names = model.prunable_names();
    let raw: Vec<Vec<f64>> = match rule {
        ScoringRule::GlobalMagnitude | ScoringRule::LayerwiseMagnitude => names
            .iter()
            .map(|n| model.effective(n).expect("prunable").iter().map(|w| (*w as f64).abs()).collect())
            .collect(),
        ScoringRule::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            names
                .iter()
                .map(|n| (0..model.param(n).expect("prunable").numel()).map(|_| rng.random::<f64>()).collect())
                .collect()
        }
        ScoringRule::GlobalGradientMagnitude | ScoringRule::LayerwiseGradientMagnitude => {
            let batch = batch.ok_or_else(|| Error::invalid(format!("rule {} needs a scoring batch", rule.id())))?;
            let grads = loss_gradients(model, batch)?;
            names
                .iter()
                .map(|n| {
                    let w = model.effective(n).expect("prunable");
                    w.iter().zip(&grads[n]).map(|(w, g)| (*w as f64 * *g as f64).abs()).collect()
                })
                .collect()
        }
    };
    Ok(names
        .into_iter()
        .zip(raw)
        .map(|(n, mut s)| {
            if let Some(mask) = model.mask(&n) {
                s.iter_mut().zip(mask).filter(|(_, k)| !**k).for_each(|(v, _)| *v = f64::INFINITY);
            }
            (n, s)
        })
        .collect())
}

/// Gradients of the eval-mode cross-entropy with respect to the effective weights.
fn loss_gradients(model: &Model, batch: ScoringBatch<'_>) -> Result<BTreeMap<String, Vec<f32>>> {
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone())?;
    let pass = m.forward(&mut tape, x, None, true)?;
    let loss = tape.cross_entropy_with_softmax(pass.logits, batch.labels)?;
    tape.backward(loss)?;
    pass.params
        .iter()
        .filter(|(n, _)| m.mask(n).is_some())
        .map(|(n, v)| Ok((n.clone(), tape.grad(*v).ok_or_else(|| Error::MissingGrad(n.clone()))?.to_vec())))
        .collect()
}

/// How many additional weights to prune.
#[derive(Clone, Debug, PartialEq)]
pub enum PruneCount {
    Global(usize),
    /// One count per entry of the score list.
    PerTensor(Vec<usize>),
}

fn unmasked(scores: &Scores, masks: &BTreeMap<String, Vec<bool>>, t: usize) -> Vec<usize> {
    let (name, s) = &scores[t];
    (0..s.len()).filter(|&i| masks.get(name).is_none_or(|m| m[i])).collect()
}

fn check_masks(scores: &Scores, masks: &BTreeMap<String, Vec<bool>>) -> Result<()> {
    for (name, s) in scores {
        if let Some(m) = masks.get(name) {
            if m.len() != s.len() {
                return Err(Error::Shape {
                    op: "select",
                    detail: format!("mask for `{name}` has {} entries, scores {}", m.len(), s.len()),
                });
            }
        }
    }
    Ok(())
}

/// Prunes exactly the requested number of lowest-scoring unmasked weights.
/// Ties go to the earlier tensor, then the lower flat index.
pub fn select_count(scores: &Scores, masks: &BTreeMap<String, Vec<bool>>, count: &PruneCount) -> Result<BTreeMap<String, Vec<bool>>> {
    check_masks(scores, masks)?;
    let mut out: BTreeMap<String, Vec<bool>> = scores
        .iter()
        .map(|(n, s)| (n.clone(), masks.get(n).cloned().unwrap_or_else(|| vec![true; s.len()])))
        .collect();
    let order = |a: &(usize, usize), b: &(usize, usize)| {
        scores[a.0].1[a.1].total_cmp(&scores[b.0].1[b.1]).then(a.cmp(b))
    };
    let groups: Vec<(Vec<(usize, usize)>, usize)> = match count {
        PruneCount::Global(k) => {
            let all = (0..scores.len()).flat_map(|t| unmasked(scores, masks, t).into_iter().map(move |i| (t, i))).collect();
            vec![(all, *k)]
        }
        PruneCount::PerTensor(ks) => {
            if ks.len() != scores.len() {
                return Err(Error::invalid(format!("{} counts for {} tensors", ks.len(), scores.len())));
            }
            (0..scores.len())
                .map(|t| (unmasked(scores, masks, t).into_iter().map(|i| (t, i)).collect(), ks[t]))
                .collect()
        }
    };
    for (mut cands, k) in groups {
        if k > cands.len() {
            return Err(Error::invalid(format!("cannot prune {k} of {} unmasked weights", cands.len())));
        }
        if k == 0 {
            continue;
        }
        if k < cands.len() {
            cands.select_nth_unstable_by(k - 1, order);
        }
        for &(t, i) in &cands[..k] {
            out.get_mut(&scores[t].0).expect("present")[i] = false;
        }
    }
    Ok(out)
}

/// Prunes `⌊f · n⌋` of the currently unmasked weights, counted over all
/// tensors (global) or per tensor (layerwise).
pub fn select(scores: &Scores, masks: &BTreeMap<String, Vec<bool>>, f: f64, scope: Scope) -> Result<BTreeMap<String, Vec<bool>>> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(format!("prune fraction {f} outside [0, 1]")));
    }
    check_masks(scores, masks)?;
    let alive: Vec<usize> = (0..scores.len()).map(|t| unmasked(scores, masks, t).len()).collect();
    let count = match scope {
        Scope::Global => PruneCount::Global((f * alive.iter().sum::<usize>() as f64).floor() as usize),
        Scope::Layerwise => PruneCount::PerTensor(alive.iter().map(|n| (f * *n as f64).floor() as usize).collect()),
    };
    select_count(scores, masks, &count)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub rule: ScoringRule,
    pub target_cr: f64,
    pub iterations: usize,
    pub fine_tune_epochs: usize,
    pub scoring_batch_size: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Prunable tensors left untouched.
    pub excluded: BTreeSet<String>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rule: ScoringRule::LayerwiseMagnitude,
            target_cr: 8.0,
            iterations: 4,
            fine_tune_epochs: 10,
            scoring_batch_size: 32,
            batch_size: 32,
            optimizer: OptimizerConfig::adam(5e-4),
            seed: 0,
            excluded: BTreeSet::new(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_cr >= 1.0 && self.target_cr.is_finite()) {
            return Err(Error::invalid(format!("prune.target_cr must be >= 1, got {}", self.target_cr)));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("prune.iterations must be >= 1"));
        }
        if self.scoring_batch_size < 1 {
            return Err(Error::invalid("prune.scoring_batch_size must be >= 1"));
        }
        if self.fine_tune_epochs > 0 && self.batch_size < 2 {
            return Err(Error::invalid("prune.batch_size must be >= 2"));
        }
        self.optimizer.validate()
    }

    /// Cumulative keep fraction after each iteration: `cr^(−i/N)`.
    pub fn keep_schedule(&self) -> Vec<f64> {
        let n = self.iterations;
        (1..=n)
            .map(|i| if i == n { 1.0 / self.target_cr } else { self.target_cr.powf(-(i as f64) / n as f64) })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneIteration {
    pub iteration: usize,
    pub keep_fraction: f64,
    /// Fraction of masked weights per tensor.
    pub sparsity: BTreeMap<String, f64>,
    #[serde(serialize_with = "float_or_sentinel", deserialize_with = "deserialize_float_or_sentinel")]
    pub cr_params: f64,
    /// Mean loss of the last fine-tune epoch, absent without fine-tuning.
    pub train_loss: Option<f64>,
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneHistory {
    pub rule: ScoringRule,
    pub target_cr: f64,
    pub iterations: Vec<PruneIteration>,
}

/// Number of weights to keep out of `n` at keep fraction `keep`, rounded up.
fn keep_count(n: usize, keep: f64) -> usize {
    ((n as f64 * keep) - 1e-9).ceil().max(0.0) as usize
}

/// Iteratively scores, prunes to the geometric keep schedule and fine-tunes
/// with masked updates.
pub fn prune_iterative(model: Model, cfg: &PruneConfig, train: &LabeledImages) -> Result<(Model, PruneHistory)> {
    prune_iterative_observed(model, cfg, train, &mut |_, _| {})
}

/// [`prune_iterative`], calling `observe(iteration, model)` after each
/// prune and fine-tune round.
pub fn prune_iterative_observed(
    mut model: Model,
    cfg: &PruneConfig,
    train: &LabeledImages,
    observe: &mut dyn FnMut(usize, &Model),
) -> Result<(Model, PruneHistory)> {
    cfg.validate()?;
    let names: Vec<String> = model.prunable_names().into_iter().filter(|n| !cfg.excluded.contains(n)).collect();
    let unknown: Vec<&String> = cfg.excluded.iter().filter(|n| model.mask(n).is_none()).collect();
    if !unknown.is_empty() {
        return Err(Error::invalid(format!("excluded tensors are not prunable: {unknown:?}")));
    }
    let sizes: Vec<usize> = names.iter().map(|n| model.param(n).expect("prunable").numel()).collect();
    let batch_data = if cfg.rule.needs_batch() {
        if train.is_empty() {
            return Err(Error::Dataset("gradient scoring needs training data".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "scoring-batch"));
        let k = cfg.scoring_batch_size.min(train.len());
        let idx = sample(&mut rng, train.len(), k).into_vec();
        Some((train.batch(&idx), train.labels_of(&idx)))
    } else {
        None
    };
    let mut ft_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "fine-tune"));
    let mut history = PruneHistory { rule: cfg.rule, target_cr: cfg.target_cr, iterations: Vec::new() };
    for (i, keep) in cfg.keep_schedule().into_iter().enumerate() {
        let batch = batch_data.as_ref().map(|(images, labels)| ScoringBatch { images, labels });
        let all = score(&model, cfg.rule, batch, seed::derive(cfg.seed, &format!("random-scores-{i}")))?;
        let scores: Scores = all.into_iter().filter(|(n, _)| !cfg.excluded.contains(n)).collect();
        let alive: Vec<usize> = names.iter().map(|n| model.mask(n).expect("prunable").iter().filter(|k| **k).count()).collect();
        let count = match cfg.rule.scope() {
            Scope::Global => {
                let target = keep_count(sizes.iter().sum(), keep);
                PruneCount::Global(alive.iter().sum::<usize>().saturating_sub(target))
            }
            Scope::Layerwise => PruneCount::PerTensor(
                sizes.iter().zip(&alive).map(|(n, a)| a.saturating_sub(keep_count(*n, keep))).collect(),
            ),
        };
        for (name, mask) in select_count(&scores, model.masks(), &count)? {
            model.set_mask(&name, mask)?;
        }
        let mut train_loss = None;
        if cfg.fine_tune_epochs > 0 {
            let mut opt = OptimizerState::new(cfg.optimizer);
            let mut ce = |tape: &mut Tape<f32>, pass: &crate::netlib::ForwardPass, _: &Tensor<f32>, labels: &[usize]| {
                tape.cross_entropy_with_softmax(pass.logits, labels)
            };
            for _ in 0..cfg.fine_tune_epochs {
                train_loss = Some(train_epoch(&mut model, train, &mut opt, &mut ft_rng, cfg.batch_size, &mut ce)?);
            }
        }
        model.set_mode(Mode::Eval);
        let sparsity = model
            .masks()
            .iter()
            .map(|(n, m)| (n.clone(), m.iter().filter(|k| !**k).count() as f64 / m.len() as f64))
            .collect();
        history.iterations.push(PruneIteration {
            iteration: i + 1,
            keep_fraction: keep,
            sparsity,
            cr_params: compression_ratio(&model).cr_params,
            train_loss,
            train_acc: accuracy(&model, train)?,
        });
        log::info!("prune iteration {}: keep {keep:.4}", i + 1);
        observe(i + 1, &model);
    }
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatio {
    #[serde(serialize_with = "float_or_sentinel", deserialize_with = "deserialize_float_or_sentinel")]
    pub cr_params: f64,
    #[serde(serialize_with = "float_or_sentinel", deserialize_with = "deserialize_float_or_sentinel")]
    pub cr_all: f64,
}

pub fn compression_ratio(model: &Model) -> CompressionRatio {
    let (prunable, nonzero) = model.prunable_counts();
    let total = model.count_params();
    CompressionRatio {
        cr_params: ratio(prunable, nonzero),
        cr_all: ratio(total, nonzero + (total - prunable)),
    }
}
