use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, ModelSpec, ShapeTrace};
use crate::autodiff::{BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A network instance: spec, named parameters, prune masks and batch-norm state.
///
/// The effective weight of a masked parameter is always `param ⊙ mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    trace: ShapeTrace,
    params: IndexMap<String, Tensor<f32>>,
    masks: BTreeMap<String, Vec<bool>>,
    buffers: IndexMap<String, Tensor<f32>>,
    mode: Mode,
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    pub embedding: Var,
    pub logits: Var,
    /// Tape leaves holding the effective parameters, in declaration order.
    pub params: Vec<(String, Var)>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
}

impl Model {
    /// Builds a model with He-uniform weights, zero biases, unit BN scale and
    /// all-ones masks. Deterministic for a given seed.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let trace = spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        let mut masks = BTreeMap::new();
        for (name, shape, prunable) in spec.param_shapes() {
            let numel: usize = shape.iter().product();
            let data = if prunable {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound) as f32).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; numel]
            } else {
                vec![0.0; numel]
            };
            if prunable {
                masks.insert(name.clone(), vec![true; numel]);
            }
            params.insert(name, Tensor::new(shape, data)?);
        }
        let buffers = spec
            .buffer_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name.ends_with(".running_var") { 1.0 } else { 0.0 };
                (name, Tensor::full(shape, fill))
            })
            .collect();
        Ok(Self {
            spec,
            trace,
            params,
            masks,
            buffers,
            mode: Mode::Eval,
        })
    }

    /// Reassembles a model from stored tensors (used by the file loader).
    pub(crate) fn from_parts(
        spec: ModelSpec,
        params: IndexMap<String, Tensor<f32>>,
        masks: BTreeMap<String, Vec<bool>>,
        buffers: IndexMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        let trace = spec.infer_shapes()?;
        for (name, shape, prunable) in spec.param_shapes() {
            let p = params
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if p.shape() != shape.as_slice() {
                return Err(Error::invalid(format!("parameter `{name}` has shape {:?}, spec says {shape:?}", p.shape())));
            }
            if prunable && masks.get(&name).map(Vec::len) != Some(p.numel()) {
                return Err(Error::invalid(format!("mask for `{name}` missing or mis-sized")));
            }
        }
        for (name, shape) in spec.buffer_shapes() {
            if buffers.get(&name).map(|b| b.shape().to_vec()) != Some(shape) {
                return Err(Error::invalid(format!("buffer `{name}` missing or mis-sized")));
            }
        }
        Ok(Self {
            spec,
            trace,
            params,
            masks,
            buffers,
            mode: Mode::Eval,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shape_trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<f32>> {
        &mut self.params
    }

    /// Copies the gradient of each forward-pass leaf into the matching
    /// parameter and applies one optimizer step under the current masks.
    pub fn apply_step(&mut self, tape: &Tape<f32>, pass: &ForwardPass, opt: &mut OptimizerState<f32>) -> Result<()> {
        for (name, v) in &pass.params {
            let g = tape.grad(*v).ok_or_else(|| Error::MissingGrad(name.clone()))?.to_vec();
            self.params.get_mut(name.as_str()).expect("known parameter").set_grad(g)?;
        }
        opt.step(self.params.iter_mut().map(|(k, t)| (k.as_str(), t)), Some(&self.masks))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.buffers
    }

    pub fn masks(&self) -> &BTreeMap<String, Vec<bool>> {
        &self.masks
    }

    pub fn mask(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    /// Names of prunable tensors (conv/dense weights) in declaration order.
    pub fn prunable_names(&self) -> Vec<String> {
        self.params.keys().filter(|k| self.masks.contains_key(*k)).cloned().collect()
    }

    /// Replaces a mask and zeroes the parameter wherever the mask is off.
    pub fn set_mask(&mut self, name: &str, mask: Vec<bool>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .filter(|_| self.masks.contains_key(name))
            .ok_or_else(|| Error::invalid(format!("`{name}` is not a prunable tensor")))?;
        if mask.len() != p.numel() {
            return Err(Error::Shape {
                op: "set_mask",
                detail: format!("mask of {} for `{name}` {:?}", mask.len(), p.shape()),
            });
        }
        for (v, keep) in p.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
        self.masks.insert(name.to_string(), mask);
        Ok(())
    }

    /// Effective (masked) values of a parameter.
    pub fn effective(&self, name: &str) -> Option<Vec<f32>> {
        let p = self.params.get(name)?;
        Some(match self.masks.get(name) {
            Some(mask) => p.data().iter().zip(mask).map(|(v, k)| if *k { *v } else { 0.0 }).collect(),
            None => p.data().to_vec(),
        })
    }

    /// `(prunable weights, nonzero effective prunable weights)`.
    pub fn prunable_counts(&self) -> (u64, u64) {
        let mut total = 0u64;
        let mut nonzero = 0u64;
        for (name, mask) in &self.masks {
            let p = &self.params[name];
            total += p.numel() as u64;
            nonzero += p.data().iter().zip(mask).filter(|(v, k)| **k && **v != 0.0).count() as u64;
        }
        (total, nonzero)
    }

    pub fn count_params(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let i = self.spec.input;
        match shape {
            [_, c, h, w] if *c == i.channels && *h == i.height && *w == i.width => Ok(()),
            _ => Err(Error::Shape {
                op: "forward",
                detail: format!("input {shape:?}, model expects [N, {}, {}, {}]", i.channels, i.height, i.width),
            }),
        }
    }

    /// Records a full forward pass on `tape`. In train mode batch-norm uses
    /// batch statistics and dropout draws from `rng`; `track_grad` marks the
    /// parameter leaves as requiring gradients.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        input: Var,
        mut rng: Option<&mut dyn RngCore>,
        track_grad: bool,
    ) -> Result<ForwardPass> {
        self.check_input(tape.value(input).shape())?;
        let train = self.mode == Mode::Train;
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut leaf_of: BTreeMap<&str, Var> = BTreeMap::new();
        for name in self.params.keys() {
            let values = self.effective(name).expect("known parameter");
            let t = Tensor::new(self.params[name].shape().to_vec(), values)?.with_requires_grad(track_grad);
            let v = tape.leaf(t)?;
            leaves.push((name.clone(), v));
            leaf_of.insert(name.as_str(), v);
        }
        let mut bn_stats = Vec::new();
        let mut outputs: Vec<Var> = Vec::with_capacity(self.spec.layers.len());
        let mut cur = input;
        for layer in &self.spec.layers {
            let n = &layer.name;
            let w = |suffix: &str| leaf_of[format!("{n}.{suffix}").as_str()];
            cur = match &layer.kind {
                LayerKind::Conv { stride, pad, groups, .. } => {
                    tape.conv2d(cur, w("weight"), Some(w("bias")), *stride, *pad, *groups)?
                }
                LayerKind::Dense { .. } => tape.dense(cur, w("weight"), Some(w("bias")))?,
                LayerKind::BatchNorm { .. } => {
                    let mode = if train {
                        BnMode::Train
                    } else {
                        BnMode::Eval {
                            mean: self.buffers[format!("{n}.running_mean").as_str()].data(),
                            var: self.buffers[format!("{n}.running_var").as_str()].data(),
                        }
                    };
                    let (out, stats) = tape.batch_norm(cur, w("gamma"), w("beta"), mode, BN_EPS)?;
                    if let Some(stats) = stats {
                        bn_stats.push((n.clone(), stats));
                    }
                    out
                }
                LayerKind::Relu => tape.relu(cur)?,
                LayerKind::Dropout { p } => {
                    if train && *p > 0.0 {
                        let r = rng
                            .as_deref_mut()
                            .ok_or_else(|| Error::invalid("train-mode dropout needs an RNG"))?;
                        tape.dropout(cur, *p, Some(r))?
                    } else {
                        tape.dropout(cur, *p, None)?
                    }
                }
                LayerKind::GlobalAvgPool => tape.global_avg_pool(cur)?,
                LayerKind::ResidualAdd { skip_from } => {
                    let idx = self.spec.layer_index(skip_from).expect("validated by shape inference");
                    tape.add(cur, outputs[idx])?
                }
            };
            outputs.push(cur);
        }
        Ok(ForwardPass {
            embedding: outputs[self.spec.embedding_layer()],
            logits: cur,
            params: leaves,
            bn_stats,
        })
    }

    /// Folds batch statistics into the running averages (momentum 0.1).
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<f32>)]) {
        for (layer, s) in stats {
            let mean = self.buffers.get_mut(format!("{layer}.running_mean").as_str()).expect("bn buffer");
            for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * *b;
            }
            let var = self.buffers.get_mut(format!("{layer}.running_var").as_str()).expect("bn buffer");
            for (r, b) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * *b;
            }
        }
    }

    /// Embeddings (`[n, E]`) for an NCHW batch. Eval mode is deterministic;
    /// train mode applies dropout from `rng` and batch statistics.
    pub fn forward_embed(&self, batch: &Tensor<f32>, rng: Option<&mut dyn RngCore>) -> Result<Tensor<f32>> {
        let (embedding, _) = self.infer(batch, rng)?;
        Ok(embedding)
    }

    /// Classifier logits (`[n, num_classes]`) for an NCHW batch.
    pub fn forward_logits(&self, batch: &Tensor<f32>, rng: Option<&mut dyn RngCore>) -> Result<Tensor<f32>> {
        let (_, logits) = self.infer(batch, rng)?;
        Ok(logits)
    }

    fn infer(&self, batch: &Tensor<f32>, rng: Option<&mut dyn RngCore>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone())?;
        let pass = self.forward(&mut tape, x, rng, false)?;
        Ok((tape.value(pass.embedding).clone(), tape.value(pass.logits).clone()))
    }
}
