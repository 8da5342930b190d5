//! Pipeline stages shared by the subcommands.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::distiller::distill;
use crate::error::Result;
use crate::json::{deserialize_float_or_sentinel, float_or_sentinel};
use crate::netlib::{Arch, CostReport, Model};
use crate::pruner::{compression_ratio, prune_iterative, PruneHistory};
use crate::synthdata::{self, Dataset, LabeledImages, SubjectSplit};
use crate::training::{train_plain, TrainReport};
use crate::verifier::{gen_protocol, ScoreSet, VerificationReport};

/// A generated dataset with its subject split and training views.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SubjectSplit,
    pub train: Dataset,
    pub eval: Dataset,
    pub fit: LabeledImages,
    pub val: LabeledImages,
}

impl Prepared {
    pub fn new(dataset: Dataset, split: SubjectSplit) -> Result<Self> {
        let train = dataset.filter_subjects(&split.train_subjects);
        let eval = dataset.filter_subjects(&split.eval_subjects);
        let (fit, val) = synthdata::training_views(&train)?;
        Ok(Self { dataset, split, train, eval, fit, val })
    }

    pub fn num_classes(&self) -> usize {
        self.split.train_subjects.len()
    }
}

/// Generates and splits the dataset described by a resolved config.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = synthdata::generate(&cfg.dataset)?;
    let split = synthdata::split_subjects(&dataset.subjects(), cfg.split.train_fraction, cfg.split_seed())?;
    Prepared::new(dataset, split)
}

pub fn build(cfg: &RunConfig, arch: Arch, data: &Prepared) -> Result<Model> {
    Model::build(
        arch.spec(cfg.dataset.input_shape(), cfg.arch.embedding_dim, data.num_classes()),
        cfg.init_seed(arch),
    )
}

pub fn train_teacher(cfg: &RunConfig, data: &Prepared) -> Result<(Model, TrainReport)> {
    let model = build(cfg, cfg.arch.teacher, data)?;
    train_plain(model, &data.fit, &data.val, &cfg.train)
}

pub fn prune(cfg: &RunConfig, teacher: &Model, data: &Prepared) -> Result<(Model, PruneHistory)> {
    prune_iterative(teacher.clone(), &cfg.prune, &data.fit)
}

/// Plain and distilled students trained from the same initialization.
pub struct StudentPair {
    pub plain: (Model, TrainReport),
    pub kd: (Model, TrainReport),
}

pub fn train_students(cfg: &RunConfig, arch: Arch, teacher: &Model, data: &Prepared) -> Result<StudentPair> {
    let init = build(cfg, arch, data)?;
    let plain = train_plain(init.clone(), &data.fit, &data.val, &cfg.student)?;
    let kd = distill(teacher, init, &data.fit, &data.val, &cfg.kd)?;
    Ok(StudentPair { plain, kd })
}

pub fn score(model: &Model, data: &Prepared) -> Result<ScoreSet> {
    let stacks = synthdata::to_stacks(&data.eval, model)?;
    gen_protocol(&stacks, &data.split.train_subjects)
}

pub fn evaluate(model: &Model, data: &Prepared, fmr_targets: &[f64]) -> Result<(ScoreSet, VerificationReport)> {
    let scores = score(model, data)?;
    let report = VerificationReport::compute(&scores, fmr_targets)?;
    Ok((scores, report))
}

/// One model's line in the final report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSummary {
    pub arch: String,
    pub eer: Option<f64>,
    pub gmr_at: BTreeMap<String, f64>,
    pub auc: Option<f64>,
    #[serde(serialize_with = "float_or_sentinel", deserialize_with = "deserialize_float_or_sentinel")]
    pub cr_params: f64,
    #[serde(serialize_with = "float_or_sentinel", deserialize_with = "deserialize_float_or_sentinel")]
    pub cr_all: f64,
    pub total_params: u64,
    pub nonzero_params: u64,
    pub total_madds: u64,
    pub dense_bytes: u64,
    pub sparse_bytes: u64,
    pub file_bytes: u64,
    pub mean_et_ms: Option<f64>,
}

pub fn summarize(model: &Model, file_bytes: u64, verification: Option<&VerificationReport>, mean_et_ms: Option<f64>) -> Result<ModelSummary> {
    let cost = CostReport::of(model)?;
    let cr = compression_ratio(model);
    Ok(ModelSummary {
        arch: model.spec().name.clone(),
        eer: verification.map(|v| v.eer),
        gmr_at: verification.map(|v| v.gmr_at.clone()).unwrap_or_default(),
        auc: verification.map(|v| v.auc),
        cr_params: cr.cr_params,
        cr_all: cr.cr_all,
        total_params: cost.total_params,
        nonzero_params: cost.nonzero_params,
        total_madds: cost.total_madds,
        dense_bytes: cost.dense_bytes,
        sparse_bytes: cost.sparse_bytes,
        file_bytes,
        mean_et_ms,
    })
}
