use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::benchhub::BenchConfig;
use crate::distiller::KdConfig;
use crate::json;
use crate::netlib::{Arch, Storage};
use crate::optim::OptimizerConfig;
use crate::pruner::PruneConfig;
use crate::seed::derive;
use crate::synthdata::DatasetSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub teacher: Arch,
    pub students: Vec<Arch>,
    pub embedding_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            teacher: Arch::MiniTeacher,
            students: vec![Arch::StudentPlain, Arch::StudentDepthwise],
            embedding_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 50.0 / 70.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fmr_targets: Vec<f64>,
    /// Artifact stems to evaluate or benchmark; empty means every model in
    /// the workspace.
    pub models: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { fmr_targets: vec![0.01, 0.1], models: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageConfig {
    pub teacher: Storage,
    pub students: Storage,
    pub pruned: Storage,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self { teacher: Storage::Dense, students: Storage::Dense, pruned: Storage::Sparse }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub workspace: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { workspace: PathBuf::from("workspace") }
    }
}

/// Everything one pipeline run needs. Nested `seed` fields are overwritten
/// with sub-seeds derived from the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub student: TrainConfig,
    pub kd: KdConfig,
    pub prune: PruneConfig,
    pub storage: StorageConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let student = TrainConfig { optimizer: OptimizerConfig::sgd(0.05, 0.9), ..TrainConfig::default() };
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            split: SplitConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig { optimizer: OptimizerConfig::adam(2e-3), ..TrainConfig::default() },
            student: student.clone(),
            kd: KdConfig { train: student, ..KdConfig::default() },
            prune: PruneConfig::default(),
            storage: StorageConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Config problems carry the dotted field they concern.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn field(path: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{path}: {msg}"))
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            field(if path == "." { "config" } else { &path }, e.into_inner())
        })
    }

    /// Applies a `dotted.key=value` override. The value is parsed as JSON
    /// when possible and taken as a string otherwise.
    pub fn apply_override(&self, assignment: &str) -> Result<Self, ConfigError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set expects key=value, got `{assignment}`")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(self).map_err(|e| ConfigError(e.to_string()))?;
        let mut cur = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let here = parts[..=i].join(".");
            let obj = cur.as_object_mut().ok_or_else(|| field(&here, "parent is not an object"))?;
            if !obj.contains_key(*part) {
                return Err(field(&here, "unknown field"));
            }
            cur = obj.get_mut(*part).expect("checked");
        }
        *cur = parsed;
        Self::from_value(root)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset.validate().map_err(|e| field("dataset", e))?;
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(field("split.train_fraction", format!("must lie in (0, 1), got {f}")));
        }
        if self.arch.embedding_dim < 1 {
            return Err(field("arch.embedding_dim", "must be >= 1"));
        }
        if self.arch.teacher != Arch::MiniTeacher {
            return Err(field("arch.teacher", "must be mini_teacher"));
        }
        if self.arch.students.contains(&Arch::MiniTeacher) {
            return Err(field("arch.students", "mini_teacher is not a student architecture"));
        }
        self.train.validate().map_err(|e| field("train", e))?;
        self.student.validate().map_err(|e| field("student", e))?;
        self.kd.validate().map_err(|e| field("kd", e))?;
        self.prune.validate().map_err(|e| field("prune", e))?;
        if self.eval.fmr_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(field("eval.fmr_targets", "targets must lie in [0, 1]"));
        }
        if self.bench.reps < 3 {
            return Err(field("bench.reps", "must be >= 3"));
        }
        if self.bench.batch_size < 1 {
            return Err(field("bench.batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Copy with every nested seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.dataset.seed = derive(s, "dataset");
        c.train.seed = derive(s, "teacher-train");
        c.student.seed = derive(s, "student-train");
        c.kd.train.seed = derive(s, "student-train");
        c.prune.seed = derive(s, "prune");
        c
    }

    pub fn split_seed(&self) -> u64 {
        derive(self.seed, "split")
    }

    pub fn init_seed(&self, arch: Arch) -> u64 {
        derive(self.seed, &format!("init-{}", arch.id()))
    }

    /// SHA-256 of the sorted-key config JSON, ignoring the workspace path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let text = json::to_sorted_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overrides() {
        let c = RunConfig::default();
        let text = json::to_sorted_string(&c).unwrap();
        let back = RunConfig::from_value(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, c);
        let o = c.apply_override("prune.rule=random").unwrap().apply_override("prune.target_cr=16").unwrap();
        assert_eq!(o.prune.rule, crate::pruner::ScoringRule::Random);
        assert_eq!(o.prune.target_cr, 16.0);
        let err = c.apply_override("prune.bogus=1").unwrap_err();
        assert!(err.0.starts_with("prune.bogus"), "{err}");
        let err = c.apply_override("prune.rule=cubic").unwrap_err();
        assert!(err.0.starts_with("prune.rule"), "{err}");
        assert!(c.apply_override("novalue").is_err());
        let bad = c.apply_override("split.train_fraction=1.0").unwrap();
        assert!(bad.validate().unwrap_err().0.starts_with("split.train_fraction"));
        c.validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_value(serde_json::json!({"seed": 7, "kd": {"tau": 2.0}})).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.kd.tau, 2.0);
        assert_eq!(c.kd.lambda, 0.9);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }
}
