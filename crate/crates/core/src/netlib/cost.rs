use serde::{Deserialize, Serialize};

use super::format::{dense_payload_bytes, sparse_payload_bytes};
use super::model::Model;
use crate::error::Result;
use crate::json::{deserialize_float_or_sentinel, float_or_sentinel};

/// Size and compute summary of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub total_params: u64,
    pub total_madds: u64,
    /// `4 · total_params`.
    pub dense_bytes: u64,
    /// Sparse payloads for prunable tensors plus dense payloads for the rest.
    pub sparse_bytes: u64,
    /// Nonzero prunable weights plus all non-prunable parameters.
    pub nonzero_params: u64,
    #[serde(serialize_with = "float_or_sentinel", deserialize_with = "deserialize_float_or_sentinel")]
    pub cr_params: f64,
}

impl CostReport {
    pub fn of(model: &Model) -> Result<Self> {
        let total_params = model.count_params();
        let total_madds = model.spec().count_madds()?.total;
        let mut sparse_bytes = 0;
        let mut non_prunable = 0;
        for (name, t) in model.params() {
            match model.mask(name) {
                Some(mask) => {
                    let nnz = t.data().iter().zip(mask).filter(|(v, k)| **k && **v != 0.0).count();
                    sparse_bytes += sparse_payload_bytes(nnz as u64);
                }
                None => {
                    non_prunable += t.numel() as u64;
                    sparse_bytes += dense_payload_bytes(t.numel() as u64);
                }
            }
        }
        let (prunable, nonzero) = model.prunable_counts();
        Ok(Self {
            total_params,
            total_madds,
            dense_bytes: dense_payload_bytes(total_params),
            sparse_bytes,
            nonzero_params: nonzero + non_prunable,
            cr_params: ratio(prunable, nonzero),
        })
    }
}

/// `original / remaining`, with `+∞` when nothing remains.
pub(crate) fn ratio(original: u64, remaining: u64) -> f64 {
    if remaining == 0 {
        f64::INFINITY
    } else {
        original as f64 / remaining as f64
    }
}
