//! Python module `shrinknet`: models, one-shot pruning, verification metrics
//! and the KD loss.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use shrinknet::autodiff::Tape;
use shrinknet::netlib::{self, Arch, CostReport, InputShape, Storage};
use shrinknet::pruner::{self, ScoringRule};
use shrinknet::verifier::{ScoreSet, VerificationReport};
use shrinknet::Tensor;

fn err(e: shrinknet::Error) -> PyErr {
    match e {
        shrinknet::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Serializes through JSON so Python receives plain dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = shrinknet::json::to_sorted_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn storage(name: &str) -> PyResult<Storage> {
    match name {
        "dense" => Ok(Storage::Dense),
        "sparse" => Ok(Storage::Sparse),
        other => Err(PyValueError::new_err(format!("storage must be 'dense' or 'sparse', got {other:?}"))),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what} rows have different lengths")));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(err)
}

#[pyclass(name = "Model", module = "shrinknet")]
#[derive(Clone)]
pub struct PyModel {
    inner: netlib::Model,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized `mini_teacher`, `student_plain` or
    /// `student_depthwise`.
    #[staticmethod]
    #[pyo3(signature = (arch, embedding_dim=64, num_classes=50, height=32, width=32, channels=1, seed=0))]
    fn build(arch: &str, embedding_dim: usize, num_classes: usize, height: usize, width: usize, channels: usize, seed: u64) -> PyResult<Self> {
        let arch = Arch::parse(arch).ok_or_else(|| PyValueError::new_err(format!("unknown architecture {arch:?}")))?;
        let spec = arch.spec(InputShape::new(height, width, channels), embedding_dim, num_classes);
        Ok(Self { inner: netlib::Model::build(spec, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: netlib::load(path).map_err(err)? })
    }

    /// Writes the model file and returns its size in bytes.
    #[pyo3(signature = (path, storage="dense"))]
    fn save(&self, path: &str, storage: &str) -> PyResult<u64> {
        netlib::save(&self.inner, path, self::storage(storage)?).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.spec().name.clone()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.spec().embedding_dim
    }

    /// `(height, width, channels)` of one input image.
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let i = self.inner.spec().input;
        (i.height, i.width, i.channels)
    }

    fn prunable_names(&self) -> Vec<String> {
        self.inner.prunable_names()
    }

    /// Eval-mode embeddings for `n` images given as one flat NCHW list.
    fn embed(&self, images: Vec<f32>, n: usize) -> PyResult<Vec<Vec<f32>>> {
        let (h, w, c) = self.input_shape();
        let batch = Tensor::new(vec![n, c, h, w], images).map_err(err)?;
        let mut m = self.inner.clone();
        m.set_mode(netlib::Mode::Eval);
        let out = m.forward_embed(&batch, None).map_err(err)?;
        Ok(out.data().chunks(self.embedding_dim()).map(<[f32]>::to_vec).collect())
    }

    /// Cost report as a dict.
    fn cost<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &CostReport::of(&self.inner).map_err(err)?)
    }

    /// One-shot pruning of a further fraction `f` of the surviving weights
    /// with a magnitude or random rule. Returns a new model.
    #[pyo3(signature = (rule, fraction, seed=0))]
    fn prune(&self, rule: &str, fraction: f64, seed: u64) -> PyResult<Self> {
        let rule = ScoringRule::parse(rule).ok_or_else(|| PyValueError::new_err(format!("unknown scoring rule {rule:?}")))?;
        if rule.needs_batch() {
            return Err(PyValueError::new_err(format!("{} needs a scoring batch; use the CLI", rule.id())));
        }
        let scores = pruner::score(&self.inner, rule, None, seed).map_err(err)?;
        let masks = pruner::select(&scores, self.inner.masks(), fraction, rule.scope()).map_err(err)?;
        let mut out = self.inner.clone();
        for (name, mask) in masks {
            out.set_mask(&name, mask).map_err(err)?;
        }
        Ok(Self { inner: out })
    }

    /// `(cr_params, cr_all)`.
    fn compression_ratio(&self) -> (f64, f64) {
        let cr = pruner::compression_ratio(&self.inner);
        (cr.cr_params, cr.cr_all)
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, params={})", self.inner.spec().name, self.inner.count_params())
    }
}

/// EER, GMR at each FMR target, AUC, ROC and thresholds as a dict.
#[pyfunction]
#[pyo3(signature = (genuine, impostor, fmr_targets=vec![0.01, 0.1]))]
fn verify<'py>(py: Python<'py>, genuine: Vec<f64>, impostor: Vec<f64>, fmr_targets: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let report = VerificationReport::compute(&ScoreSet::new(genuine, impostor), &fmr_targets).map_err(err)?;
    to_py(py, &report)
}

/// Batch-mean `(1 − λ)·CE + τ²·λ·KL` on plain nested lists.
#[pyfunction]
#[pyo3(signature = (student_logits, teacher_logits, labels, tau=4.0, lam=0.9))]
fn kd_loss(student_logits: Vec<Vec<f64>>, teacher_logits: Vec<Vec<f64>>, labels: Vec<usize>, tau: f64, lam: f64) -> PyResult<f64> {
    let s = matrix(&student_logits, "student_logits")?;
    let t = matrix(&teacher_logits, "teacher_logits")?;
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(s).map_err(err)?;
    let loss = shrinknet::distiller::kd_loss(&mut tape, v, &t, &labels, tau, lam).map_err(err)?;
    Ok(tape.value(loss).data()[0])
}

/// MAdds of a named architecture at the given input and head sizes.
#[pyfunction]
#[pyo3(signature = (arch, embedding_dim=64, num_classes=50, height=32, width=32, channels=1))]
fn count_madds(arch: &str, embedding_dim: usize, num_classes: usize, height: usize, width: usize, channels: usize) -> PyResult<u64> {
    let arch = Arch::parse(arch).ok_or_else(|| PyValueError::new_err(format!("unknown architecture {arch:?}")))?;
    let spec = arch.spec(InputShape::new(height, width, channels), embedding_dim, num_classes);
    Ok(spec.count_madds().map_err(err)?.total)
}

#[pyfunction]
fn derive_seed(master: u64, purpose: &str) -> u64 {
    shrinknet::seed::derive(master, purpose)
}

/// Runs the command-line pipeline with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    shrinknet::cli::run(std::iter::once("shrinknet".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "shrinknet")]
pub fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(count_madds, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("SCORING_RULES", ScoringRule::ALL.iter().map(|r| r.id()).collect::<Vec<_>>())?;
    Ok(())
}
