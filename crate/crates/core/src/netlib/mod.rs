//! Architectures, models, the analytical cost model and the model file format.

pub mod cost;
pub mod format;
pub mod model;
pub mod spec;

pub use cost::CostReport;
pub use format::{load, save, Storage};
pub use model::{ForwardPass, Mode, Model};
pub use spec::{
    mini_teacher, student_depthwise, student_plain, ActShape, Arch, InputShape, LayerKind, LayerSpec, MaddReport,
    ModelSpec, ShapeTrace,
};
