//! Layer and architecture specifications, shape inference and MAdd counting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl Default for InputShape {
    fn default() -> Self {
        Self::new(32, 32, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Dropout {
        p: f64,
    },
    GlobalAvgPool,
    ResidualAdd {
        skip_from: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    /// Whether this layer owns a weight matrix/kernel (and bias).
    pub fn is_learnable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm { .. })
    }
}

/// Activation shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActShape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat { features: usize },
}

impl ActShape {
    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Spatial { channels, .. } => channels,
            ActShape::Flat { features } => features,
        }
    }
}

/// Per-layer input and output shapes produced by shape inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub layer: String,
    pub input: ActShape,
    pub output: ActShape,
}

pub type ShapeTrace = Vec<ShapeEntry>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputShape,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Per-layer multiply-add counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaddReport {
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
}

fn spec_err(layer: &str, reason: impl Into<String>) -> Error {
    Error::Spec {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

impl ModelSpec {
    /// Index of the layer whose output is the identity embedding: the
    /// BatchNorm that follows the embedding Dense layer.
    pub fn embedding_layer(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Runs shape inference and checks every structural invariant.
    pub fn infer_shapes(&self) -> Result<ShapeTrace> {
        let mut seen = std::collections::HashSet::new();
        let mut trace: ShapeTrace = Vec::with_capacity(self.layers.len());
        if self.input.numel() == 0 {
            return Err(spec_err("<input>", "input dimensions must be >= 1"));
        }
        let mut cur = ActShape::Spatial {
            channels: self.input.channels,
            height: self.input.height,
            width: self.input.width,
        };
        for layer in &self.layers {
            let name = layer.name.as_str();
            if !seen.insert(name) {
                return Err(spec_err(name, "duplicate layer name"));
            }
            let out = match &layer.kind {
                LayerKind::Conv { in_ch, out_ch, kernel, stride, pad, groups } => {
                    let (channels, height, width) = match cur {
                        ActShape::Spatial { channels, height, width } => (channels, height, width),
                        ActShape::Flat { .. } => return Err(spec_err(name, "conv needs spatial input")),
                    };
                    if *kernel < 1 || *stride < 1 || *in_ch < 1 || *out_ch < 1 {
                        return Err(spec_err(name, "kernel, stride and channel counts must be >= 1"));
                    }
                    if *groups < 1 || in_ch % groups != 0 || out_ch % groups != 0 {
                        return Err(spec_err(name, format!("groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")));
                    }
                    if channels != *in_ch {
                        return Err(spec_err(name, format!("expects {in_ch} input channels, got {channels}")));
                    }
                    if height + 2 * pad < *kernel || width + 2 * pad < *kernel {
                        return Err(spec_err(name, format!("kernel {kernel} larger than padded input {height}x{width}")));
                    }
                    ActShape::Spatial {
                        channels: *out_ch,
                        height: (height + 2 * pad - kernel) / stride + 1,
                        width: (width + 2 * pad - kernel) / stride + 1,
                    }
                }
                LayerKind::Dense { in_features, out_features } => match cur {
                    ActShape::Flat { features } if features == *in_features && *out_features >= 1 => {
                        ActShape::Flat { features: *out_features }
                    }
                    _ => return Err(spec_err(name, format!("dense expects {in_features} flat features, got {cur:?}"))),
                },
                LayerKind::BatchNorm { channels } => {
                    if cur.channels() != *channels {
                        return Err(spec_err(name, format!("expects {channels} channels, got {}", cur.channels())));
                    }
                    cur
                }
                LayerKind::Relu => cur,
                LayerKind::Dropout { p } => {
                    if !(0.0..1.0).contains(p) {
                        return Err(spec_err(name, format!("dropout p={p} outside [0, 1)")));
                    }
                    cur
                }
                LayerKind::GlobalAvgPool => match cur {
                    ActShape::Spatial { channels, .. } => ActShape::Flat { features: channels },
                    ActShape::Flat { .. } => return Err(spec_err(name, "pooling needs spatial input")),
                },
                LayerKind::ResidualAdd { skip_from } => {
                    let Some(src) = trace.iter().find(|e| &e.layer == skip_from) else {
                        return Err(spec_err(name, format!("skip source `{skip_from}` is not an earlier layer")));
                    };
                    if src.output != cur {
                        return Err(spec_err(name, format!("skip shape {:?} differs from {cur:?}", src.output)));
                    }
                    cur
                }
            };
            trace.push(ShapeEntry {
                layer: layer.name.clone(),
                input: cur,
                output: out,
            });
            cur = out;
        }
        self.check_head(&trace)?;
        Ok(trace)
    }

    fn check_head(&self, trace: &ShapeTrace) -> Result<()> {
        let n = self.layers.len();
        let last = self.layers.last().map_or("<empty>", |l| l.name.as_str());
        if n < 5 {
            return Err(spec_err(last, "model must end in the embedding head"));
        }
        let head = &self.layers[n - 5..];
        let ok = matches!(head[0].kind, LayerKind::BatchNorm { .. })
            && matches!(head[1].kind, LayerKind::Dropout { .. })
            && matches!(head[2].kind, LayerKind::Dense { out_features, .. } if out_features == self.embedding_dim)
            && matches!(head[3].kind, LayerKind::BatchNorm { channels } if channels == self.embedding_dim)
            && matches!(head[4].kind, LayerKind::Dense { in_features, out_features }
                if in_features == self.embedding_dim && out_features == self.num_classes);
        if !ok {
            return Err(spec_err(
                last,
                format!(
                    "head must be BatchNorm -> Dropout -> Dense(., {e}) -> BatchNorm({e}) -> Dense({e}, {c})",
                    e = self.embedding_dim,
                    c = self.num_classes
                ),
            ));
        }
        debug_assert_eq!(trace.len(), n);
        Ok(())
    }

    /// Multiply-adds per layer: `W·H·(ch_in/groups)·ch_out·K·K` for a convolution
    /// over input resolution `W×H`, `F_in·F_out` for a dense layer, zero otherwise.
    pub fn count_madds(&self) -> Result<MaddReport> {
        let trace = self.infer_shapes()?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, entry) in self.layers.iter().zip(&trace) {
            let madds = match (&layer.kind, entry.input) {
                (LayerKind::Conv { in_ch, out_ch, kernel, groups, .. }, ActShape::Spatial { height, width, .. }) => {
                    (width * height * (in_ch / groups) * out_ch * kernel * kernel) as u64
                }
                (LayerKind::Dense { in_features, out_features }, _) => (in_features * out_features) as u64,
                _ => 0,
            };
            per_layer.push((layer.name.clone(), madds));
        }
        let total = per_layer.iter().map(|(_, m)| m).sum();
        Ok(MaddReport { per_layer, total })
    }

    /// Learnable tensors as `(name, shape, prunable)` in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let n = &layer.name;
            match layer.kind {
                LayerKind::Conv { in_ch, out_ch, kernel, groups, .. } => {
                    out.push((format!("{n}.weight"), vec![out_ch, in_ch / groups, kernel, kernel], true));
                    out.push((format!("{n}.bias"), vec![out_ch], false));
                }
                LayerKind::Dense { in_features, out_features } => {
                    out.push((format!("{n}.weight"), vec![out_features, in_features], true));
                    out.push((format!("{n}.bias"), vec![out_features], false));
                }
                LayerKind::BatchNorm { channels } => {
                    out.push((format!("{n}.gamma"), vec![channels], false));
                    out.push((format!("{n}.beta"), vec![channels], false));
                }
                _ => {}
            }
        }
        out
    }

    /// Non-learnable state (batch-norm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::BatchNorm { channels } => Some([
                    (format!("{}.running_mean", l.name), vec![channels]),
                    (format!("{}.running_var", l.name), vec![channels]),
                ]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Total learnable parameters: conv/dense weights and biases plus
    /// batch-norm affine parameters.
    pub fn count_params(&self) -> u64 {
        self.param_shapes().iter().map(|(_, s, _)| s.iter().product::<usize>() as u64).sum()
    }
}

/// Named miniature architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MiniTeacher,
    StudentPlain,
    StudentDepthwise,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::MiniTeacher, Arch::StudentPlain, Arch::StudentDepthwise];

    pub fn id(&self) -> &'static str {
        match self {
            Arch::MiniTeacher => "mini_teacher",
            Arch::StudentPlain => "student_plain",
            Arch::StudentDepthwise => "student_depthwise",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        Arch::ALL.into_iter().find(|a| a.id() == s)
    }

    pub fn spec(&self, input: InputShape, embedding_dim: usize, num_classes: usize) -> ModelSpec {
        match self {
            Arch::MiniTeacher => mini_teacher(input, embedding_dim, num_classes),
            Arch::StudentPlain => student_plain(input, embedding_dim, num_classes),
            Arch::StudentDepthwise => student_depthwise(input, embedding_dim, num_classes),
        }
    }
}

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
const HEAD_DROPOUT: f64 = 0.2;

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new() -> Self {
        Self { layers: Vec::new() }
    }

    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, groups: usize) -> &mut Self {
        self.layers.push(LayerSpec::new(
            name,
            LayerKind::Conv { in_ch, out_ch, kernel, stride, pad: kernel / 2, groups },
        ));
        self
    }

    fn bn_relu(&mut self, prefix: &str, channels: usize) -> &mut Self {
        self.layers.push(LayerSpec::new(format!("{prefix}_bn"), LayerKind::BatchNorm { channels }));
        self.layers.push(LayerSpec::new(format!("{prefix}_relu"), LayerKind::Relu));
        self
    }

    /// conv-bn-relu-conv-bn, identity shortcut, relu.
    fn residual_block(&mut self, prefix: &str, skip_from: &str, ch: usize) -> &mut Self {
        self.conv(&format!("{prefix}_conv1"), ch, ch, 3, 1, 1);
        self.bn_relu(&format!("{prefix}_1"), ch);
        self.conv(&format!("{prefix}_conv2"), ch, ch, 3, 1, 1);
        self.layers.push(LayerSpec::new(format!("{prefix}_2_bn"), LayerKind::BatchNorm { channels: ch }));
        self.layers.push(LayerSpec::new(
            format!("{prefix}_add"),
            LayerKind::ResidualAdd { skip_from: skip_from.to_string() },
        ));
        self.layers.push(LayerSpec::new(format!("{prefix}_out"), LayerKind::Relu));
        self
    }

    /// Depthwise KxK then pointwise 1x1, each followed by bn-relu.
    fn separable(&mut self, prefix: &str, in_ch: usize, out_ch: usize, stride: usize) -> &mut Self {
        self.conv(&format!("{prefix}_dw"), in_ch, in_ch, 3, stride, in_ch);
        self.bn_relu(&format!("{prefix}_dw"), in_ch);
        self.conv(&format!("{prefix}_pw"), in_ch, out_ch, 1, 1, 1);
        self.bn_relu(&format!("{prefix}_pw"), out_ch);
        self
    }

    fn head(mut self, name: &str, input: InputShape, features: usize, embedding_dim: usize, num_classes: usize) -> ModelSpec {
        let l = &mut self.layers;
        l.push(LayerSpec::new("pool", LayerKind::GlobalAvgPool));
        l.push(LayerSpec::new("head_bn", LayerKind::BatchNorm { channels: features }));
        l.push(LayerSpec::new("head_dropout", LayerKind::Dropout { p: HEAD_DROPOUT }));
        l.push(LayerSpec::new(
            "embedding",
            LayerKind::Dense { in_features: features, out_features: embedding_dim },
        ));
        l.push(LayerSpec::new("embedding_bn", LayerKind::BatchNorm { channels: embedding_dim }));
        l.push(LayerSpec::new(
            "classifier",
            LayerKind::Dense { in_features: embedding_dim, out_features: num_classes },
        ));
        ModelSpec {
            name: name.to_string(),
            input,
            embedding_dim,
            num_classes,
            layers: self.layers,
        }
    }
}

pub const TEACHER_WIDTH: usize = 48;

/// Six convolutions: a strided stem pair followed by two residual blocks.
pub fn mini_teacher(input: InputShape, embedding_dim: usize, num_classes: usize) -> ModelSpec {
    let w = TEACHER_WIDTH;
    let mut b = Builder::new();
    b.conv("stem_conv", input.channels, 16, 3, 2, 1).bn_relu("stem", 16);
    b.conv("down_conv", 16, w, 3, 2, 1).bn_relu("down", w);
    b.residual_block("block1", "down_relu", w);
    b.residual_block("block2", "block1_out", w);
    b.head("mini_teacher", input, w, embedding_dim, num_classes)
}

/// Student channel widths shared by both student variants.
pub const STUDENT_WIDTHS: [usize; 3] = [8, 16, 16];
const STUDENT_STRIDES: [usize; 3] = [2, 2, 1];

/// Three plain 3x3 convolutions.
pub fn student_plain(input: InputShape, embedding_dim: usize, num_classes: usize) -> ModelSpec {
    let mut b = Builder::new();
    let mut in_ch = input.channels;
    for (i, (&out, &stride)) in STUDENT_WIDTHS.iter().zip(&STUDENT_STRIDES).enumerate() {
        let p = format!("conv{}", i + 1);
        b.conv(&p, in_ch, out, 3, stride, 1).bn_relu(&p, out);
        in_ch = out;
    }
    b.head("student_plain", input, in_ch, embedding_dim, num_classes)
}

/// Three depthwise-separable blocks at the same widths as [`student_plain`].
pub fn student_depthwise(input: InputShape, embedding_dim: usize, num_classes: usize) -> ModelSpec {
    let mut b = Builder::new();
    let mut in_ch = input.channels;
    for (i, (&out, &stride)) in STUDENT_WIDTHS.iter().zip(&STUDENT_STRIDES).enumerate() {
        b.separable(&format!("sep{}", i + 1), in_ch, out, stride);
        in_ch = out;
    }
    b.head("student_depthwise", input, in_ch, embedding_dim, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_conv(h: usize, w: usize, in_ch: usize, out_ch: usize, k: usize, groups: usize) -> ModelSpec {
        let mut layers = vec![LayerSpec::new(
            "c",
            LayerKind::Conv { in_ch, out_ch, kernel: k, stride: 1, pad: k / 2, groups },
        )];
        layers.push(LayerSpec::new("pool", LayerKind::GlobalAvgPool));
        layers.push(LayerSpec::new("hbn", LayerKind::BatchNorm { channels: out_ch }));
        layers.push(LayerSpec::new("hd", LayerKind::Dropout { p: 0.0 }));
        layers.push(LayerSpec::new("e", LayerKind::Dense { in_features: out_ch, out_features: 2 }));
        layers.push(LayerSpec::new("ebn", LayerKind::BatchNorm { channels: 2 }));
        layers.push(LayerSpec::new("cls", LayerKind::Dense { in_features: 2, out_features: 2 }));
        ModelSpec {
            name: "t".into(),
            input: InputShape::new(h, w, in_ch),
            embedding_dim: 2,
            num_classes: 2,
            layers,
        }
    }

    #[test]
    fn unit_conv_is_one_madd() {
        let s = one_conv(1, 1, 1, 1, 1, 1);
        assert_eq!(s.count_madds().unwrap().per_layer[0].1, 1);
    }

    #[test]
    fn depthwise_saving() {
        let full = one_conv(7, 7, 64, 64, 3, 1);
        assert_eq!(full.count_madds().unwrap().per_layer[0].1, 1_806_336);
        let dw = one_conv(7, 7, 64, 64, 3, 64);
        assert_eq!(dw.count_madds().unwrap().per_layer[0].1, 28_224);
        let pw = one_conv(7, 7, 64, 64, 1, 1);
        assert_eq!(pw.count_madds().unwrap().per_layer[0].1, 200_704);
    }

    #[test]
    fn indivisible_groups_rejected() {
        let s = one_conv(4, 4, 4, 6, 3, 3);
        let err = s.infer_shapes().unwrap_err().to_string();
        assert!(err.contains("`c`") && err.contains("groups=3"), "{err}");
    }

    #[test]
    fn residual_shape_must_match() {
        let mut s = one_conv(4, 4, 1, 2, 3, 1);
        s.layers.insert(1, LayerSpec::new("bad", LayerKind::ResidualAdd { skip_from: "missing".into() }));
        assert!(s.infer_shapes().is_err());
    }

    #[test]
    fn all_archs_infer_at_32x32() {
        for arch in Arch::ALL {
            let spec = arch.spec(InputShape::default(), DEFAULT_EMBEDDING_DIM, 50);
            let trace = spec.infer_shapes().unwrap();
            assert_eq!(
                trace[0].input,
                ActShape::Spatial { channels: 1, height: 32, width: 32 }
            );
            assert_eq!(spec.layers.last().unwrap().name, "classifier");
        }
    }

    #[test]
    fn teacher_dominates_students() {
        let inp = InputShape::default();
        let t = mini_teacher(inp, 64, 50);
        let p = student_plain(inp, 64, 50);
        let d = student_depthwise(inp, 64, 50);
        assert!(t.count_params() > 10 * p.count_params());
        assert!(t.count_params() > 10 * d.count_params());
        assert!(d.count_madds().unwrap().total < p.count_madds().unwrap().total);
        let convs = t.layers.iter().filter(|l| matches!(l.kind, LayerKind::Conv { .. })).count();
        assert_eq!(convs, 6);
    }
}
