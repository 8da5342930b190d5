//! Deterministic synthetic identity images with sessions, lighting
//! conditions and stacks, plus subject-disjoint splitting.
//!
//! Each subject owns a prototype image built from random 2-D Gaussian bumps.
//! A sample is `clamp(brightness(condition) · prototype + shift(subject,
//! session) + noise, 0, 1)`, where the session shift is a smooth random field.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::netlib::{InputShape, Model};
use crate::seed;
use crate::tensor::Tensor;
use crate::verifier::TemplateStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_subjects: u32,
    pub sessions: u32,
    pub stacks_per_session: u32,
    pub stack_size: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_conditions: u32,
    /// Brightness multiplier per lighting condition.
    pub brightness: Vec<f64>,
    /// Number of Gaussian bumps per prototype.
    pub prototype_complexity: u32,
    pub session_shift_scale: f64,
    pub pixel_noise_scale: f64,
    /// Horizontally flip a random half of the stacks.
    pub mirror_augment: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_subjects: 70,
            sessions: 2,
            stacks_per_session: 2,
            stack_size: 5,
            height: 32,
            width: 32,
            channels: 1,
            n_conditions: 3,
            brightness: vec![1.0, 0.7, 0.4],
            prototype_complexity: 8,
            session_shift_scale: 0.35,
            pixel_noise_scale: 0.15,
            mirror_augment: false,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("sessions", self.sessions),
            ("stacks_per_session", self.stacks_per_session),
            ("stack_size", self.stack_size),
            ("n_conditions", self.n_conditions),
            ("prototype_complexity", self.prototype_complexity),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v < 1) {
            return Err(Error::Dataset(format!("{name} must be >= 1")));
        }
        if self.height < 1 || self.width < 1 || self.channels < 1 {
            return Err(Error::Dataset("image dimensions must be >= 1".into()));
        }
        if self.sessions < 2 {
            return Err(Error::Dataset("sessions must be >= 2 for the verification protocol".into()));
        }
        if self.brightness.len() != self.n_conditions as usize {
            return Err(Error::Dataset(format!(
                "brightness has {} entries for {} conditions",
                self.brightness.len(),
                self.n_conditions
            )));
        }
        if self.brightness.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Dataset("brightness multipliers must be finite and >= 0".into()));
        }
        if !(self.session_shift_scale >= 0.0 && self.pixel_noise_scale >= 0.0) {
            return Err(Error::Dataset("noise scales must be >= 0".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape::new(self.height, self.width, self.channels)
    }

    pub fn total_samples(&self) -> usize {
        (self.n_subjects * self.sessions * self.stacks_per_session * self.stack_size) as usize
    }
}

/// One image with its labels. Pixels are `H × W × C`, row-major, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: u32,
    pub session_id: u32,
    pub condition_id: u32,
    pub stack_id: u32,
    pub index_in_stack: u32,
    pub image: Vec<f32>,
}

impl Sample {
    pub fn file_name(&self) -> String {
        format!(
            "s{}_e{}_c{}_k{}_i{}.f32",
            self.subject_id, self.session_id, self.condition_id, self.stack_id, self.index_in_stack
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn subjects(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.subject_id).collect()
    }

    pub fn filter_subjects(&self, keep: &BTreeSet<u32>) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: self.samples.iter().filter(|s| keep.contains(&s.subject_id)).cloned().collect(),
        }
    }
}

/// Sum of `count` Gaussian bumps with random centers, widths and signed amplitudes.
fn bump_field(rng: &mut ChaCha8Rng, h: usize, w: usize, count: u32) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    let max_sigma = (0.2 * h.min(w) as f64).max(1.5);
    for _ in 0..count {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sigma = rng.random_range(1.5..=max_sigma);
        let amp = rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let denom = 2.0 * sigma * sigma;
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                field[y * w + x] += amp * (-d2 / denom).exp();
            }
        }
    }
    field
}

fn normalize_unit(field: &mut [f64]) {
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in field.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

fn generate_subject(spec: &DatasetSpec, subject: u32) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &format!("subject-{subject}")));
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let prototype: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut f = bump_field(&mut rng, h, w, spec.prototype_complexity);
            normalize_unit(&mut f);
            f
        })
        .collect();
    let noise = Normal::new(0.0, spec.pixel_noise_scale.max(0.0)).expect("finite sigma");
    let mut out = Vec::new();
    for session in 0..spec.sessions {
        let shift: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let mut f = bump_field(&mut rng, h, w, spec.prototype_complexity.div_ceil(2));
                let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if peak > 0.0 {
                    f.iter_mut().for_each(|v| *v *= spec.session_shift_scale / peak);
                }
                f
            })
            .collect();
        for stack in 0..spec.stacks_per_session {
            let condition = rng.random_range(0..spec.n_conditions);
            let mirrored = spec.mirror_augment && rng.random_bool(0.5);
            let bright = spec.brightness[condition as usize];
            for index in 0..spec.stack_size {
                let mut image = vec![0.0f32; h * w * c];
                for y in 0..h {
                    for x in 0..w {
                        let sx = if mirrored { w - 1 - x } else { x };
                        for ch in 0..c {
                            let base = bright * prototype[ch][y * w + sx] + shift[ch][y * w + sx];
                            let n = if spec.pixel_noise_scale > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            image[(y * w + x) * c + ch] = (base + n).clamp(0.0, 1.0) as f32;
                        }
                    }
                }
                out.push(Sample {
                    subject_id: subject,
                    session_id: session,
                    condition_id: condition,
                    stack_id: stack,
                    index_in_stack: index,
                    image,
                });
            }
        }
    }
    out
}

/// Generates the full dataset, ordered by subject, session, stack and index.
/// Each subject draws from its own derived seed.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.n_subjects).flat_map(|s| generate_subject(spec, s)).collect();
    Ok(Dataset { spec: spec.clone(), samples })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train_subjects: BTreeSet<u32>,
    pub eval_subjects: BTreeSet<u32>,
}

/// Shuffles the subject list and assigns `round(n · train_fraction)` subjects
/// to training and the rest to evaluation.
pub fn split_subjects(subjects: &BTreeSet<u32>, train_fraction: f64, seed: u64) -> Result<SubjectSplit> {
    let n = subjects.len();
    if n < 2 {
        return Err(Error::Dataset(format!("need >= 2 subjects to split, have {n}")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Dataset(format!("train_fraction {train_fraction} outside [0, 1]")));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Dataset(format!(
            "train_fraction {train_fraction} leaves an empty side ({n_train} of {n} subjects)"
        )));
    }
    let mut order: Vec<u32> = subjects.iter().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SubjectSplit {
        train_subjects: order[..n_train].iter().copied().collect(),
        eval_subjects: order[n_train..].iter().copied().collect(),
    })
}

pub fn split_subject_independent(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset, SubjectSplit)> {
    let split = split_subjects(&dataset.subjects(), train_fraction, seed)?;
    Ok((
        dataset.filter_subjects(&split.train_subjects),
        dataset.filter_subjects(&split.eval_subjects),
        split,
    ))
}

/// Images converted to NCHW with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub shape: InputShape,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// NCHW batch for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let per = self.shape.numel();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![indices.len(), self.shape.channels, self.shape.height, self.shape.width], data)
            .expect("consistent sizes")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Converts an `H × W × C` image to `C × H × W`.
pub fn to_chw(image: &[f32], shape: InputShape) -> Vec<f32> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = image[(y * w + x) * c + ch];
            }
        }
    }
    out
}

/// Training images labelled by the rank of their subject id, split into a
/// fit part and a closed-set validation part. Validation holds the last stack
/// of the last session of every subject (or nothing when each session has a
/// single stack).
pub fn training_views(train: &Dataset) -> Result<(LabeledImages, LabeledImages)> {
    let class_of: BTreeMap<u32, usize> = train.subjects().into_iter().enumerate().map(|(i, s)| (s, i)).collect();
    if class_of.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let shape = train.spec.input_shape();
    let last_session = train.spec.sessions - 1;
    let last_stack = train.spec.stacks_per_session - 1;
    let hold_out = train.spec.stacks_per_session > 1;
    let mut fit = LabeledImages { shape, images: Vec::new(), labels: Vec::new() };
    let mut val = fit.clone();
    for s in &train.samples {
        let target = if hold_out && s.session_id == last_session && s.stack_id == last_stack {
            &mut val
        } else {
            &mut fit
        };
        target.images.extend(to_chw(&s.image, shape));
        target.labels.push(class_of[&s.subject_id]);
    }
    Ok((fit, val))
}

/// Embeds every evaluation stack. Subjects seen in fewer than two sessions
/// are dropped with a warning.
pub fn to_stacks(eval: &Dataset, model: &Model) -> Result<Vec<TemplateStack>> {
    let shape = eval.spec.input_shape();
    let mut groups: BTreeMap<(u32, u32, u32), Vec<&Sample>> = BTreeMap::new();
    for s in &eval.samples {
        groups.entry((s.subject_id, s.session_id, s.stack_id)).or_default().push(s);
    }
    let mut sessions: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for (subject, session, _) in groups.keys() {
        sessions.entry(*subject).or_default().insert(*session);
    }
    let mut stacks = Vec::new();
    for ((subject, session, stack), mut members) in groups {
        if sessions[&subject].len() < 2 {
            log::warn!("subject {subject} has a single session; dropped from evaluation");
            continue;
        }
        members.sort_by_key(|s| s.index_in_stack);
        let mut data = Vec::with_capacity(members.len() * shape.numel());
        for s in &members {
            data.extend(to_chw(&s.image, shape));
        }
        let batch = Tensor::new(vec![members.len(), shape.channels, shape.height, shape.width], data)?;
        let emb = model.forward_embed(&batch, None)?;
        let dim = emb.shape()[1];
        let embeddings = emb.data().chunks(dim).map(<[f32]>::to_vec).collect();
        stacks.push(TemplateStack::new(subject, session, stack, embeddings)?);
    }
    Ok(stacks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub spec: DatasetSpec,
    pub split: SubjectSplit,
    pub train_fraction: f64,
}

/// Writes `meta.json` and one little-endian f32 blob per sample.
pub fn save_dir(dataset: &Dataset, split: &SubjectSplit, train_fraction: f64, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        spec: dataset.spec.clone(),
        split: split.clone(),
        train_fraction,
    };
    json::write_sorted(dir.join("meta.json"), &meta)?;
    let mut names = vec!["meta.json".to_string()];
    for s in &dataset.samples {
        let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        let name = s.file_name();
        std::fs::write(dir.join(&name), bytes)?;
        names.push(name);
    }
    Ok(names)
}

fn parse_name(name: &str) -> Option<[u32; 5]> {
    let stem = name.strip_suffix(".f32")?;
    let mut out = [0u32; 5];
    let prefixes = ['s', 'e', 'c', 'k', 'i'];
    let parts: Vec<&str> = stem.split('_').collect();
    if parts.len() != 5 {
        return None;
    }
    for ((slot, part), p) in out.iter_mut().zip(parts).zip(prefixes) {
        *slot = part.strip_prefix(p)?.parse().ok()?;
    }
    Some(out)
}

pub fn load_dir(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    meta.spec.validate()?;
    let per = meta.spec.height * meta.spec.width * meta.spec.channels;
    let mut samples = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some([subject, session, condition, stack, index]) = parse_name(&name) else { continue };
        let bytes = std::fs::read(entry.path())?;
        if bytes.len() != per * 4 {
            return Err(Error::Dataset(format!("{name}: {} bytes, expected {}", bytes.len(), per * 4)));
        }
        samples.push(Sample {
            subject_id: subject,
            session_id: session,
            condition_id: condition,
            stack_id: stack,
            index_in_stack: index,
            image: bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
        });
    }
    samples.sort_by_key(|s| (s.subject_id, s.session_id, s.stack_id, s.index_in_stack));
    if samples.len() != meta.spec.total_samples() {
        return Err(Error::Dataset(format!(
            "found {} sample files, spec implies {}",
            samples.len(),
            meta.spec.total_samples()
        )));
    }
    Ok((Dataset { spec: meta.spec.clone(), samples }, meta))
}
