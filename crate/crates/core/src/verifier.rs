//! Subject-independent verification: cosine matching of template/probe
//! stacks, genuine/impostor score generation and EER / GMR@FMR / AUC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::{deserialize_float_or_sentinel, float_or_sentinel};

/// Embeddings of one stack of consecutive images of a subject.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateStack {
    pub subject_id: u32,
    pub session_id: u32,
    pub stack_id: u32,
    pub embeddings: Vec<Vec<f32>>,
}

impl TemplateStack {
    pub fn new(subject_id: u32, session_id: u32, stack_id: u32, embeddings: Vec<Vec<f32>>) -> Result<Self> {
        let s = Self { subject_id, session_id, stack_id, embeddings };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .embeddings
            .first()
            .ok_or_else(|| Error::Protocol(format!("empty stack for subject {}", self.subject_id)))?;
        if self.embeddings.iter().any(|e| e.len() != first.len() || e.iter().any(|v| !v.is_finite())) {
            return Err(Error::Protocol(format!(
                "stack of subject {} has ragged or non-finite embeddings",
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// Acceptance rule and stack aggregation used for matching.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// Accept when `score ≥ threshold`; score is the mean cosine similarity
    /// over all template × probe embedding pairs.
    #[default]
    MeanOfAllPairs,
}

/// Cosine similarity `u·v / (|u||v|)`, computed in f64.
pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            detail: format!("dimensions {} and {}", u.len(), v.len()),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (*a as f64, *b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector is undefined"));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Mean cosine similarity over every template × probe embedding pair. The
/// pair scores are summed in sorted order, so swapping the two stacks gives
/// a bit-identical result.
pub fn match_score(template: &TemplateStack, probe: &TemplateStack) -> Result<f64> {
    template.validate()?;
    probe.validate()?;
    let mut pairs = Vec::with_capacity(template.embeddings.len() * probe.embeddings.len());
    for t in &template.embeddings {
        for p in &probe.embeddings {
            pairs.push(cosine_sim(t, p)?);
        }
    }
    pairs.sort_by(f64::total_cmp);
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Genuine,
    Impostor,
}

/// One template/probe comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub label: PairLabel,
    pub subject_a: u32,
    pub subject_b: u32,
    pub session_a: u32,
    pub session_b: u32,
    pub score: f64,
}

/// Labeled similarity scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    /// Pair provenance, in generation order (empty for hand-built sets).
    pub pairs: Vec<ScoredPair>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        Self { genuine, impostor, pairs: Vec::new() }
    }

    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::invalid(format!(
                "need genuine and impostor scores, have {} / {}",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(())
    }

    /// Score dump with header `label,subject_a,subject_b,session_a,session_b,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,subject_a,subject_b,session_a,session_b,score\n");
        for p in &self.pairs {
            let label = match p.label {
                PairLabel::Genuine => "genuine",
                PairLabel::Impostor => "impostor",
            };
            let _ = writeln!(out, "{label},{},{},{},{},{}", p.subject_a, p.subject_b, p.session_a, p.session_b, p.score);
        }
        out
    }
}

/// Builds genuine and impostor scores under the open-set protocol.
///
/// Templates are each subject's stacks from the earliest session present in
/// the data; probes are stacks from later sessions. Every template is compared
/// with every probe. Subjects without both a template and a probe session are
/// skipped with a warning.
pub fn gen_protocol(stacks: &[TemplateStack], training_subjects: &BTreeSet<u32>) -> Result<ScoreSet> {
    if let Some(s) = stacks.iter().find(|s| training_subjects.contains(&s.subject_id)) {
        return Err(Error::Protocol(format!(
            "subject {} appears in the training set; evaluation must be subject-disjoint",
            s.subject_id
        )));
    }
    let first_session = stacks
        .iter()
        .map(|s| s.session_id)
        .min()
        .ok_or_else(|| Error::Protocol("no stacks to evaluate".into()))?;
    let mut by_subject: BTreeMap<u32, (Vec<&TemplateStack>, Vec<&TemplateStack>)> = BTreeMap::new();
    for s in stacks {
        let e = by_subject.entry(s.subject_id).or_default();
        if s.session_id == first_session {
            e.0.push(s);
        } else {
            e.1.push(s);
        }
    }
    by_subject.retain(|subject, (templates, probes)| {
        let keep = !templates.is_empty() && !probes.is_empty();
        if !keep {
            log::warn!("subject {subject} lacks a template or probe session; skipped");
        }
        keep
    });
    if by_subject.len() < 2 {
        return Err(Error::Protocol(format!(
            "need >= 2 subjects with two sessions, have {}",
            by_subject.len()
        )));
    }
    let mut set = ScoreSet::default();
    for (templates, _) in by_subject.values() {
        for t in templates {
            for (_, probes) in by_subject.values() {
                for p in probes {
                    let score = match_score(t, p)?;
                    let label = if t.subject_id == p.subject_id {
                        set.genuine.push(score);
                        PairLabel::Genuine
                    } else {
                        set.impostor.push(score);
                        PairLabel::Impostor
                    };
                    set.pairs.push(ScoredPair {
                        label,
                        subject_a: t.subject_id,
                        subject_b: p.subject_id,
                        session_a: t.session_id,
                        session_b: p.session_id,
                        score,
                    });
                }
            }
        }
    }
    Ok(set)
}

/// Sorted score lists supporting O(log n) rate queries at any threshold.
struct Sweep {
    genuine: Vec<f64>,
    impostor: Vec<f64>,
    /// Unique observed scores ascending, followed by `+∞`.
    thresholds: Vec<f64>,
}

impl Sweep {
    fn new(scores: &ScoreSet) -> Result<Self> {
        scores.check()?;
        let mut genuine = scores.genuine.clone();
        let mut impostor = scores.impostor.clone();
        genuine.sort_by(f64::total_cmp);
        impostor.sort_by(f64::total_cmp);
        let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.push(f64::INFINITY);
        Ok(Self { genuine, impostor, thresholds })
    }

    /// Fraction of `sorted` strictly below `t`.
    fn below(sorted: &[f64], t: f64) -> f64 {
        sorted.partition_point(|s| *s < t) as f64 / sorted.len() as f64
    }

    fn fmr(&self, t: f64) -> f64 {
        self.error_counts(t).0 as f64 / self.impostor.len() as f64
    }

    fn fnmr(&self, t: f64) -> f64 {
        Self::below(&self.genuine, t)
    }

    fn gmr(&self, t: f64) -> f64 {
        let accepted = self.genuine.len() - self.genuine.partition_point(|s| *s < t);
        accepted as f64 / self.genuine.len() as f64
    }

    /// `(impostors accepted, genuine rejected)` at threshold `t`.
    fn error_counts(&self, t: f64) -> (usize, usize) {
        let accepted = self.impostor.len() - self.impostor.partition_point(|s| *s < t);
        (accepted, self.genuine.partition_point(|s| *s < t))
    }
}

/// Equal error rate and the threshold at which it was read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// EER from a discrete sweep: at the threshold minimizing `|FMR − FNMR|`
/// (ties to the lower threshold), `EER = (FMR + FNMR) / 2`.
pub fn compute_eer(scores: &ScoreSet) -> Result<EerPoint> {
    let sweep = Sweep::new(scores)?;
    let (ni, ng) = (sweep.impostor.len() as u128, sweep.genuine.len() as u128);
    let mut best: Option<(u128, usize, usize, f64)> = None;
    for &t in &sweep.thresholds {
        let (fa, fr) = sweep.error_counts(t);
        // |fa/ni − fr/ng| scaled by ni·ng, compared exactly.
        let gap = (fa as u128 * ng).abs_diff(fr as u128 * ni);
        if best.is_none_or(|(g, ..)| gap < g) {
            best = Some((gap, fa, fr, t));
        }
    }
    let (_, fa, fr, threshold) = best.expect("at least one threshold");
    let eer = (fa as f64 / ni as f64 + fr as f64 / ng as f64) / 2.0;
    Ok(EerPoint { eer, threshold })
}

/// GMR at a target FMR: the smallest threshold whose FMR does not exceed the
/// target, and the fraction of genuine scores accepted there.
pub fn gmr_at_fmr(scores: &ScoreSet, target: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::invalid(format!("FMR target {target} outside [0, 1]")));
    }
    let sweep = Sweep::new(scores)?;
    // FMR is non-increasing in the threshold, so the admissible set is a suffix.
    let idx = sweep.thresholds.partition_point(|t| sweep.fmr(*t) > target);
    let t = sweep.thresholds[idx];
    Ok((sweep.gmr(t), t))
}

pub fn compute_gmr_at_fmr(scores: &ScoreSet, targets: &[f64]) -> Result<BTreeMap<String, f64>> {
    targets
        .iter()
        .map(|t| Ok((fmr_key(*t), gmr_at_fmr(scores, *t)?.0)))
        .collect()
}

pub fn fmr_key(target: f64) -> String {
    format!("{target}")
}

/// AUC as the Mann-Whitney statistic `P(g > i) + ½·P(g = i)`.
pub fn compute_auc(scores: &ScoreSet) -> Result<f64> {
    let sweep = Sweep::new(scores)?;
    let mut wins = 0.0f64;
    for &g in &sweep.genuine {
        let lower = sweep.impostor.partition_point(|s| *s < g);
        let upper = sweep.impostor.partition_point(|s| *s <= g);
        wins += lower as f64 + 0.5 * (upper - lower) as f64;
    }
    Ok(wins / (sweep.genuine.len() as f64 * sweep.impostor.len() as f64))
}

/// ROC points `(fmr, gmr)` with their thresholds, from `+∞` down to the lowest
/// observed score, so FMR is nondecreasing.
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<(f64, f64, f64)>> {
    let sweep = Sweep::new(scores)?;
    Ok(sweep
        .thresholds
        .iter()
        .rev()
        .map(|&t| (sweep.fmr(t), 1.0 - sweep.fnmr(t), t))
        .collect())
}

/// Trapezoidal area under [`roc_curve`].
pub fn trapezoid_auc(roc: &[(f64, f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(serialize_with = "float_or_sentinel", deserialize_with = "deserialize_float_or_sentinel")]
    pub eer: f64,
    #[serde(serialize_with = "serialize_threshold_map", deserialize_with = "deserialize_threshold_map")]
    pub gmr_at: BTreeMap<String, f64>,
}

fn serialize_threshold_map<S: serde::Serializer>(m: &BTreeMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &SentinelF64(*v))?;
    }
    map.end()
}

fn deserialize_threshold_map<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<String, f64>, D::Error> {
    let raw: BTreeMap<String, SentinelF64> = BTreeMap::deserialize(d)?;
    Ok(raw.into_iter().map(|(k, v)| (k, v.0)).collect())
}

struct SentinelF64(f64);

impl<'de> Deserialize<'de> for SentinelF64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        deserialize_float_or_sentinel(d).map(SentinelF64)
    }
}

impl Serialize for SentinelF64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        float_or_sentinel(&self.0, s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub eer: f64,
    pub gmr_at: BTreeMap<String, f64>,
    pub auc: f64,
    /// `[fmr, gmr]` points.
    pub roc: Vec<[f64; 2]>,
    pub thresholds: Thresholds,
}

impl VerificationReport {
    pub fn compute(scores: &ScoreSet, fmr_targets: &[f64]) -> Result<Self> {
        let eer = compute_eer(scores)?;
        let mut gmr_at = BTreeMap::new();
        let mut gmr_thresholds = BTreeMap::new();
        for &target in fmr_targets {
            let (gmr, t) = gmr_at_fmr(scores, target)?;
            gmr_at.insert(fmr_key(target), gmr);
            gmr_thresholds.insert(fmr_key(target), t);
        }
        let roc = roc_curve(scores)?.into_iter().map(|(f, g, _)| [f, g]).collect();
        Ok(Self {
            eer: eer.eer,
            gmr_at,
            auc: compute_auc(scores)?,
            roc,
            thresholds: Thresholds {
                eer: eer.threshold,
                gmr_at: gmr_thresholds,
            },
        })
    }
}
