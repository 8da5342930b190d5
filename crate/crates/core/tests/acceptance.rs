//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test --release --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shrinknet::benchhub::time_extraction;
use shrinknet::cli::stages::{self, Prepared};
use shrinknet::cli::RunConfig;
use shrinknet::netlib::format::{self, Role, Storage};
use shrinknet::netlib::{mini_teacher, student_depthwise, student_plain, Arch, CostReport, InputShape, LayerKind, LayerSpec, Model, ModelSpec};
use shrinknet::pruner::{prune_iterative_observed, score, select, PruneConfig, Scope, ScoringBatch, ScoringRule};
use shrinknet::verifier::{compute_auc, compute_eer, gmr_at_fmr, roc_curve, trapezoid_auc, ScoreSet};
use shrinknet::Tensor;

use common::*;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, minutes: f64) -> bool {
    elapsed.as_secs_f64() < minutes * 60.0
}

// ---------------------------------------------------------------- C1

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for op in GRAD_OPS {
        let w = (0..100).map(|_| grad_case(op, &mut rng)).fold(0.0f64, f64::max);
        worst.push((op, w));
    }
    let elapsed = start.elapsed();
    let (op, max) = worst.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = max < 1e-5 && within(elapsed, 2.0);
    outcome(pass, format!("{} ops x 100 cases, max rel err {max:.2e} ({op}), {:.1}s", worst.len(), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- C2

fn small_spec() -> ModelSpec {
    let conv = |name: &str, in_ch, out_ch, groups| LayerSpec::new(name, LayerKind::Conv { in_ch, out_ch, kernel: 3, stride: 1, pad: 1, groups });
    ModelSpec {
        name: "small".into(),
        input: InputShape::new(6, 6, 2),
        embedding_dim: 6,
        num_classes: 5,
        layers: vec![
            conv("c1", 2, 8, 1),
            LayerSpec::new("r1", LayerKind::Relu),
            conv("c2", 8, 8, 4),
            LayerSpec::new("pool", LayerKind::GlobalAvgPool),
            LayerSpec::new("hbn", LayerKind::BatchNorm { channels: 8 }),
            LayerSpec::new("hd", LayerKind::Dropout { p: 0.1 }),
            LayerSpec::new("emb", LayerKind::Dense { in_features: 8, out_features: 6 }),
            LayerSpec::new("ebn", LayerKind::BatchNorm { channels: 6 }),
            LayerSpec::new("cls", LayerKind::Dense { in_features: 6, out_features: 5 }),
        ],
    }
}

/// Small model whose weights are snapped to a grid of `levels` magnitudes
/// and partly pre-masked.
fn small_model(rng: &mut ChaCha8Rng, levels: u32) -> Model {
    let mut m = Model::build(small_spec(), rng.random()).unwrap();
    for name in m.prunable_names() {
        let p = m.params_mut().get_mut(&name).unwrap();
        for v in p.data_mut() {
            *v = rng.random_range(-(levels as i32)..=levels as i32) as f32 / levels as f32;
        }
        let mask: Vec<bool> = (0..p.numel()).map(|_| rng.random::<f64>() > 0.2).collect();
        m.set_mask(&name, mask).unwrap();
    }
    m
}

fn pruning_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut cases = 0;
    let mut mismatches = Vec::new();
    let prunable: usize = {
        let m = Model::build(small_spec(), 0).unwrap();
        m.prunable_names().iter().map(|n| m.param(n).unwrap().numel()).sum()
    };
    let images = Tensor::new(vec![8, 2, 6, 6], (0..8 * 72).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
    for trial in 0..20 {
        let levels = [1, 2, 4, 64][trial % 4];
        let model = small_model(&mut rng, levels);
        for rule in ScoringRule::ALL {
            let batch = rule.needs_batch().then(|| ScoringBatch { images: &images, labels: &labels });
            let scores = score(&model, rule, batch, rng.random()).unwrap();
            for scope in [Scope::Global, Scope::Layerwise] {
                for f in [0.0, 0.1, 0.5, 0.875, 1.0, rng.random::<f64>()] {
                    cases += 1;
                    let got = select(&scores, model.masks(), f, scope).unwrap();
                    let want = brute_select(&scores, model.masks(), f, scope == Scope::Global);
                    if got != want {
                        mismatches.push(format!("{}/{scope:?}/f={f}", rule.id()));
                    }
                }
            }
        }
    }
    // Hand-built ties spanning tensor boundaries.
    let tied: Vec<(String, Vec<f64>)> = vec![
        ("a".into(), vec![1.0, 0.5, 0.5, 2.0, 0.5]),
        ("b".into(), vec![0.5, 0.5, 1.0]),
        ("c".into(), vec![0.5; 4]),
    ];
    for scope in [Scope::Global, Scope::Layerwise] {
        for k in 0..=12 {
            let f = k as f64 / 12.0;
            cases += 1;
            let got = select(&tied, &BTreeMap::new(), f, scope).unwrap();
            if got != brute_select(&tied, &BTreeMap::new(), f, scope == Scope::Global) {
                mismatches.push(format!("ties/{scope:?}/f={f}"));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches.is_empty() && within(elapsed, 1.0),
        format!(
            "{cases} cases on {prunable} prunable weights, {} mismatches{}, {:.1}s",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first {m})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- shared trend state

struct Seeded {
    cfg: RunConfig,
    data: Prepared,
    teacher: Model,
    teacher_eer: f64,
    teacher_secs: f64,
    pruned: Mutex<BTreeMap<(ScoringRule, u32), (Model, f64)>>,
}

fn trend_config(seed: u64) -> RunConfig {
    RunConfig { seed, ..RunConfig::default() }.resolved()
}

fn eer(model: &Model, data: &Prepared) -> f64 {
    compute_eer(&stages::score(model, data).unwrap()).unwrap().eer
}

fn seeded() -> &'static [Seeded] {
    static CACHE: OnceLock<Vec<Seeded>> = OnceLock::new();
    CACHE.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| {
                let cfg = trend_config(s);
                let data = stages::prepare(&cfg).unwrap();
                let t = Instant::now();
                let (teacher, _) = stages::train_teacher(&cfg, &data).unwrap();
                let teacher_secs = t.elapsed().as_secs_f64();
                let teacher_eer = eer(&teacher, &data);
                eprintln!("  seed {s}: teacher EER {teacher_eer:.4}");
                Seeded { cfg, data, teacher, teacher_eer, teacher_secs, pruned: Mutex::new(BTreeMap::new()) }
            })
            .collect()
    })
}

impl Seeded {
    fn pruned(&self, rule: ScoringRule, cr: u32) -> (Model, f64) {
        if let Some(hit) = self.pruned.lock().unwrap().get(&(rule, cr)) {
            return hit.clone();
        }
        let cfg = PruneConfig { rule, target_cr: cr as f64, ..self.cfg.prune.clone() };
        let (model, _) = shrinknet::pruner::prune_iterative(self.teacher.clone(), &cfg, &self.data.fit).unwrap();
        let e = eer(&model, &self.data);
        eprintln!("  seed {}: {} CR {cr} EER {e:.4}", self.cfg.seed, rule.id());
        self.pruned.lock().unwrap().insert((rule, cr), (model.clone(), e));
        (model, e)
    }
}

// ---------------------------------------------------------------- C3

fn algorithm_invariants() -> Outcome {
    let s = &seeded()[0];
    let start = Instant::now();
    let cfg = PruneConfig {
        rule: ScoringRule::LayerwiseMagnitude,
        target_cr: 8.0,
        iterations: 3,
        fine_tune_epochs: 5,
        ..s.cfg.prune.clone()
    };
    let mut nonzero_masked = 0usize;
    let mut regrown = 0usize;
    let mut prev: Option<BTreeMap<String, Vec<bool>>> = None;
    let (model, _) = prune_iterative_observed(s.teacher.clone(), &cfg, &s.data.fit, &mut |_, m| {
        for (name, mask) in m.masks() {
            let p = m.param(name).unwrap();
            nonzero_masked += p.data().iter().zip(mask).filter(|(v, k)| !**k && v.to_bits() != 0).count();
            if let Some(before) = prev.as_ref().and_then(|p| p.get(name)) {
                regrown += mask.iter().zip(before).filter(|(now, was)| **now && !**was).count();
            }
        }
        prev = Some(m.masks().clone());
    })
    .unwrap();
    let elapsed = start.elapsed();
    let (total, nonzero) = model.prunable_counts();
    let off_by = (nonzero as f64 - total as f64 / 8.0).abs();
    let pass = nonzero_masked == 0 && regrown == 0 && off_by <= 1.0 && within(elapsed, 10.0);
    outcome(
        pass,
        format!(
            "masked nonzeros {nonzero_masked}, regrown weights {regrown}, kept {nonzero}/{total} (target {:.1}, cr {:.4}), {:.1}s",
            total as f64 / 8.0,
            total as f64 / nonzero as f64,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- C4

fn with_head(name: &str, input: InputShape, body: Vec<LayerSpec>, features: usize, e: usize, c: usize) -> ModelSpec {
    let mut layers = body;
    layers.extend([
        LayerSpec::new("pool", LayerKind::GlobalAvgPool),
        LayerSpec::new("head_bn", LayerKind::BatchNorm { channels: features }),
        LayerSpec::new("head_dropout", LayerKind::Dropout { p: 0.0 }),
        LayerSpec::new("embedding", LayerKind::Dense { in_features: features, out_features: e }),
        LayerSpec::new("embedding_bn", LayerKind::BatchNorm { channels: e }),
        LayerSpec::new("classifier", LayerKind::Dense { in_features: e, out_features: c }),
    ]);
    ModelSpec { name: name.into(), input, embedding_dim: e, num_classes: c, layers }
}

fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, groups: usize) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Conv { in_ch, out_ch, kernel, stride, pad: kernel / 2, groups })
}

/// Head MAdds and params for `features -> e -> c` (BN affine counted).
fn head_cost(features: u64, e: u64, c: u64) -> (u64, u64) {
    (features * e + e * c, 2 * features + (features * e + e) + 2 * e + (e * c + c))
}

fn cost_model_exactness() -> Outcome {
    let i = InputShape::new;
    // (spec, hand MAdds of the full model, hand params of the full model)
    let mut cases: Vec<(ModelSpec, u64, u64)> = Vec::new();
    let (hm, hp) = head_cost(64, 2, 2);
    cases.push((with_head("full3x3", i(7, 7, 64), vec![conv("c", 64, 64, 3, 1, 1)], 64, 2, 2), 7 * 7 * 64 * 64 * 9 + hm, 64 * 64 * 9 + 64 + hp));
    cases.push((
        with_head("separable", i(7, 7, 64), vec![conv("dw", 64, 64, 3, 1, 64), conv("pw", 64, 64, 1, 1, 1)], 64, 2, 2),
        7 * 7 * 64 * 9 + 7 * 7 * 64 * 64 + hm,
        (64 * 9 + 64) + (64 * 64 + 64) + hp,
    ));
    let (hm, hp) = head_cost(512, 200, 3);
    cases.push((with_head("dense", i(1, 1, 512), vec![], 512, 200, 3), hm, hp));
    let (hm2, hp2) = head_cost(16, 8, 4);
    cases.push((with_head("stem", i(32, 32, 1), vec![conv("s", 1, 16, 3, 2, 1)], 16, 8, 4), 32 * 32 * 16 * 9 + hm2, 16 * 9 + 16 + hp2));
    let (hm, hp) = head_cost(8, 4, 3);
    cases.push((with_head("grouped", i(10, 10, 4), vec![conv("g", 4, 8, 3, 1, 2)], 8, 4, 3), 10 * 10 * 2 * 8 * 9 + hm, 8 * 2 * 9 + 8 + hp));
    let (hm, hp) = head_cost(7, 4, 3);
    cases.push((with_head("pointwise", i(5, 5, 3), vec![conv("p", 3, 7, 1, 1, 1)], 7, 4, 3), 5 * 5 * 3 * 7 + hm, 3 * 7 + 7 + hp));
    let (hm, hp) = head_cost(4, 4, 2);
    cases.push((
        with_head("nonsquare", i(12, 20, 2), vec![conv("a", 2, 4, 5, 2, 1), conv("b", 4, 4, 3, 1, 1)], 4, 4, 2),
        12 * 20 * 2 * 4 * 25 + 6 * 10 * 4 * 4 * 9 + hm,
        (2 * 4 * 25 + 4) + (4 * 4 * 9 + 4) + hp,
    ));
    // Residual block: shortcut and BN cost nothing.
    let (hm, hp) = head_cost(6, 4, 2);
    cases.push((
        with_head(
            "residual",
            i(8, 8, 6),
            vec![
                conv("r1", 6, 6, 3, 1, 1),
                LayerSpec::new("bn", LayerKind::BatchNorm { channels: 6 }),
                LayerSpec::new("relu", LayerKind::Relu),
                conv("r2", 6, 6, 3, 1, 1),
                LayerSpec::new("add", LayerKind::ResidualAdd { skip_from: "r1".into() }),
            ],
            6,
            4,
            2,
        ),
        2 * 8 * 8 * 6 * 6 * 9 + hm,
        2 * (6 * 6 * 9 + 6) + 2 * 6 + hp,
    ));
    let inp = InputShape::default();
    let (hm, hp) = head_cost(48, 64, 50);
    let block = 8 * 8 * 48 * 48 * 9;
    let block_p = 48 * 48 * 9 + 48 + 2 * 48;
    cases.push((
        mini_teacher(inp, 64, 50),
        32 * 32 * 16 * 9 + 16 * 16 * 16 * 48 * 9 + 4 * block + hm,
        (16 * 9 + 16 + 32) + (16 * 48 * 9 + 48 + 96) + 4 * block_p + hp,
    ));
    let (hm, hp) = head_cost(16, 64, 50);
    cases.push((
        student_plain(inp, 64, 50),
        32 * 32 * 8 * 9 + 16 * 16 * 8 * 16 * 9 + 8 * 8 * 16 * 16 * 9 + hm,
        (8 * 9 + 8 + 16) + (8 * 16 * 9 + 16 + 32) + (16 * 16 * 9 + 16 + 32) + hp,
    ));
    let sep = |h: u64, cin: u64, cout: u64| h * h * cin * 9 + h * h * cin * cout;
    let sep_p = |cin: u64, cout: u64| (cin * 9 + cin + 2 * cin) + (cin * cout + cout + 2 * cout);
    cases.push((
        student_depthwise(inp, 64, 50),
        // The depthwise conv sees the block input; the pointwise conv sees
        // the strided output.
        32 * 32 * 9 + 16 * 16 * 8 + 16 * 16 * 8 * 9 + 8 * 8 * 8 * 16 + sep(8, 16, 16) + hm,
        sep_p(1, 8) + sep_p(8, 16) + sep_p(16, 16) + hp,
    ));
    let mut bad = Vec::new();
    for (spec, madds, params) in &cases {
        let got_m = spec.count_madds().unwrap().total;
        let got_p = spec.count_params();
        if got_m != *madds || got_p != *params {
            bad.push(format!("{}: madds {got_m} vs {madds}, params {got_p} vs {params}", spec.name));
        }
    }
    outcome(bad.is_empty(), format!("{} specs, {} mismatches {}", cases.len(), bad.len(), bad.join("; ")))
}

// ---------------------------------------------------------------- C5

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC5);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..200 {
        let s = random_scores(&mut rng, 500);
        let brute = brute_metrics(&s);
        let eer = compute_eer(&s).unwrap();
        let auc = compute_auc(&s).unwrap();
        let trap = trapezoid_auc(&roc_curve(&s).unwrap());
        let mut deltas = vec![(eer.eer - brute.eer).abs(), (auc - brute.auc).abs(), (trap - brute.auc).abs()];
        for target in [0.0, 0.01, 0.1, 0.5] {
            deltas.push((gmr_at_fmr(&s, target).unwrap().0 - brute_gmr(&s, target)).abs());
        }
        let d = deltas.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(d);
        if d >= 1e-9 {
            failures.push(format!("case {case}: delta {d:.3e}"));
        }
        // A strictly increasing transform keeps the order, so every metric
        // must come out the same.
        let t = |x: &f64| (3.0 * x).exp() + 0.5 * x;
        let moved = ScoreSet::new(s.genuine.iter().map(t).collect(), s.impostor.iter().map(t).collect());
        let same = compute_eer(&moved).unwrap().eer == eer.eer
            && compute_auc(&moved).unwrap() == auc
            && [0.01, 0.1].iter().all(|&f| gmr_at_fmr(&moved, f).unwrap().0 == gmr_at_fmr(&s, f).unwrap().0);
        if !same {
            failures.push(format!("case {case}: not invariant under monotone transform"));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && within(elapsed, 1.0),
        format!("200 score sets, max |delta| {worst:.2e}, {} failures {}, {:.1}s", failures.len(), failures.join("; "), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- C6 - C8

fn rule_ranking() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in seeded() {
        let (_, lm) = s.pruned(ScoringRule::LayerwiseMagnitude, 8);
        let (_, rp) = s.pruned(ScoringRule::Random, 8);
        wins += usize::from(lm <= rp);
        rows.push(format!("{:.3}/{:.3}", lm, rp));
    }
    let elapsed = start.elapsed() + Duration::from_secs_f64(seeded().iter().map(|s| s.teacher_secs).sum());
    outcome(
        wins >= 4 && within(elapsed, 30.0),
        format!("LM <= RP at CR 8 in {wins}/5 seeds [LM/RP EER {}], {:.0}s incl. teachers", rows.join(" "), elapsed.as_secs_f64()),
    )
}

fn degradation() -> Outcome {
    let mut ok = 0;
    let mut rows = Vec::new();
    for s in seeded() {
        let (_, e2) = s.pruned(ScoringRule::LayerwiseMagnitude, 2);
        let (_, e8) = s.pruned(ScoringRule::LayerwiseMagnitude, 8);
        let (_, e64) = s.pruned(ScoringRule::LayerwiseMagnitude, 64);
        ok += usize::from(e64 >= e8 && e8 >= 0.9 * e2);
        rows.push(format!("{e2:.3}/{e8:.3}/{e64:.3}"));
    }
    outcome(ok >= 4, format!("EER(64) >= EER(8) >= 0.9 EER(2) in {ok}/5 seeds [CR2/8/64 {}]", rows.join(" ")))
}

fn kd_benefit() -> Outcome {
    let mut ok = 0;
    let mut rows = Vec::new();
    for s in seeded() {
        let pair = stages::train_students(&s.cfg, Arch::StudentPlain, &s.teacher, &s.data).unwrap();
        let plain = eer(&pair.plain.0, &s.data);
        let kd = eer(&pair.kd.0, &s.data);
        eprintln!("  seed {}: student plain EER {plain:.4}, KD EER {kd:.4} (teacher {:.4})", s.cfg.seed, s.teacher_eer);
        ok += usize::from(kd <= plain);
        rows.push(format!("{kd:.3}/{plain:.3}"));
    }
    outcome(ok >= 4, format!("KD <= plain in {ok}/5 seeds [KD/plain EER {}]", rows.join(" ")))
}

// ---------------------------------------------------------------- C9

fn latency() -> Outcome {
    let s = &seeded()[0];
    let dir = tempfile::tempdir().unwrap();
    let (pruned, _) = s.pruned(ScoringRule::LayerwiseMagnitude, 8);
    let path = dir.path().join("pruned_dense.nnzm");
    format::save(&pruned, &path, Storage::Dense).unwrap();
    let pruned = format::load(&path).unwrap();
    let student = stages::build(&s.cfg, Arch::StudentPlain, &s.data).unwrap();
    let batch = s.data.val.batch(&[0]);
    shrinknet::benchhub::pin_current_thread();
    let time = |m: &Model, name: &str, storage| time_extraction(m, name, storage, &batch, 5, 30).unwrap().mean_ms;
    let teacher_ms = time(&s.teacher, "teacher", Storage::Dense);
    let pruned_ms = time(&pruned, "pruned", Storage::Dense);
    let student_ms = time(&student, "student", Storage::Dense);
    let rel = pruned_ms / teacher_ms;
    outcome(
        student_ms < teacher_ms && (0.85..=1.15).contains(&rel),
        format!("mean ET teacher {teacher_ms:.3} ms, LM-pruned dense {pruned_ms:.3} ms ({rel:.3}x), student {student_ms:.3} ms"),
    )
}

// ---------------------------------------------------------------- C10

/// File size from the layout: preamble, header, then per-tensor payloads.
fn expected_file_bytes(model: &Model, bytes: &[u8]) -> u64 {
    let (header, _) = format::read_header(bytes).unwrap();
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as u64;
    let mut total = 4 + 2 + 4 + header_len;
    for entry in &header.tensors {
        let numel: u64 = entry.shape.iter().product::<usize>() as u64;
        total += match (entry.role, entry.storage) {
            (Role::Param, Storage::Sparse) => {
                let nnz = model.effective(&entry.name).unwrap().iter().filter(|v| **v != 0.0).count() as u64;
                8 + nnz * 4 + nnz * 4
            }
            (_, Storage::Dense) => 4 * numel + if entry.masked { numel.div_ceil(8) } else { 0 },
            (Role::Buffer, Storage::Sparse) => unreachable!("buffers are dense"),
        };
    }
    total
}

fn storage_accounting() -> Outcome {
    let s = &seeded()[0];
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for rule in [ScoringRule::LayerwiseMagnitude, ScoringRule::Random] {
        let (model, _) = s.pruned(rule, 8);
        let sparse_path = dir.path().join(format!("{}.nnzm", rule.id()));
        let dense_path = dir.path().join(format!("{}_dense.nnzm", rule.id()));
        let sparse_len = format::save(&model, &sparse_path, Storage::Sparse).unwrap();
        let dense_len = format::save(&model, &dense_path, Storage::Dense).unwrap();
        let bytes = std::fs::read(&sparse_path).unwrap();
        let expect = expected_file_bytes(&model, &bytes);
        let cost = CostReport::of(&model).unwrap();
        let hand_sparse: u64 = model
            .params()
            .iter()
            .map(|(n, t)| match model.mask(n) {
                Some(_) => {
                    let nnz = model.effective(n).unwrap().iter().filter(|v| **v != 0.0).count() as u64;
                    8 + 8 * nnz
                }
                None => 4 * t.numel() as u64,
            })
            .sum();
        let ratio = cost.dense_bytes as f64 / cost.sparse_bytes as f64;
        let file_ratio = dense_len as f64 / sparse_len as f64;
        pass &= sparse_len == expect && bytes.len() as u64 == sparse_len && cost.sparse_bytes == hand_sparse;
        if rule == ScoringRule::Random {
            pass &= ratio >= 3.0 && file_ratio >= 3.0;
        }
        notes.push(format!(
            "{}: file {sparse_len} B vs formula {expect} B, sparse_bytes {} vs {hand_sparse}, dense/sparse {ratio:.2} (files {file_ratio:.2})",
            rule.id(),
            cost.sparse_bytes
        ));
    }
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- C11

fn run_pipeline(workspace: &Path) -> Duration {
    let start = Instant::now();
    for cmd in ["datagen", "train", "prune", "distill", "eval", "report"] {
        let args = ["shrinknet", "--quiet", "--set", "seed=11", "--workspace", workspace.to_str().unwrap(), cmd];
        let code = shrinknet::cli::run(args);
        assert_eq!(code, 0, "{cmd} exited with {code}");
    }
    start.elapsed()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = run_pipeline(a.path());
    let tb = run_pipeline(b.path());
    let (fa, fb) = (tree(a.path()), tree(b.path()));
    let timing = |name: &str| name.starts_with("bench") || name.ends_with(".lock");
    let names: Vec<&String> = fa.keys().chain(fb.keys()).filter(|n| !timing(n)).collect();
    let differing: Vec<&String> = names.iter().filter(|n| fa.get(**n) != fb.get(**n)).cloned().collect();
    let slowest = ta.max(tb);
    outcome(
        differing.is_empty() && !fa.is_empty() && within(slowest, 30.0),
        format!(
            "{} artifacts compared, {} differ {:?}, runs {:.0}s / {:.0}s",
            fa.len(),
            differing.len(),
            differing,
            ta.as_secs_f64(),
            tb.as_secs_f64()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("C1 gradient correctness", gradient_correctness),
        ("C2 pruning oracle equivalence", pruning_oracle),
        ("C3 iterative pruning invariants", algorithm_invariants),
        ("C4 cost model exactness", cost_model_exactness),
        ("C5 metric oracle equivalence", metric_oracle),
        ("C6 trend: pruning rule ranking", rule_ranking),
        ("C7 trend: degradation with compression", degradation),
        ("C8 trend: distillation benefit", kd_benefit),
        ("C9 latency observation", latency),
        ("C10 storage accounting", storage_accounting),
        ("C11 end-to-end determinism", determinism),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_ref().is_some_and(|o| !name.to_lowercase().contains(&o.to_lowercase())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!result.pass);
        println!(
            "{} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
