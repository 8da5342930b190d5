#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shrinknet::autodiff::{BnMode, Tape, Var};
use shrinknet::distiller::kd_loss;
use shrinknet::verifier::ScoreSet;
use shrinknet::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-3)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-3)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> shrinknet::Result<Var> + 'a;

fn scalar_loss(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Var {
    if tape.value(out).numel() == 1 && tape.value(out).ndim() == 0 {
        out
    } else {
        tape.weighted_sum(out, weights.to_vec()).unwrap()
    }
}

fn evaluate(build: &Build<'_>, inputs: &[Tensor<f64>], weights: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let loss = scalar_loss(&mut tape, out, weights);
    tape.value(loss).data()[0]
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over the inputs flagged in `wrt`.
pub fn gradcheck(build: &Build<'_>, inputs: &[Tensor<f64>], wrt: &[bool], rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, w)| tape.leaf(t.clone().with_requires_grad(*w)).unwrap())
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let weights: Vec<f64> = (0..tape.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = scalar_loss(&mut tape, out, &weights);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        if !wrt[k] {
            continue;
        }
        let analytic = tape.grad(vars[k]).unwrap().to_vec();
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            *slot = (evaluate(build, &plus, &weights) - evaluate(build, &minus, &weights)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude at least `gap`, away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, c], data).unwrap()
}

pub const GRAD_OPS: [&str; 17] = [
    "matmul",
    "add",
    "scale",
    "weighted_sum",
    "dense",
    "conv2d",
    "relu",
    "batch_norm_train_2d",
    "batch_norm_train_4d",
    "batch_norm_eval",
    "dropout",
    "global_avg_pool",
    "softmax",
    "log_softmax",
    "cross_entropy_with_softmax",
    "kl_divergence",
    "kd_loss",
];

/// Runs one randomized gradient check of `op` and returns its relative error.
pub fn grad_case(op: &str, rng: &mut ChaCha8Rng) -> f64 {
    let d = |rng: &mut ChaCha8Rng, hi: usize| rng.random_range(1..=hi);
    match op {
        "matmul" => {
            let (m, k, n) = (d(rng, 4), d(rng, 4), d(rng, 4));
            let a = rand_tensor(rng, vec![m, k], -1.0, 1.0);
            let b = rand_tensor(rng, vec![k, n], -1.0, 1.0);
            gradcheck(&|t, v| t.matmul(v[0], v[1]), &[a, b], &[true, true], rng)
        }
        "add" => {
            let shape = vec![d(rng, 3), d(rng, 4)];
            let a = rand_tensor(rng, shape.clone(), -1.0, 1.0);
            let b = rand_tensor(rng, shape, -1.0, 1.0);
            gradcheck(&|t, v| t.add(v[0], v[1]), &[a, b], &[true, true], rng)
        }
        "scale" => {
            let shape = vec![d(rng, 3), d(rng, 4)];
            let x = rand_tensor(rng, shape, -1.0, 1.0);
            let f = rng.random_range(-3.0..3.0);
            gradcheck(&move |t, v| t.scale(v[0], f), &[x], &[true], rng)
        }
        "weighted_sum" => {
            let shape = vec![d(rng, 3), d(rng, 4)];
            let x = rand_tensor(rng, shape, -1.0, 1.0);
            let w: Vec<f64> = (0..x.numel()).map(|_| rng.random_range(-2.0..2.0)).collect();
            gradcheck(&move |t, v| t.weighted_sum(v[0], w.clone()), &[x], &[true], rng)
        }
        "dense" => {
            let (n, fi, fo) = (d(rng, 4), d(rng, 5), d(rng, 4));
            let x = rand_tensor(rng, vec![n, fi], -1.0, 1.0);
            let w = rand_tensor(rng, vec![fo, fi], -1.0, 1.0);
            let b = rand_tensor(rng, vec![fo], -1.0, 1.0);
            gradcheck(&|t, v| t.dense(v[0], v[1], Some(v[2])), &[x, w, b], &[true, true, true], rng)
        }
        "conv2d" => {
            let groups = d(rng, 3);
            let depthwise = rng.random_bool(0.3);
            let (cin_g, cout_g) = if depthwise { (1, 1) } else { (d(rng, 2), d(rng, 2)) };
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let stride = d(rng, 2);
            let pad = rng.random_range(0..=k / 2);
            let h = rng.random_range(k.max(2)..=6);
            let w = rng.random_range(k.max(2)..=6);
            let n = d(rng, 2);
            let x = rand_tensor(rng, vec![n, cin_g * groups, h, w], -1.0, 1.0);
            let wt = rand_tensor(rng, vec![cout_g * groups, cin_g, k, k], -1.0, 1.0);
            let b = rand_tensor(rng, vec![cout_g * groups], -1.0, 1.0);
            gradcheck(
                &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups),
                &[x, wt, b],
                &[true, true, true],
                rng,
            )
        }
        "relu" => {
            let shape = vec![d(rng, 3), d(rng, 5)];
            let x = away_from_zero(rng, shape, 0.01);
            gradcheck(&|t, v| t.relu(v[0]), &[x], &[true], rng)
        }
        "batch_norm_train_2d" | "batch_norm_train_4d" => {
            let c = d(rng, 3);
            let shape = if op.ends_with("2d") {
                vec![rng.random_range(2..=5), c]
            } else {
                vec![d(rng, 2), c, rng.random_range(2..=3), d(rng, 3)]
            };
            let x = rand_tensor(rng, shape, -1.0, 1.0);
            let g = rand_tensor(rng, vec![c], 0.5, 1.5);
            let b = rand_tensor(rng, vec![c], -0.5, 0.5);
            gradcheck(
                &|t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5).map(|r| r.0),
                &[x, g, b],
                &[true, true, true],
                rng,
            )
        }
        "batch_norm_eval" => {
            let c = d(rng, 3);
            let shape = vec![d(rng, 3), c, d(rng, 3), d(rng, 3)];
            let x = rand_tensor(rng, shape, -1.0, 1.0);
            let g = rand_tensor(rng, vec![c], 0.5, 1.5);
            let b = rand_tensor(rng, vec![c], -0.5, 0.5);
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            gradcheck(
                &move |t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5).map(|r| r.0),
                &[x, g, b],
                &[true, true, true],
                rng,
            )
        }
        "dropout" => {
            let shape = vec![d(rng, 4), d(rng, 5)];
            let x = rand_tensor(rng, shape, -1.0, 1.0);
            let p = rng.random_range(0.1..0.7);
            let seed: u64 = rng.random();
            gradcheck(
                &move |t, v| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    t.dropout(v[0], p, Some(&mut r))
                },
                &[x],
                &[true],
                rng,
            )
        }
        "global_avg_pool" => {
            let shape = vec![d(rng, 2), d(rng, 3), d(rng, 4), d(rng, 4)];
            let x = rand_tensor(rng, shape, -1.0, 1.0);
            gradcheck(&|t, v| t.global_avg_pool(v[0]), &[x], &[true], rng)
        }
        "softmax" | "log_softmax" => {
            let shape = vec![d(rng, 3), rng.random_range(2..=5)];
            let x = rand_tensor(rng, shape, -2.0, 2.0);
            if op == "softmax" {
                gradcheck(&|t, v| t.softmax(v[0]), &[x], &[true], rng)
            } else {
                gradcheck(&|t, v| t.log_softmax(v[0]), &[x], &[true], rng)
            }
        }
        "cross_entropy_with_softmax" => {
            let (n, c) = (d(rng, 4), rng.random_range(2..=5));
            let x = rand_tensor(rng, vec![n, c], -2.0, 2.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            gradcheck(&move |t, v| t.cross_entropy_with_softmax(v[0], &labels), &[x], &[true], rng)
        }
        "kl_divergence" => {
            let (n, c) = (d(rng, 3), rng.random_range(2..=5));
            let p = probs(rng, n, c);
            let lq = probs(rng, n, c);
            let lq = Tensor::new(lq.shape().to_vec(), lq.data().iter().map(|v| v.ln()).collect()).unwrap();
            gradcheck(&|t, v| t.kl_divergence(v[0], v[1]), &[p, lq], &[true, true], rng)
        }
        "kd_loss" => {
            let (n, c) = (d(rng, 4), rng.random_range(2..=5));
            let s = rand_tensor(rng, vec![n, c], -3.0, 3.0);
            let teacher = rand_tensor(rng, vec![n, c], -3.0, 3.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let tau = rng.random_range(1.0..8.0);
            let lambda = [0.0, 0.5, 1.0][rng.random_range(0..3)];
            gradcheck(&move |t, v| kd_loss(t, v[0], &teacher, &labels, tau, lambda), &[s], &[true], rng)
        }
        other => panic!("unknown op {other}"),
    }
}

/// Brute-force mask selection: full sort of every unmasked `(score, tensor,
/// index)` triple, lowest `count` pruned.
pub fn brute_select(
    scores: &[(String, Vec<f64>)],
    masks: &BTreeMap<String, Vec<bool>>,
    f: f64,
    global: bool,
) -> BTreeMap<String, Vec<bool>> {
    let mut out: BTreeMap<String, Vec<bool>> = scores
        .iter()
        .map(|(n, s)| (n.clone(), masks.get(n).cloned().unwrap_or(vec![true; s.len()])))
        .collect();
    let alive = |t: usize| -> Vec<(f64, usize, usize)> {
        let (n, s) = &scores[t];
        (0..s.len()).filter(|&i| masks.get(n).is_none_or(|m| m[i])).map(|i| (s[i], t, i)).collect()
    };
    let groups: Vec<Vec<(f64, usize, usize)>> = if global {
        vec![(0..scores.len()).flat_map(alive).collect()]
    } else {
        (0..scores.len()).map(alive).collect()
    };
    for mut g in groups {
        let k = (f * g.len() as f64).floor() as usize;
        g.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, t, i) in &g[..k] {
            out.get_mut(&scores[t].0).unwrap()[i] = false;
        }
    }
    out
}

/// O(n²) reference metrics, counting directly at every candidate threshold.
pub struct BruteMetrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub auc: f64,
}

pub fn brute_counts(s: &ScoreSet, t: f64) -> (usize, usize) {
    let fa = s.impostor.iter().filter(|x| **x >= t).count();
    let fr = s.genuine.iter().filter(|x| **x < t).count();
    (fa, fr)
}

pub fn brute_thresholds(s: &ScoreSet) -> Vec<f64> {
    let mut ts: Vec<f64> = Vec::new();
    for v in s.genuine.iter().chain(&s.impostor) {
        if !ts.contains(v) {
            ts.push(*v);
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.push(f64::INFINITY);
    ts
}

pub fn brute_metrics(s: &ScoreSet) -> BruteMetrics {
    let (ni, ng) = (s.impostor.len() as f64, s.genuine.len() as f64);
    let mut best: Option<(i128, f64, f64)> = None;
    for t in brute_thresholds(s) {
        let (fa, fr) = brute_counts(s, t);
        let gap = (fa as i128 * ng as i128 - fr as i128 * ni as i128).abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, (fa as f64 / ni + fr as f64 / ng) / 2.0, t));
        }
    }
    let (_, eer, eer_threshold) = best.unwrap();
    let mut wins = 0.0;
    for g in &s.genuine {
        for i in &s.impostor {
            if g > i {
                wins += 1.0;
            } else if g == i {
                wins += 0.5;
            }
        }
    }
    BruteMetrics { eer, eer_threshold, auc: wins / (ni * ng) }
}

/// GMR at the lowest threshold whose FMR does not exceed `target`.
pub fn brute_gmr(s: &ScoreSet, target: f64) -> f64 {
    for t in brute_thresholds(s) {
        let (fa, fr) = brute_counts(s, t);
        if fa as f64 / s.impostor.len() as f64 <= target {
            return (s.genuine.len() - fr) as f64 / s.genuine.len() as f64;
        }
    }
    unreachable!("+inf always admits")
}

/// Score sets with deliberate ties drawn from a coarse grid.
pub fn random_scores(rng: &mut ChaCha8Rng, max_n: usize) -> ScoreSet {
    let ng = rng.random_range(1..=max_n / 2);
    let ni = rng.random_range(1..=max_n - ng);
    let grid = rng.random_range(5..200) as f64;
    let shift = rng.random_range(0.0..0.5);
    let draw = |rng: &mut ChaCha8Rng, bias: f64| ((rng.random_range(-1.0..1.0) + bias) * grid).round() / grid;
    let genuine = (0..ng).map(|_| draw(rng, shift)).collect();
    let impostor = (0..ni).map(|_| draw(rng, 0.0)).collect();
    ScoreSet::new(genuine, impostor)
}
