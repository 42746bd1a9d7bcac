//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use eend_core::activity::ActivityMatrix;
use eend_core::autodiff::{Graph, Var};
use eend_core::encoder::EncoderConfig;
use eend_core::model::{EendModel, ModelConfig};
use eend_core::nn::{lstm_cell, multi_head_self_attention, AttentionWeights, LstmWeights};
use eend_core::objective::ExistenceRouting;
use eend_core::eda::ShuffleOrder;
use eend_core::rttm::{rasterize_with_speakers, Annotation};
use eend_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradients smaller than this in norm are compared absolutely; some are
/// exactly zero (the attention key bias cancels in the softmax) and
/// finite differences only return noise for them.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||, GRAD_FLOOR)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(GRAD_FLOOR)
}

const FD_STEP: f64 = 1e-5;

/// Largest relative error, over inputs, between backprop gradients of the
/// scalar `f` and central finite differences.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, (v, t)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(*v, t);
        let mut numeric = vec![0.0; t.numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[j] += FD_STEP;
            let up = eval(&ins);
            ins[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&ins);
            *n = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

/// `sum(w * out)` with a fixed weight tensor, to scalarise an op.
pub fn weighted_sum(g: &mut Graph, out: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

pub fn check_matmul(rng: &mut ChaCha8Rng) -> f64 {
    let a = rand_tensor(rng, 3, 4, -1.0, 1.0);
    let b = rand_tensor(rng, 4, 5, -1.0, 1.0);
    let w = rand_tensor(rng, 3, 5, -1.0, 1.0);
    grad_check(&[a, b], |g, v| {
        let o = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, o, &w)
    })
}

pub fn check_sigmoid(rng: &mut ChaCha8Rng) -> f64 {
    let x = rand_tensor(rng, 4, 3, -4.0, 4.0);
    let w = rand_tensor(rng, 4, 3, -1.0, 1.0);
    grad_check(&[x], |g, v| {
        let o = g.sigmoid(v[0]);
        weighted_sum(g, o, &w)
    })
}

pub fn check_bce(rng: &mut ChaCha8Rng) -> f64 {
    let p = rand_tensor(rng, 5, 3, 0.05, 0.95);
    let target = Tensor::matrix(5, 3, (0..15).map(|_| rng.random_range(0..2) as f64).collect()).unwrap();
    grad_check(&[p], |g, v| g.bce(&target, v[0]).unwrap())
}

pub fn check_layer_norm(rng: &mut ChaCha8Rng) -> f64 {
    let x = rand_tensor(rng, 4, 6, -2.0, 2.0);
    let gain = rand_tensor(rng, 1, 6, 0.5, 1.5);
    let bias = rand_tensor(rng, 1, 6, -0.5, 0.5);
    let w = rand_tensor(rng, 4, 6, -1.0, 1.0);
    grad_check(&[x, gain, bias], |g, v| {
        let o = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(g, o, &w)
    })
}

pub fn check_attention(rng: &mut ChaCha8Rng) -> f64 {
    let d = 6;
    let mut inputs = vec![rand_tensor(rng, 5, d, -1.0, 1.0)];
    for _ in 0..4 {
        inputs.push(rand_tensor(rng, d, d, -0.5, 0.5));
        inputs.push(rand_tensor(rng, 1, d, -0.2, 0.2));
    }
    let w = rand_tensor(rng, 5, d, -1.0, 1.0);
    grad_check(&inputs, |g, v| {
        let aw = AttentionWeights {
            wq: v[1],
            bq: v[2],
            wk: v[3],
            bk: v[4],
            wv: v[5],
            bv: v[6],
            wo: v[7],
            bo: v[8],
        };
        let o = multi_head_self_attention(g, &aw, v[0], 2).unwrap();
        weighted_sum(g, o, &w)
    })
}

pub fn check_lstm_cell(rng: &mut ChaCha8Rng) -> f64 {
    let (input, hidden) = (3, 4);
    let inputs = vec![
        rand_tensor(rng, 1, input, -1.0, 1.0),
        rand_tensor(rng, 1, hidden, -1.0, 1.0),
        rand_tensor(rng, 1, hidden, -1.0, 1.0),
        rand_tensor(rng, input, 4 * hidden, -0.7, 0.7),
        rand_tensor(rng, hidden, 4 * hidden, -0.7, 0.7),
        rand_tensor(rng, 1, 4 * hidden, -0.3, 0.3),
    ];
    let wh = rand_tensor(rng, 1, hidden, -1.0, 1.0);
    let wc = rand_tensor(rng, 1, hidden, -1.0, 1.0);
    grad_check(&inputs, |g, v| {
        let w = LstmWeights {
            w_ih: v[3],
            w_hh: v[4],
            bias: v[5],
            hidden,
        };
        let (h, c) = lstm_cell(g, &w, v[0], v[1], v[2]).unwrap();
        let a = weighted_sum(g, h, &wh);
        let b = weighted_sum(g, c, &wc);
        g.add(a, b).unwrap()
    })
}

pub fn tiny_model(seed: u64) -> EendModel {
    let cfg = ModelConfig::eda(EncoderConfig {
        input_dim: 5,
        dim: 8,
        blocks: 1,
        heads: 2,
        ff_dim: 12,
    });
    EendModel::new(cfg, seed).unwrap()
}

/// Labels with every speaker active at least once.
pub fn random_labels(rng: &mut ChaCha8Rng, speakers: usize, frames: usize) -> Tensor {
    let mut y = Tensor::zeros(speakers, frames);
    for s in 0..speakers {
        for t in 0..frames {
            if rng.random_bool(0.4) {
                y.set(s, t, 1.0);
            }
        }
        let t = rng.random_range(0..frames);
        y.set(s, t, 1.0);
    }
    y
}

/// Gradient check of the full training loss with respect to every model
/// parameter.
pub fn check_model_loss(rng: &mut ChaCha8Rng, routing: ExistenceRouting) -> f64 {
    let mut model = tiny_model(rng.random());
    let t = 6;
    let x = rand_tensor(rng, t, 5, -1.0, 1.0);
    let labels = random_labels(rng, 2, t);
    let order = ShuffleOrder::random(t, rng.random());
    let loss_of = |m: &EendModel| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let l = m.train_loss(&mut g, &p, &x, &labels, &order, routing, 1.0).unwrap();
        g.scalar(l.total)
    };
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let l = model.train_loss(&mut g, &p, &x, &labels, &order, routing, 1.0).unwrap();
    let grads = g.backward(l.total).unwrap();
    let analytic = p.gradients(&g, &grads);
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = model.params.get(&name).unwrap().numel();
        let mut numeric = vec![0.0; n];
        for (j, v) in numeric.iter_mut().enumerate() {
            model.params.get_mut(&name).unwrap().data_mut()[j] += FD_STEP;
            let up = loss_of(&model);
            model.params.get_mut(&name).unwrap().data_mut()[j] -= 2.0 * FD_STEP;
            let down = loss_of(&model);
            model.params.get_mut(&name).unwrap().data_mut()[j] += FD_STEP;
            *v = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic.get(&name).unwrap().data(), &numeric));
    }
    worst
}

/// Random frame-aligned annotation: segments start and end on multiples
/// of `fp` within `frames` frames.
pub fn random_annotation(rng: &mut ChaCha8Rng, id: &str, speakers: usize, frames: usize, fp: f64) -> Annotation {
    let mut a = Annotation::new(id);
    for s in 0..speakers {
        for _ in 0..rng.random_range(0..4) {
            let start = rng.random_range(0..frames);
            let len = rng.random_range(1..=(frames - start).min(12));
            a.push(format!("s{s}"), start as f64 * fp, len as f64 * fp).unwrap();
        }
    }
    a
}

pub fn raster(a: &Annotation, fp: f64, frames: usize) -> ActivityMatrix {
    rasterize_with_speakers(a, &a.speakers(), fp, frames).unwrap()
}

/// All permutations of `0..n` (Heap's algorithm).
pub fn all_perms(n: usize) -> Vec<Vec<usize>> {
    fn go(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            go(k - 1, a, out);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            a.swap(j, k - 1);
        }
    }
    let mut out = Vec::new();
    go(n, &mut (0..n).collect(), &mut out);
    out
}

/// Frame-level `(missed, false alarm, confusion)` in frames, minimised
/// over every one-to-one speaker mapping.
pub fn brute_frame_der(r: &ActivityMatrix, h: &ActivityMatrix) -> (usize, usize, usize, usize) {
    let n = r.speakers().max(h.speakers());
    let frames = r.frames();
    let mut speech = 0;
    let mut missed = 0;
    let mut fa = 0;
    let mut paired = 0;
    for t in 0..frames {
        let nr = r.active_count(t);
        let nh = h.active_count(t);
        speech += nr;
        missed += nr.saturating_sub(nh);
        fa += nh.saturating_sub(nr);
        paired += nr.min(nh);
    }
    let mut best_correct = 0;
    for perm in all_perms(n) {
        let mut correct = 0;
        for (hs, &rs) in perm.iter().enumerate() {
            if hs < h.speakers() && rs < r.speakers() {
                correct += (0..frames).filter(|&t| h.get(hs, t) && r.get(rs, t)).count();
            }
        }
        best_correct = best_correct.max(correct);
    }
    (speech, missed, fa, paired - best_correct)
}

/// Mean over reference speakers of `(FA + MI) / union`, minimised over
/// every assignment; unpaired reference speakers score 1.
pub fn brute_jer(r: &ActivityMatrix, h: &ActivityMatrix) -> f64 {
    let n = r.speakers().max(h.speakers());
    let cost = |rs: usize, hs: usize| {
        let (mut fa, mut mi, mut union) = (0usize, 0usize, 0usize);
        for t in 0..r.frames() {
            let (a, b) = (r.get(rs, t), h.get(hs, t));
            fa += (b && !a) as usize;
            mi += (a && !b) as usize;
            union += (a || b) as usize;
        }
        (fa + mi) as f64 / union as f64
    };
    let mut best = f64::INFINITY;
    for perm in all_perms(n) {
        let total: f64 = (0..r.speakers())
            .map(|rs| if perm[rs] < h.speakers() { cost(rs, perm[rs]) } else { 1.0 })
            .sum();
        best = best.min(total);
    }
    best / r.speakers() as f64
}

/// Exhaustive permutation-free BCE with its own clamped log terms.
pub fn brute_pit(labels: &Tensor, post: &Tensor) -> f64 {
    let (s, t) = labels.dims2().unwrap();
    let h = |y: f64, p: f64| {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    };
    all_perms(s)
        .into_iter()
        .map(|perm| {
            let mut sum = 0.0;
            for (ps, &ls) in perm.iter().enumerate() {
                for f in 0..t {
                    sum += h(labels.at(ls, f), post.at(ps, f));
                }
            }
            sum / (s * t) as f64
        })
        .fold(f64::INFINITY, f64::min)
}
