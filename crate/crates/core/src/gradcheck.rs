//! Central finite-difference checks of every analytic backward pass.
//!
//! Each suite draws random shapes and values, reduces the component output
//! with a random linear functional, and compares the analytic gradient of
//! that scalar with `(L(x + h) - L(x - h)) / 2h` for every parameter and
//! input coordinate. Coordinates whose perturbation flips a ReLU (or a
//! smooth-L1 / clamp branch) are non-differentiable there and are counted
//! as skipped rather than compared.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoding::{BoxTarget, CurveTarget, BOX_TARGET_LEN, CURVE_TARGET_LEN};
use crate::head::{branch_loss_grad, BranchGrad, BranchOutput, DetectionHead, HeadConfig, PfamMode, PfamPlacement};
use crate::nn::{relu, relu_backward, sigmoid, sigmoid_backward, softmax2, softmax2_backward, Dense, Parameters, Pfam};
use crate::omts::{branch_loss, BranchPrediction, BranchTarget, LossConfig};
use crate::synthdata::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs: 1e-6,
            rel: 1e-4,
        }
    }
}

impl Tolerance {
    /// Passes when either the absolute or the relative error is in bounds.
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        err <= self.abs || (scale > 0.0 && err / scale <= self.rel)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seeds: usize,
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// First failing coordinate, if any.
    pub first_failure: Option<String>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            ..Default::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn record(&mut self, tol: &Tolerance, analytic: f64, numeric: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if !tol.accepts(analytic, numeric) {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(format!("{}: analytic {analytic:e}, numeric {numeric:e}", what()));
            }
        }
    }
}

fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn param_count<M: Parameters<f64>>(m: &M) -> usize {
    m.num_params()
}

fn nudge<M: Parameters<f64>>(m: &mut M, mut idx: usize, delta: f64) {
    for t in m.tensors_mut() {
        if idx < t.len() {
            t[idx] += delta;
            return;
        }
        idx -= t.len();
    }
    panic!("parameter index out of range");
}

fn flat<M: Parameters<f64>>(m: &M) -> Vec<f64> {
    m.tensors().into_iter().flat_map(|t| t.data.to_vec()).collect()
}

/// Compares every parameter and input coordinate of a model.
///
/// `eval` returns the scalar loss and a kink signature; a signature change
/// between the two probes marks the coordinate as skipped.
fn check_model<M, F>(
    report: &mut SuiteReport,
    tol: &Tolerance,
    model: &M,
    x: &[f64],
    grad_params: &[f64],
    grad_input: &[f64],
    eval: F,
) where
    M: Parameters<f64> + Clone,
    F: Fn(&M, &[f64]) -> (f64, Vec<bool>),
{
    let h = tol.step;
    let mut m = model.clone();
    for i in 0..param_count(model) {
        nudge(&mut m, i, h);
        let (lp, sp) = eval(&m, x);
        nudge(&mut m, i, -2.0 * h);
        let (lm, sm) = eval(&m, x);
        nudge(&mut m, i, h);
        if sp != sm {
            report.skipped += 1;
            continue;
        }
        report.record(tol, grad_params[i], (lp - lm) / (2.0 * h), || format!("param {i}"));
    }
    let mut xv = x.to_vec();
    for i in 0..x.len() {
        xv[i] = x[i] + h;
        let (lp, sp) = eval(model, &xv);
        xv[i] = x[i] - h;
        let (lm, sm) = eval(model, &xv);
        xv[i] = x[i];
        if sp != sm {
            report.skipped += 1;
            continue;
        }
        report.record(tol, grad_input[i], (lp - lm) / (2.0 * h), || format!("input {i}"));
    }
}

pub fn check_dense(seed: u64, max_dim: usize, n_seeds: usize, tol: &Tolerance) -> SuiteReport {
    let mut report = SuiteReport::new("dense");
    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let (din, dout) = (rng.gen_range(1..=max_dim), rng.gen_range(1..=max_dim));
        let mut layer = Dense::<f64>::init(din, dout, &mut rng);
        layer.bias = uniform_vec(&mut rng, dout, 0.5);
        let x = uniform_vec(&mut rng, din, 1.0);
        let r = uniform_vec(&mut rng, dout, 1.0);
        let mut grads = layer.zeros_like();
        let gin = layer.backward(&x, &r, &mut grads);
        check_model(&mut report, tol, &layer, &x, &flat(&grads), &gin, |m, x| (dot(&r, &m.forward(x)), Vec::new()));
        report.seeds += 1;
    }
    report
}

pub fn check_relu(seed: u64, max_dim: usize, n_seeds: usize, tol: &Tolerance) -> SuiteReport {
    let mut report = SuiteReport::new("relu");
    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let n = rng.gen_range(1..=max_dim);
        let x = uniform_vec(&mut rng, n, 1.0);
        let r = uniform_vec(&mut rng, n, 1.0);
        let g = relu_backward(&x, &r);
        let h = tol.step;
        for i in 0..n {
            if x[i].abs() <= h {
                report.skipped += 1;
                continue;
            }
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let num = (dot(&r, &relu(&xp)) - dot(&r, &relu(&xm))) / (2.0 * h);
            report.record(tol, g[i], num, || format!("seed {s} input {i}"));
        }
        report.seeds += 1;
    }
    report
}

pub fn check_sigmoid(seed: u64, max_dim: usize, n_seeds: usize, tol: &Tolerance) -> SuiteReport {
    let mut report = SuiteReport::new("sigmoid");
    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let n = rng.gen_range(1..=max_dim);
        let h = tol.step;
        for i in 0..n {
            let x: f64 = rng.gen_range(-8.0..8.0);
            let r: f64 = rng.gen_range(-1.0..1.0);
            let g = sigmoid_backward(sigmoid(x), r);
            let num = r * (sigmoid(x + h) - sigmoid(x - h)) / (2.0 * h);
            report.record(tol, g, num, || format!("seed {s} element {i}"));
        }
        report.seeds += 1;
    }
    report
}

pub fn check_softmax2(seed: u64, _max_dim: usize, n_seeds: usize, tol: &Tolerance) -> SuiteReport {
    let mut report = SuiteReport::new("softmax2");
    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let z = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
        let r = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let g = softmax2_backward(softmax2(z), r);
        let h = tol.step;
        for i in 0..2 {
            let (mut zp, mut zm) = (z, z);
            zp[i] += h;
            zm[i] -= h;
            let num = (dot(&r, &softmax2(zp)) - dot(&r, &softmax2(zm))) / (2.0 * h);
            report.record(tol, g[i], num, || format!("seed {s} logit {i}"));
        }
        report.seeds += 1;
    }
    report
}

/// Random gates, plus an all-zero gate network (every gate exactly 0.5) on
/// odd seeds.
pub fn check_pfam(seed: u64, max_dim: usize, n_seeds: usize, tol: &Tolerance) -> SuiteReport {
    let mut report = SuiteReport::new("pfam");
    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let dim = rng.gen_range(1..=max_dim);
        let hidden = rng.gen_range(1..=max_dim);
        let block = if s % 2 == 1 {
            Pfam::<f64>::zeros(dim, hidden)
        } else {
            let mut b = Pfam::init(dim, hidden, &mut rng);
            b.fc1.bias = uniform_vec(&mut rng, hidden, 0.3);
            b.fc2.bias = uniform_vec(&mut rng, dim, 0.3);
            b
        };
        let x = uniform_vec(&mut rng, dim, 1.0);
        let r = uniform_vec(&mut rng, dim, 1.0);
        let (_, cache) = block.forward(&x);
        let mut grads = block.zeros_like();
        let gin = block.backward(&x, &cache, &r, &mut grads);
        check_model(&mut report, tol, &block, &x, &flat(&grads), &gin, |m, x| {
            let (out, c) = m.forward(x);
            (dot(&r, &out), c.hidden_pre.iter().map(|v| *v > 0.0).collect())
        });
        report.seeds += 1;
    }
    report
}

fn random_branch_grad(rng: &mut impl Rng) -> BranchGrad<f64> {
    let mut g = BranchGrad::zeros();
    g.logits = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    g.boxes.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    g.curve.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    g
}

fn functional(out: &BranchOutput<f64>, r: &BranchGrad<f64>) -> f64 {
    dot(&out.logits, &r.logits) + dot(&out.boxes.deltas, &r.boxes) + dot(&out.curve.offsets, &r.curve)
}

/// Whole head: cycles through PFAM modes and placements across seeds with
/// random widths and branch counts.
pub fn check_head(seed: u64, max_dim: usize, n_seeds: usize, tol: &Tolerance) -> SuiteReport {
    let mut report = SuiteReport::new("head");
    let modes = [PfamMode::None, PfamMode::LastFc, PfamMode::BothFc];
    let placements = [PfamPlacement::AfterActivation, PfamPlacement::BeforeActivation];
    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let config = HeadConfig {
            roi_dim: rng.gen_range(1..=max_dim),
            fc_dim: rng.gen_range(2..=max_dim.max(2)),
            k: rng.gen_range(1..=3),
            pfam_mode: modes[s % 3],
            pfam_hidden: rng.gen_range(1..=max_dim),
            pfam_placement: placements[(s / 3) % 2],
        };
        let head = DetectionHead::<f64>::new(config, rng.gen()).expect("valid config");
        let x = uniform_vec(&mut rng, config.roi_dim, 1.0);
        let rs: Vec<BranchGrad<f64>> = (0..config.k).map(|_| random_branch_grad(&mut rng)).collect();
        let (_, cache) = head.forward_train(&x).expect("input width");
        let mut grads = head.zeros_like();
        let gin = head.backward(&cache, &rs, &mut grads).expect("branch count");
        check_model(&mut report, tol, &head, &x, &flat(&grads), &gin, |m, x| {
            let (out, c) = m.forward_train(x).expect("input width");
            let l = out.branches.iter().zip(&rs).map(|(o, r)| functional(o, r)).sum();
            (l, c.relu_pattern())
        });
        report.seeds += 1;
    }
    report
}

/// Per-branch training loss gradient with respect to logits and deltas.
pub fn check_branch_loss(seed: u64, _max_dim: usize, n_seeds: usize, tol: &Tolerance) -> SuiteReport {
    let mut report = SuiteReport::new("branch_loss");
    let cfg = LossConfig::<f64> {
        cls_weight: 1.0,
        box_weight: 0.7,
        curve_weight: 1.3,
        box_scale: [10.0, 10.0, 5.0, 5.0],
        curve_scale: 4.0,
        ..Default::default()
    };
    for s in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s as u64));
        let mut raw = uniform_vec(&mut rng, 2 + BOX_TARGET_LEN + CURVE_TARGET_LEN, 3.0);
        raw[0] = rng.gen_range(-4.0..4.0);
        raw[1] = rng.gen_range(-4.0..4.0);
        let target = if s % 3 == 2 {
            BranchTarget::Background
        } else {
            BranchTarget::Text {
                boxes: BoxTarget::from_slice(&uniform_vec(&mut rng, BOX_TARGET_LEN, 2.0)).expect("len"),
                curve: CurveTarget::from_slice(&uniform_vec(&mut rng, CURVE_TARGET_LEN, 2.0)).expect("len"),
            }
        };
        let unpack = |v: &[f64]| -> BranchOutput<f64> {
            let logits = [v[0], v[1]];
            BranchOutput {
                logits,
                confidence: softmax2(logits)[1],
                boxes: BoxTarget::from_slice(&v[2..2 + BOX_TARGET_LEN]).expect("len"),
                curve: CurveTarget::from_slice(&v[2 + BOX_TARGET_LEN..]).expect("len"),
            }
        };
        let loss = |v: &[f64]| {
            let o = unpack(v);
            let pred = BranchPrediction {
                confidence: o.confidence,
                boxes: o.boxes,
                curve: o.curve,
            };
            branch_loss(&pred, &target, &cfg).total()
        };
        // Which side of each smooth-L1 knee and of the clamp a point is on.
        let regime = |v: &[f64]| -> Vec<bool> {
            let o = unpack(v);
            let mut sig = vec![o.confidence > cfg.eps, o.confidence < 1.0 - cfg.eps];
            if let BranchTarget::Text { boxes, curve } = &target {
                for i in 0..BOX_TARGET_LEN {
                    sig.push((cfg.box_scale[i] * (o.boxes.deltas[i] - boxes.deltas[i])).abs() < cfg.beta);
                }
                sig.extend(o.curve.offsets.iter().zip(&curve.offsets).map(|(a, b)| (cfg.curve_scale * (a - b)).abs() < cfg.beta));
            }
            sig
        };
        let g = branch_loss_grad(&unpack(&raw), &target, &cfg);
        let analytic: Vec<f64> = g.logits.iter().chain(&g.boxes).chain(&g.curve).copied().collect();
        let h = tol.step;
        for i in 0..raw.len() {
            let mut p = raw.clone();
            p[i] += h;
            let mut m = raw.clone();
            m[i] -= h;
            if regime(&p) != regime(&m) {
                report.skipped += 1;
                continue;
            }
            report.record(tol, analytic[i], (loss(&p) - loss(&m)) / (2.0 * h), || format!("seed {s} output {i}"));
        }
        report.seeds += 1;
    }
    report
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64, max_dim: usize, n_seeds: usize) -> Vec<SuiteReport> {
    let tol = Tolerance::default();
    let max_dim = max_dim.max(1);
    type Suite = fn(u64, usize, usize, &Tolerance) -> SuiteReport;
    let suites: [Suite; 7] = [
        check_dense,
        check_relu,
        check_sigmoid,
        check_softmax2,
        check_pfam,
        check_head,
        check_branch_loss,
    ];
    suites.iter().enumerate().map(|(i, f)| f(derive_seed(seed, i as u64), max_dim, n_seeds, &tol)).collect()
}
