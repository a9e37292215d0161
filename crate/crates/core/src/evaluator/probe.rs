//! Linear-probe transfer evaluation: multinomial logistic regression on
//! frozen features with tuned regularization.
//!
//! Small training sets (≤ [`QUASI_NEWTON_MAX_SAMPLES`]) are fit full-batch
//! with L-BFGS on `mean CE + (λ/2)·‖W‖²`; larger ones with minibatch SGD
//! whose learning rate and weight decay are tuned instead. Hyperparameters
//! are chosen by seeded random search on a stratified 80/20 split of the
//! training features, then the winner is refit on all training features.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};

pub const QUASI_NEWTON_MAX_SAMPLES: usize = 100_000;
pub const MIN_TRIALS: usize = 25;

/// Multinomial logistic regression, `weights` is `[classes][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub d: usize,
    pub classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    fn from_flat(d: usize, classes: usize, theta: &[f64]) -> Self {
        Self {
            d,
            classes,
            weights: theta[..d * classes].to_vec(),
            bias: theta[d * classes..].to_vec(),
        }
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                self.bias[k]
                    + self.weights[k * self.d..(k + 1) * self.d]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * *v as f64)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Argmax with ties to the lower class index.
    pub fn predict(&self, x: &[f32]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for k in 1..s.len() {
            if s[k] > s[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, data: &FeatureMatrix) -> f64 {
        if data.n == 0 {
            return 0.0;
        }
        let hits = (0..data.n)
            .filter(|&i| self.predict(data.row(i)) == data.labels[i] as usize)
            .count();
        hits as f64 / data.n as f64
    }
}

/// Objective value and gradient at `theta` (weights then biases).
fn objective(
    data: &FeatureMatrix,
    classes: usize,
    l2: f64,
    theta: &[f64],
    grad: &mut [f64],
) -> f64 {
    let d = data.d;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let (w, b) = theta.split_at(d * classes);
    let mut loss = 0.0;
    let mut scores = vec![0.0; classes];
    for i in 0..data.n {
        let x = data.row(i);
        let y = data.labels[i] as usize;
        for k in 0..classes {
            scores[k] = b[k]
                + w[k * d..(k + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * *v as f64)
                    .sum::<f64>();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        loss += sum.ln() + max - scores[y];
        for k in 0..classes {
            let p = (scores[k] - max).exp() / sum - if k == y { 1.0 } else { 0.0 };
            let gw = &mut grad[k * d..(k + 1) * d];
            for (g, v) in gw.iter_mut().zip(x) {
                *g += p * *v as f64;
            }
            grad[d * classes + k] += p;
        }
    }
    let inv = 1.0 / data.n as f64;
    loss *= inv;
    grad.iter_mut().for_each(|g| *g *= inv);
    let mut reg = 0.0;
    for (g, wv) in grad[..d * classes].iter_mut().zip(w) {
        *g += l2 * wv;
        reg += wv * wv;
    }
    loss + 0.5 * l2 * reg
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub history: usize,
    /// Stop when ‖∇‖∞ falls below this.
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            history: 10,
            grad_tol: 1e-6,
        }
    }
}

/// Minimizes `f` with L-BFGS (two-loop recursion, Armijo backtracking).
pub fn lbfgs(
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x0: Vec<f64>,
    opts: LbfgsOptions,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iters = 0;
    while iters < opts.max_iter {
        if g.iter().all(|v| v.abs() < opts.grad_tol) {
            break;
        }
        iters += 1;
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = mem
            .back()
            .map_or(1.0 / (dot(&g, &g).sqrt().max(1.0)), |(s, y, _)| {
                dot(s, y) / dot(y, y)
            });
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            mem.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 {
                    if mem.len() == opts.history {
                        mem.pop_front();
                    }
                    mem.push_back((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                let improvement = fx - f_new;
                fx = f_new;
                accepted = true;
                if improvement.abs() <= 1e-12 * fx.abs().max(1.0) {
                    iters = opts.max_iter;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (x, fx, iters)
}

/// Full-batch L-BFGS fit with per-sample-averaged loss and L2 strength `l2`
/// on the weights (bias unregularized).
pub fn fit_lbfgs(
    train: &FeatureMatrix,
    classes: usize,
    l2: f64,
    opts: LbfgsOptions,
) -> LogisticModel {
    let size = train.d * classes + classes;
    let (theta, _, _) = lbfgs(
        |t, g| objective(train, classes, l2, t, g),
        vec![0.0; size],
        opts,
    );
    LogisticModel::from_flat(train.d, classes, &theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdProbeOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for SgdProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            momentum: 0.9,
        }
    }
}

/// Minibatch SGD fit with momentum, cosine-decayed `lr` and weight decay.
pub fn fit_sgd(
    train: &FeatureMatrix,
    classes: usize,
    lr: f64,
    weight_decay: f64,
    opts: SgdProbeOptions,
    seed: u64,
) -> LogisticModel {
    let size = train.d * classes + classes;
    let mut theta = vec![0.0; size];
    let mut vel = vec![0.0; size];
    let mut grad = vec![0.0; size];
    let mut order: Vec<usize> = (0..train.n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps_per_epoch = train.n.div_ceil(opts.batch_size.max(1)).max(1);
    let total = (opts.epochs * steps_per_epoch) as f64;
    let mut step = 0usize;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch = train.select(chunk);
            objective(&batch, classes, weight_decay, &theta, &mut grad);
            let lr_t = 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            for i in 0..size {
                vel[i] = opts.momentum * vel[i] + grad[i];
                theta[i] -= lr_t * vel[i];
            }
            step += 1;
        }
    }
    LogisticModel::from_flat(train.d, classes, &theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    QuasiNewton,
    Sgd,
}

/// Log-uniform search ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub regularization: [f64; 2],
    pub lr: [f64; 2],
    pub weight_decay: [f64; 2],
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            regularization: [1e-6, 1e2],
            lr: [1e-4, 1e0],
            weight_decay: [1e-6, 1e2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub n_trials: usize,
    pub search_space: SearchSpace,
    pub seed: u64,
    /// Fraction of training rows held out for validation.
    pub val_fraction: f64,
    /// Overrides the size-based solver choice.
    pub solver: Option<Solver>,
    pub lbfgs: LbfgsOptions,
    pub sgd: SgdProbeOptions,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            n_trials: MIN_TRIALS,
            search_space: SearchSpace::default(),
            seed: 0,
            val_fraction: 0.2,
            solver: None,
            lbfgs: LbfgsOptions::default(),
            sgd: SgdProbeOptions::default(),
            parallelism: Parallelism::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "kebab-case")]
pub enum Hyperparams {
    QuasiNewton { regularization: f64 },
    Sgd { lr: f64, weight_decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub hparams: Hyperparams,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub best_hparams: Hyperparams,
    pub solver: Solver,
    pub trials: Vec<TrialRecord>,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
}

fn log_uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    let (lo, hi) = (range[0].ln(), range[1].ln());
    rng.random_range(lo..=hi).exp()
}

/// Stratified split: per class, a seeded shuffle, then `val_fraction` of the
/// rows (at least one when the class has two or more) go to validation.
pub fn stratified_split(labels: &[i32], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for rows in by_class.values_mut() {
        rows.shuffle(&mut rng);
        let mut k = (rows.len() as f64 * val_fraction).round() as usize;
        if rows.len() >= 2 {
            k = k.clamp(1, rows.len() - 1);
        } else {
            k = 0;
        }
        val.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn fit(
    train: &FeatureMatrix,
    classes: usize,
    hp: &Hyperparams,
    cfg: &TunerConfig,
    seed: u64,
) -> LogisticModel {
    match *hp {
        Hyperparams::QuasiNewton { regularization } => {
            fit_lbfgs(train, classes, regularization, cfg.lbfgs)
        }
        Hyperparams::Sgd { lr, weight_decay } => {
            fit_sgd(train, classes, lr, weight_decay, cfg.sgd, seed)
        }
    }
}

/// Tunes on a held-out split of `train`, refits on all of `train` with the
/// best trial and reports accuracy on `test`.
pub fn linear_probe(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    cfg: &TunerConfig,
) -> Result<ProbeReport> {
    train.validate()?;
    test.validate()?;
    if train.d != test.d {
        return Err(Error::Contract(format!(
            "train features have d={}, test d={}",
            train.d, test.d
        )));
    }
    if cfg.n_trials < MIN_TRIALS {
        return Err(Error::Contract(format!(
            "at least {MIN_TRIALS} tuner trials required, got {}",
            cfg.n_trials
        )));
    }
    let distinct: std::collections::BTreeSet<i32> = train.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidData(
            "probe training set has a single class".into(),
        ));
    }
    let classes = train.num_classes().max(test.num_classes());
    let solver = cfg
        .solver
        .unwrap_or(if train.n <= QUASI_NEWTON_MAX_SAMPLES {
            Solver::QuasiNewton
        } else {
            Solver::Sgd
        });

    let (tr_rows, val_rows) = stratified_split(&train.labels, cfg.val_fraction, cfg.seed);
    let (fit_set, val_set) = (train.select(&tr_rows), train.select(&val_rows));

    let trials = par::map_range(cfg.parallelism, cfg.n_trials, |index| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + index as u64));
        let hparams = match solver {
            Solver::QuasiNewton => Hyperparams::QuasiNewton {
                regularization: log_uniform(&mut rng, cfg.search_space.regularization),
            },
            Solver::Sgd => Hyperparams::Sgd {
                lr: log_uniform(&mut rng, cfg.search_space.lr),
                weight_decay: log_uniform(&mut rng, cfg.search_space.weight_decay),
            },
        };
        let model = fit(&fit_set, classes, &hparams, cfg, cfg.seed ^ index as u64);
        let val_accuracy = model.accuracy(&val_set);
        log::debug!("probe trial {index}: {hparams:?} -> {val_accuracy:.4}");
        TrialRecord {
            index,
            hparams,
            val_accuracy,
        }
    });
    let best = trials
        .iter()
        .fold(None::<&TrialRecord>, |best, t| match best {
            Some(b) if b.val_accuracy >= t.val_accuracy => Some(b),
            _ => Some(t),
        })
        .expect("at least one trial");
    let model = fit(train, classes, &best.hparams, cfg, cfg.seed);
    Ok(ProbeReport {
        accuracy: model.accuracy(test),
        best_hparams: best.hparams.clone(),
        solver,
        trials: trials.clone(),
        n_train: train.n,
        n_test: test.n,
        d: train.d,
    })
}
