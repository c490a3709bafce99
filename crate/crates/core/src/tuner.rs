//! Sequential model-based hyperparameter search: a Gaussian-process surrogate
//! with expected improvement, or plain random search.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig, DROPOUT_RANGE, LAMBDA_RANGE, LEARNING_RATE_RANGE};

pub const DEFAULT_BUDGET: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub dropout: (f64, f64),
    pub lambda: Option<(f64, f64)>,
}

impl SearchSpace {
    pub fn for_architecture(arch: Architecture) -> Self {
        Self {
            learning_rate: LEARNING_RATE_RANGE,
            dropout: DROPOUT_RANGE,
            lambda: (arch == Architecture::Multi).then_some(LAMBDA_RANGE),
        }
    }

    pub fn dims(&self) -> usize {
        2 + usize::from(self.lambda.is_some())
    }

    /// Maps a point of the unit cube onto the space; learning rate is log-scaled.
    pub fn decode(&self, u: &[f64]) -> Hyperparams {
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let (lo, hi) = self.learning_rate;
        let lr = (lo.ln() + clamp(u[0]) * (hi.ln() - lo.ln())).exp();
        let (dlo, dhi) = self.dropout;
        Hyperparams {
            learning_rate: lr.clamp(lo, hi),
            dropout: (dlo + clamp(u[1]) * (dhi - dlo)).clamp(dlo, dhi),
            lambda: self
                .lambda
                .map(|(a, b)| (a + clamp(u[2]) * (b - a)).clamp(a, b)),
        }
    }

    pub fn contains(&self, h: &Hyperparams) -> bool {
        let within = |v: f64, (a, b): (f64, f64)| v >= a && v <= b;
        within(h.learning_rate, self.learning_rate)
            && within(h.dropout, self.dropout)
            && match (self.lambda, h.lambda) {
                (Some(r), Some(l)) => within(l, r),
                (None, None) => true,
                _ => false,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub dropout: f64,
    pub lambda: Option<f64>,
}

impl Hyperparams {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            learning_rate: self.learning_rate,
            dropout: self.dropout,
            lambda: self.lambda,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Bayesian,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Bayesian => "bayesian",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayesian" | "bo" | "gp" => Ok(Strategy::Bayesian),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::Config(format!("unknown tuning strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "error")]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Hyperparams,
    /// Dev-set criterion; absent for failed trials.
    pub criterion: Option<f64>,
    #[serde(flatten)]
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub strategy: Strategy,
    pub budget: usize,
    pub seed: u64,
    pub best: Hyperparams,
    pub best_criterion: f64,
    pub trials: Vec<Trial>,
}

impl TuneResult {
    /// Trial log as line-delimited JSON.
    pub fn trial_log(&self) -> String {
        self.trials
            .iter()
            .map(|t| serde_json::to_string(t).expect("trial serializes") + "\n")
            .collect()
    }
}

const INIT_POINTS: usize = 5;
const CANDIDATES: usize = 2048;
const LENGTHSCALES: [f64; 6] = [0.05, 0.1, 0.2, 0.35, 0.6, 1.0];
const NOISE: f64 = 1e-4;

struct Gp {
    x: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ls: f64,
    mean: f64,
    scale: f64,
}

fn rbf(a: &[f64], b: &[f64], ls: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2 / (ls * ls)).exp()
}

impl Gp {
    /// Fits on standardized targets, choosing the lengthscale from a grid by
    /// marginal likelihood.
    fn fit(x: &[Vec<f64>], y: &[f64]) -> Option<Self> {
        let n = y.len();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 1e-12 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - mean) / scale));
        let mut best: Option<(f64, Gp)> = None;
        for ls in LENGTHSCALES {
            let k = DMatrix::from_fn(n, n, |i, j| {
                rbf(&x[i], &x[j], ls) + if i == j { NOISE } else { 0.0 }
            });
            let Some(chol) = k.cholesky() else { continue };
            let alpha = chol.solve(&ys);
            let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * ys.dot(&alpha) - 0.5 * logdet;
            if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((
                    lml,
                    Gp {
                        x: x.to_vec(),
                        alpha,
                        chol,
                        ls,
                        mean,
                        scale,
                    },
                ));
            }
        }
        best.map(|(_, g)| g)
    }

    /// Posterior mean and standard deviation in standardized units.
    fn predict(&self, p: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| rbf(xi, p, self.ls)));
        let mu = k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (1.0 - k.dot(&v)).max(1e-12);
        (mu, var.sqrt())
    }
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let xi = 0.01;
    let d = mu - best - xi;
    let z = d / sigma;
    d * norm_cdf(z) + sigma * norm_pdf(z)
}

fn random_point(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| rng.random::<f64>()).collect()
}

fn propose(strategy: Strategy, rng: &mut ChaCha8Rng, dims: usize, xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    if strategy == Strategy::Random || ys.len() < INIT_POINTS {
        return random_point(rng, dims);
    }
    let Some(gp) = Gp::fit(xs, ys) else {
        return random_point(rng, dims);
    };
    let best = ys
        .iter()
        .map(|y| (y - gp.mean) / gp.scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut top = (f64::NEG_INFINITY, random_point(rng, dims));
    for _ in 0..CANDIDATES {
        let c = random_point(rng, dims);
        let (mu, sd) = gp.predict(&c);
        let ei = expected_improvement(mu, sd, best);
        if ei > top.0 {
            top = (ei, c);
        }
    }
    top.1
}

/// Runs `budget` trials of `objective` (higher is better) and returns the
/// best one. Failed trials are logged and skipped.
pub fn tune<F>(space: &SearchSpace, strategy: Strategy, budget: usize, seed: u64, mut objective: F) -> Result<TuneResult>
where
    F: FnMut(&Hyperparams) -> Result<f64>,
{
    if budget == 0 {
        return Err(Error::Tuning("budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = space.dims();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut trials = Vec::with_capacity(budget);
    for index in 0..budget {
        let u = propose(strategy, &mut rng, dims, &xs, &ys);
        let params = space.decode(&u);
        let (criterion, status) = match objective(&params) {
            Ok(v) if v.is_finite() => {
                xs.push(u);
                ys.push(v);
                (Some(v), TrialStatus::Ok)
            }
            Ok(v) => (None, TrialStatus::Failed(format!("non-finite criterion {v}"))),
            Err(e) => (None, TrialStatus::Failed(e.to_string())),
        };
        log::info!("trial {index}: {params:?} -> {criterion:?}");
        trials.push(Trial {
            index,
            params,
            criterion,
            status,
        });
    }
    finish(strategy, budget, seed, trials)
}

fn finish(strategy: Strategy, budget: usize, seed: u64, trials: Vec<Trial>) -> Result<TuneResult> {
    let (best, best_criterion) = trials
        .iter()
        .filter_map(|t| t.criterion.map(|c| (t.params, c)))
        .fold(None, |acc: Option<(Hyperparams, f64)>, (p, c)| match acc {
            Some((_, b)) if b >= c => acc,
            _ => Some((p, c)),
        })
        .ok_or_else(|| Error::Tuning(format!("all {budget} trials failed")))?;
    Ok(TuneResult {
        strategy,
        budget,
        seed,
        best,
        best_criterion,
        trials,
    })
}

/// Random search with trials spread over `workers` threads. Proposals are
/// drawn up front, so results do not depend on scheduling.
pub fn tune_random_parallel<F>(space: &SearchSpace, budget: usize, seed: u64, workers: usize, objective: F) -> Result<TuneResult>
where
    F: Fn(&Hyperparams) -> Result<f64> + Sync,
{
    if budget == 0 {
        return Err(Error::Tuning("budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proposals: Vec<Hyperparams> = (0..budget)
        .map(|_| space.decode(&random_point(&mut rng, space.dims())))
        .collect();
    let workers = workers.clamp(1, budget);
    let results: Vec<(usize, Result<f64>)> = std::thread::scope(|s| {
        let objective = &objective;
        let proposals = &proposals;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..budget)
                        .step_by(workers)
                        .map(|i| (i, objective(&proposals[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("tuning worker panicked"))
            .collect()
    });
    let mut trials: Vec<Trial> = results
        .into_iter()
        .map(|(index, r)| {
            let (criterion, status) = match r {
                Ok(v) if v.is_finite() => (Some(v), TrialStatus::Ok),
                Ok(v) => (None, TrialStatus::Failed(format!("non-finite criterion {v}"))),
                Err(e) => (None, TrialStatus::Failed(e.to_string())),
            };
            Trial {
                index,
                params: proposals[index],
                criterion,
                status,
            }
        })
        .collect();
    trials.sort_by_key(|t| t.index);
    finish(Strategy::Random, budget, seed, trials)
}
