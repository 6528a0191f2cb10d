use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, derive_seed};
use crate::scalar::Scalar;
use crate::svm::MatrixSubspace;

use super::model::{LossKind, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zero,
    /// I.i.d. `N(0, σ²)` entries drawn from the config seed.
    Gaussian(f64),
}

impl std::str::FromStr for Init {
    type Err = Error;

    /// `zero` or `gauss:σ`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "zero" {
            return Ok(Self::Zero);
        }
        s.strip_prefix("gauss:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v >= 0.0)
            .map(Self::Gaussian)
            .ok_or_else(|| Error::Config(format!("bad init `{s}` (expected zero or gauss:σ)")))
    }
}

impl Init {
    pub fn sample<T: Scalar>(self, d: usize, seed: u64) -> Matrix<T> {
        match self {
            Self::Zero => Matrix::zeros(d, d),
            Self::Gaussian(scale) => {
                let mut r = rng::seeded(seed);
                Matrix::from_vec(d, d, rng::gaussian_vec::<T>(&mut r, d * d)).scaled(T::of(scale))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig<T> {
    pub eta: f64,
    pub iters: usize,
    /// Step along `∇L / ‖∇L‖_F` instead of `∇L`.
    pub normalized: bool,
    pub init: Init,
    pub seed: u64,
    pub record_every: usize,
    /// Restrict the updates to this subspace.
    pub projection: Option<MatrixSubspace<T>>,
}

impl<T> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            eta: 0.01,
            iters: 4000,
            normalized: true,
            init: Init::Zero,
            seed: 0,
            record_every: 10,
            projection: None,
        }
    }
}

impl<T> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.iters == 0 || self.record_every == 0 {
            return Err(Error::Config("iters and record_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optional reference quantities tracked during training.
#[derive(Clone, Debug, Default)]
pub struct References<T> {
    pub w_svm: Option<Matrix<T>>,
    pub fin: Option<MatrixSubspace<T>>,
    pub w_fin: Option<Matrix<T>>,
    /// `L̄` objective for the `loss_bar` column.
    pub cyclic: Option<Objective<T>>,
    /// Subspace whose projection norm is tracked (norm divergence).
    pub svm_subspace: Option<MatrixSubspace<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    pub loss_bar: Option<f64>,
    pub grad_norm: f64,
    pub w_norm: f64,
    pub corr_svm: Option<f64>,
    pub dist_fin: Option<f64>,
    /// `‖Π_{S_svm} W‖_F`.
    #[serde(default)]
    pub svm_norm: Option<f64>,
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainTrace<T> {
    pub records: Vec<TrainRecord>,
    pub w: Matrix<T>,
    pub w0: Matrix<T>,
    /// Iteration at which the loss stopped being finite, if it did.
    pub nonfinite_at: Option<usize>,
    pub wall_ms: f64,
}

impl<T> TrainTrace<T> {
    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn check(&self) -> Result<()> {
        match self.nonfinite_at {
            Some(iter) => Err(Error::NonFiniteLoss(iter)),
            None => Ok(()),
        }
    }
}

/// Frobenius cosine; `None` when either side is zero.
pub fn cosine<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Option<T> {
    let na = a.frob_norm();
    let nb = b.frob_norm();
    (na > T::zero() && nb > T::zero()).then(|| a.frob_inner(b) / (na * nb))
}

fn record<T: Scalar>(
    iter: usize,
    loss: T,
    grad_norm: T,
    w: &Matrix<T>,
    refs: &References<T>,
    start: &Instant,
) -> Result<TrainRecord> {
    let loss_bar = match &refs.cyclic {
        Some(c) => Some(c.loss(w)?.as_f64()),
        None => None,
    };
    let dist_fin = match (&refs.fin, &refs.w_fin) {
        (Some(fin), Some(wf)) => Some((&fin.project(w) - wf).frob_norm().as_f64()),
        _ => None,
    };
    Ok(TrainRecord {
        iter,
        loss: loss.as_f64(),
        loss_bar,
        grad_norm: grad_norm.as_f64(),
        w_norm: w.frob_norm().as_f64(),
        corr_svm: refs
            .w_svm
            .as_ref()
            .and_then(|s| cosine(w, s))
            .map(Scalar::as_f64),
        dist_fin,
        svm_norm: refs
            .svm_subspace
            .as_ref()
            .map(|s| s.project(w).frob_norm().as_f64()),
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Gradient descent `W ← W - η ∇L` (or the normalized step), recording metrics every
/// `record_every` iterations and after the last step.
pub fn train_gd<T: Scalar>(
    objective: &Objective<T>,
    config: &TrainConfig<T>,
    refs: &References<T>,
) -> Result<TrainTrace<T>> {
    config.validate()?;
    let start = Instant::now();
    let d = objective.dim();
    let w0: Matrix<T> = match &config.projection {
        Some(p) => p.project(&config.init.sample(d, config.seed)),
        None => config.init.sample(d, config.seed),
    };
    let mut w = w0.clone();
    let eta = T::of(config.eta);
    let mut records = Vec::new();
    let mut nonfinite_at = None;
    for iter in 0..=config.iters {
        let (loss, mut grad) = match objective.loss_and_grad(&w) {
            Ok(v) => v,
            Err(Error::DomainError { .. }) => {
                nonfinite_at = Some(iter);
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grad.is_finite() {
            nonfinite_at = Some(iter);
            break;
        }
        if let Some(p) = &config.projection {
            grad = p.project(&grad);
        }
        let gn = grad.frob_norm();
        if iter % config.record_every == 0 || iter == config.iters {
            records.push(record(iter, loss, gn, &w, refs, &start)?);
        }
        if iter == config.iters {
            break;
        }
        let step = if config.normalized {
            if gn == T::zero() {
                continue;
            }
            eta / gn
        } else {
            eta
        };
        w.axpy(-step, &grad);
    }
    Ok(TrainTrace {
        records,
        w,
        w0,
        nonfinite_at,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Clone, Debug)]
pub struct WfinOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for WfinOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 1_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WfinResult<T> {
    pub w: Matrix<T>,
    pub iters: usize,
    pub grad_norm: T,
    /// Largest `‖∇L̄ - Π_{S_fin} ∇L̄‖_F` seen along the run.
    pub max_off_subspace: T,
    /// False when the iteration cap was hit; `w` is then the last iterate.
    pub converged: bool,
}

/// Minimizer of `L̄` over `S_fin` by gradient descent from zero, each gradient
/// projected onto `S_fin`.
///
/// The first trial step is `1/L` when a smoothness constant is known, else 1; each
/// step backtracks from the previous accepted step (doubled) until the loss
/// decreases by at least half the linear prediction.
pub fn train_wfin<T: Scalar>(
    cyclic: &Objective<T>,
    fin: &MatrixSubspace<T>,
    opts: &WfinOptions,
) -> Result<WfinResult<T>> {
    let d = fin.matrix_dim();
    let mut w = Matrix::zeros(d, d);
    if cyclic.is_empty() || fin.dim() == 0 {
        return Ok(WfinResult {
            w,
            iters: 0,
            grad_norm: T::zero(),
            max_off_subspace: T::zero(),
            converged: true,
        });
    }
    let tol = T::tol(opts.tol);
    let mut step = cyclic
        .lipschitz()
        .filter(|l| *l > T::zero())
        .map_or(T::one(), T::recip);
    let (mut loss, raw) = cyclic.loss_and_grad(&w)?;
    let mut grad = fin.project(&raw);
    let mut max_off = (&raw - &grad).frob_norm();
    for iter in 0..opts.max_iters {
        let gn = grad.frob_norm();
        if gn < tol {
            return Ok(WfinResult {
                w,
                iters: iter,
                grad_norm: gn,
                max_off_subspace: max_off,
                converged: true,
            });
        }
        let mut next = w.clone();
        next.axpy(-step, &grad);
        let (mut next_loss, mut next_raw) = cyclic.loss_and_grad(&next)?;
        let half = T::of(0.5);
        while next_loss > loss - half * step * gn * gn {
            step *= half;
            if step < T::min_positive_value() {
                return Err(Error::NoConvergence {
                    iters: iter,
                    grad_norm: gn.as_f64(),
                });
            }
            next = w.clone();
            next.axpy(-step, &grad);
            (next_loss, next_raw) = cyclic.loss_and_grad(&next)?;
        }
        step *= T::of(2.0);
        w = next;
        loss = next_loss;
        grad = fin.project(&next_raw);
        max_off = max_off.max((&next_raw - &grad).frob_norm());
    }
    let grad_norm = grad.frob_norm();
    log::warn!(
        "finite component not converged after {} iterations (gradient norm {grad_norm})",
        opts.max_iters
    );
    Ok(WfinResult {
        w,
        iters: opts.max_iters,
        grad_norm,
        max_off_subspace: max_off,
        converged: false,
    })
}

#[derive(Clone, Debug)]
pub struct RegPathConfig {
    /// Increasing radii.
    pub radii: Vec<f64>,
    /// Iteration cap per radius.
    pub max_iters: usize,
    /// Stationarity tolerance (see [`ball_stationarity`]).
    pub tol: f64,
    /// Random restarts per radius for losses that are not convex.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for RegPathConfig {
    fn default() -> Self {
        Self {
            radii: geometric_radii(1.0, 1e3, 13),
            max_iters: 20_000,
            tol: 1e-7,
            restarts: 5,
            seed: 0,
        }
    }
}

pub fn geometric_radii(from: f64, to: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![to];
    }
    let ratio = (to / from).powf(1.0 / (count - 1) as f64);
    (0..count).map(|i| from * ratio.powi(i as i32)).collect()
}

#[derive(Clone, Debug)]
pub struct RegPathPoint<T> {
    pub radius: f64,
    pub w: Matrix<T>,
    pub loss: T,
    pub iters: usize,
    pub converged: bool,
}

fn project_ball<T: Scalar>(w: &Matrix<T>, r: T) -> Matrix<T> {
    let n = w.frob_norm();
    if n > r {
        w.scaled(r / n)
    } else {
        w.clone()
    }
}

/// Scale-free first-order optimality measure on the ball `‖W‖ <= R`. On the
/// boundary with an inward-pointing negative gradient it is the sine of the angle
/// between `-∇L` and `W`; elsewhere it is `‖∇L‖_F`.
pub fn ball_stationarity<T: Scalar>(w: &Matrix<T>, grad: &Matrix<T>, r: T) -> T {
    let gn = grad.frob_norm();
    let wn = w.frob_norm();
    let inner = grad.frob_inner(w);
    if wn >= r * (T::one() - T::of(1e-10)) && inner < T::zero() && gn > T::zero() {
        let mut tangent = grad.clone();
        tangent.axpy(-inner / (wn * wn), w);
        tangent.frob_norm() / gn
    } else {
        gn
    }
}

fn solve_ball<T: Scalar>(
    objective: &Objective<T>,
    r: T,
    start: &Matrix<T>,
    step: &mut T,
    cfg: &RegPathConfig,
) -> Result<RegPathPoint<T>> {
    let mut w = project_ball(start, r);
    let (mut loss, mut grad) = objective.loss_and_grad(&w)?;
    let tol = T::tol(cfg.tol);
    let sigma = T::of(1e-4);
    let half = T::of(0.5);
    for iter in 0..cfg.max_iters {
        if ball_stationarity(&w, &grad, r) < tol {
            return Ok(RegPathPoint {
                radius: r.as_f64(),
                w,
                loss,
                iters: iter,
                converged: true,
            });
        }
        loop {
            let mut trial = w.clone();
            trial.axpy(-*step, &grad);
            let cand = project_ball(&trial, r);
            let delta = &cand - &w;
            let decrease = grad.frob_inner(&delta);
            let cand_loss = objective.loss(&cand)?;
            if decrease < T::zero() && cand_loss <= loss + sigma * decrease {
                w = cand;
                break;
            }
            *step *= half;
            if *step < T::min_positive_value() || delta.max_abs() == T::zero() {
                // No representable progress left along the projected gradient.
                *step = T::one();
                return Ok(RegPathPoint {
                    radius: r.as_f64(),
                    w,
                    loss,
                    iters: iter,
                    converged: false,
                });
            }
        }
        (loss, grad) = objective.loss_and_grad(&w)?;
        *step *= T::of(2.0);
    }
    Ok(RegPathPoint {
        radius: r.as_f64(),
        converged: ball_stationarity(&w, &grad, r) < tol,
        w,
        loss,
        iters: cfg.max_iters,
    })
}

/// Norm-constrained minimizers `W̄_R = argmin_{‖W‖ <= R} L(W)` along `radii`, each
/// warm-started from the previous one scaled to the new radius. Losses other than
/// the log loss with indicator scores also get random restarts; the lowest loss wins.
pub fn reg_path<T: Scalar>(
    objective: &Objective<T>,
    cfg: &RegPathConfig,
) -> Result<Vec<RegPathPoint<T>>> {
    if cfg.radii.windows(2).any(|w| w[1] <= w[0]) || cfg.radii.iter().any(|&r| r <= 0.0) {
        return Err(Error::Config("radii must be positive and increasing".into()));
    }
    let d = objective.dim();
    let convex = objective.loss_kind() == LossKind::Log && objective.has_indicator_scores();
    let mut out: Vec<RegPathPoint<T>> = Vec::with_capacity(cfg.radii.len());
    let mut warm = Matrix::zeros(d, d);
    let mut step = T::one();
    for (ri, &radius) in cfg.radii.iter().enumerate() {
        let r = T::of(radius);
        let start = match out.last() {
            Some(prev) if prev.w.frob_norm() > T::zero() => {
                let n = prev.w.frob_norm();
                if n >= T::of(prev.radius) * T::of(1.0 - 1e-9) {
                    prev.w.scaled(r / n)
                } else {
                    prev.w.clone()
                }
            }
            _ => warm.clone(),
        };
        let mut best = solve_ball(objective, r, &start, &mut step, cfg)?;
        if !convex {
            for k in 0..cfg.restarts {
                let seed = derive_seed(cfg.seed, (ri * 1000 + k) as u64);
                let z: Matrix<T> = Init::Gaussian(1.0).sample(d, seed);
                let z = z.scaled(r / z.frob_norm());
                let mut s = T::one();
                let cand = solve_ball(objective, r, &z, &mut s, cfg)?;
                if cand.loss < best.loss {
                    best = cand;
                }
            }
        }
        warm = best.w.clone();
        out.push(best);
    }
    Ok(out)
}
