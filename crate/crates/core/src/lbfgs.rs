//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, norm_inf, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    /// Number of stored `(s, y)` pairs.
    pub history: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_evaluations: usize,
    /// Stop once `‖g‖∞` falls to this value.
    pub grad_tol: f64,
    /// Stop once the relative loss change over `plateau_window` steps falls
    /// to this value.
    pub rel_loss_tol: f64,
    pub plateau_window: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_evaluations: 30,
            grad_tol: 1e-6,
            rel_loss_tol: 1e-9,
            plateau_window: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    GradientNorm,
    LossPlateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// An iterate was accepted.
    Stepped,
    /// Nothing was done; the current point already meets a stopping rule.
    Converged(Convergence),
}

/// Optimizer state: current point, its loss and gradient, and the
/// curvature history.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsState<T> {
    pub config: LbfgsConfig,
    pub x: Vec<T>,
    pub loss: T,
    pub grad: Vec<T>,
    pub s_hist: VecDeque<Vec<T>>,
    pub y_hist: VecDeque<Vec<T>>,
    /// Accepted steps so far.
    pub iteration: usize,
    /// Loss at every accepted iterate, starting with the initial point.
    pub losses: Vec<T>,
    /// Objective evaluations so far.
    pub evaluations: usize,
}

impl<T: Scalar> LbfgsState<T> {
    /// Evaluates the objective at `x0`.
    pub fn new<F>(x0: Vec<T>, config: LbfgsConfig, f: &mut F) -> Result<Self>
    where
        F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
    {
        let (loss, grad) = f(&x0)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("objective is not finite at the initial point".into()));
        }
        Ok(Self {
            config,
            x: x0,
            loss,
            grad,
            s_hist: VecDeque::new(),
            y_hist: VecDeque::new(),
            iteration: 0,
            losses: vec![loss],
            evaluations: 1,
        })
    }

    /// Search direction from the two-loop recursion. With no history it is
    /// steepest descent scaled to unit length.
    pub fn direction(&self) -> Vec<T> {
        if self.s_hist.is_empty() {
            let n = norm(&self.grad);
            if n == T::zero() {
                return vec![T::zero(); self.grad.len()];
            }
            return self.grad.iter().map(|&g| -g / n).collect();
        }
        let mut q = self.grad.clone();
        let k = self.s_hist.len();
        let mut alpha = vec![T::zero(); k];
        let rho: Vec<T> = (0..k).map(|i| T::one() / dot(&self.y_hist[i], &self.s_hist[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s_hist[i], &q);
            for (qj, &yj) in q.iter_mut().zip(&self.y_hist[i]) {
                *qj = *qj - alpha[i] * yj;
            }
        }
        let (s, y) = (&self.s_hist[k - 1], &self.y_hist[k - 1]);
        let gamma = dot(s, y) / dot(y, y);
        for qj in &mut q {
            *qj = *qj * gamma;
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y_hist[i], &q);
            for (qj, &sj) in q.iter_mut().zip(&self.s_hist[i]) {
                *qj = *qj + (alpha[i] - beta) * sj;
            }
        }
        q.into_iter().map(|v| -v).collect()
    }

    pub fn converged(&self) -> Option<Convergence> {
        if norm_inf(&self.grad) <= T::of(self.config.grad_tol) {
            return Some(Convergence::GradientNorm);
        }
        let w = self.config.plateau_window;
        if w > 0 && self.losses.len() > w {
            let new = self.losses[self.losses.len() - 1];
            let old = self.losses[self.losses.len() - 1 - w];
            let scale = new.abs().max(old.abs()).max(T::min_positive_value());
            if (old - new).abs() / scale <= T::of(self.config.rel_loss_tol) {
                return Some(Convergence::LossPlateau);
            }
        }
        None
    }

    fn push_pair(&mut self, s: Vec<T>, y: Vec<T>) {
        if dot(&s, &y) > T::zero() {
            if self.s_hist.len() == self.config.history {
                self.s_hist.pop_front();
                self.y_hist.pop_front();
            }
            self.s_hist.push_back(s);
            self.y_hist.push_back(y);
        }
    }
}

struct Probe<T> {
    step: T,
    loss: T,
    slope: T,
    grad: Vec<T>,
}

/// Strong-Wolfe line search along `d` (bracketing, then zoom with
/// safeguarded cubic interpolation).
fn line_search<T, F>(state: &mut LbfgsState<T>, d: &[T], f: &mut F) -> Result<Probe<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    let c1 = T::of(state.config.c1);
    let c2 = T::of(state.config.c2);
    let f0 = state.loss;
    let slope0 = dot(&state.grad, d);
    let budget = state.config.max_evaluations;
    let mut used = 0;

    let mut eval = |step: T, state: &mut LbfgsState<T>| -> Result<Probe<T>> {
        let x: Vec<T> = state.x.iter().zip(d).map(|(&xi, &di)| xi + step * di).collect();
        let (loss, grad) = f(&x)?;
        state.evaluations += 1;
        let finite = loss.is_finite() && grad.iter().all(|g| g.is_finite());
        let loss = if finite { loss } else { T::infinity() };
        let slope = if finite { dot(&grad, d) } else { T::nan() };
        Ok(Probe { step, loss, slope, grad })
    };
    let armijo = |p: &Probe<T>| p.loss.is_finite() && p.loss <= f0 + c1 * p.step * slope0;
    let curvature = |p: &Probe<T>| p.slope.abs() <= -c2 * slope0;

    let mut prev = Probe { step: T::zero(), loss: f0, slope: slope0, grad: state.grad.clone() };
    let mut step = T::one();
    let (mut lo, mut hi) = loop {
        if used == budget {
            return Err(Error::LineSearch { evaluations: used });
        }
        used += 1;
        let p = eval(step, state)?;
        if !armijo(&p) || (prev.step > T::zero() && p.loss >= prev.loss) {
            break (prev, p);
        }
        if curvature(&p) {
            return Ok(p);
        }
        if p.slope >= T::zero() {
            break (p, prev);
        }
        step = step * T::of(2.0);
        prev = p;
    };

    loop {
        if used == budget {
            return Err(Error::LineSearch { evaluations: used });
        }
        used += 1;
        let trial = interpolate(&lo, &hi);
        let p = eval(trial, state)?;
        if !armijo(&p) || p.loss >= lo.loss {
            hi = p;
        } else {
            if curvature(&p) {
                return Ok(p);
            }
            if p.slope * (hi.step - lo.step) >= T::zero() {
                hi = std::mem::replace(&mut lo, p);
            } else {
                lo = p;
            }
        }
    }
}

/// Cubic minimizer between two probes, kept inside the middle 80% of the
/// interval; falls back to bisection.
fn interpolate<T: Scalar>(lo: &Probe<T>, hi: &Probe<T>) -> T {
    let (a, b) = (lo.step, hi.step);
    let mid = (a + b) / T::of(2.0);
    if !hi.loss.is_finite() || !hi.slope.is_finite() {
        return mid;
    }
    let d1 = lo.slope + hi.slope - T::of(3.0) * (lo.loss - hi.loss) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if !(disc >= T::zero()) {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + T::of(2.0) * d2);
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = (right - left) * T::of(0.1);
    if t.is_finite() && t >= left + margin && t <= right - margin {
        t
    } else {
        mid
    }
}

/// One L-BFGS iteration. Returns [`StepOutcome::Converged`] without
/// evaluating anything when the current point already satisfies a stopping
/// rule. On line-search failure the state is left at the last accepted
/// point.
pub fn lbfgs_step<T, F>(state: &mut LbfgsState<T>, f: &mut F) -> Result<StepOutcome>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    if let Some(c) = state.converged() {
        return Ok(StepOutcome::Converged(c));
    }
    let mut d = state.direction();
    if !(dot(&state.grad, &d) < T::zero()) {
        state.s_hist.clear();
        state.y_hist.clear();
        d = state.direction();
    }
    let p = line_search(state, &d, f)?;
    let x_new: Vec<T> = state.x.iter().zip(&d).map(|(&xi, &di)| xi + p.step * di).collect();
    let s: Vec<T> = x_new.iter().zip(&state.x).map(|(&a, &b)| a - b).collect();
    let y: Vec<T> = p.grad.iter().zip(&state.grad).map(|(&a, &b)| a - b).collect();
    state.push_pair(s, y);
    state.x = x_new;
    state.loss = p.loss;
    state.grad = p.grad;
    state.iteration += 1;
    state.losses.push(p.loss);
    Ok(StepOutcome::Stepped)
}
