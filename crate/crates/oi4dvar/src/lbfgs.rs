//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The minimizer is generic over a fallible cost-and-gradient closure so the
//! caller decides what an evaluation failure means. Failures at trial points
//! *inside* the line search are treated as "step too aggressive" (the trial
//! behaves like an infinite cost and the search backtracks); only a failure at
//! an accepted iterate aborts the run. A line search that cannot satisfy the
//! Wolfe conditions terminates the minimization gracefully with the best
//! iterate found so far and a flag, not an error.

use std::collections::VecDeque;
use thiserror::Error;

use crate::vecmath::{axpy, dot, norm};

#[derive(Debug, Error)]
pub enum LbfgsError<E> {
    /// The cost function failed at an accepted iterate (not a trial point).
    #[error("cost evaluation failed: {0}")]
    Eval(#[source] E),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient norm fell below the relative tolerance.
    GradientTolerance,
    /// The iteration budget was used in full.
    MaxIters,
    /// No step satisfying the strong Wolfe conditions could be found.
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct LbfgsParams {
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant (strong Wolfe).
    pub c2: f64,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

/// Early-stop threshold: stop when `‖∇J‖ < GRAD_STOP_FACTOR * (1 + |J|)`.
pub const GRAD_STOP_FACTOR: f64 = 1e-10;

/// Stored curvature pairs; doubles as a diagnostic approximation of the
/// inverse Hessian through the standard two-loop recursion.
#[derive(Debug, Clone, Default)]
pub struct LbfgsMemory {
    /// (s, y, 1/(y·s)) with the newest pair at the back.
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl LbfgsMemory {
    fn new(capacity: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let ys = dot(&y, &s);
        // Guard the curvature condition; skip pairs that would break SPD-ness.
        if ys <= 1e-10 * norm(&s) * norm(&y) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / ys));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Two-loop recursion: apply the implied inverse-Hessian approximation.
    /// With no stored pairs this is the identity.
    pub fn apply_inverse(&self, v: &[f64]) -> Vec<f64> {
        let mut q = v.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for x in &mut q {
                *x *= gamma;
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    /// Best (lowest-cost) accepted iterate.
    pub x: Vec<f64>,
    pub cost: f64,
    pub grad_norm: f64,
    /// Accepted iterations actually performed.
    pub iterations: usize,
    pub termination: Termination,
    /// Cost at the initial point and after every accepted iteration.
    pub cost_history: Vec<f64>,
    /// Gradient norms aligned with `cost_history`.
    pub grad_norm_history: Vec<f64>,
    /// Number of cost/gradient evaluations.
    pub evaluations: usize,
    /// Final curvature pairs, usable as an inverse-Hessian diagnostic.
    pub memory: LbfgsMemory,
}

struct Evaluation {
    cost: f64,
    grad: Vec<f64>,
}

/// Minimize `eval` starting from `x0`, running at most `max_iters` accepted
/// iterations. `on_accept(iter, x, cost, grad_norm)` fires for the initial
/// point (iter 0) and after each accepted step.
pub fn minimize_lbfgs<F, E>(
    mut eval: F,
    x0: &[f64],
    max_iters: usize,
    params: &LbfgsParams,
    mut on_accept: impl FnMut(usize, &[f64], f64, f64),
) -> Result<LbfgsOutcome, LbfgsError<E>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    if max_iters == 0 {
        return Err(LbfgsError::InvalidInput("max_iters must be ≥ 1".into()));
    }
    if params.memory == 0 || !(0.0 < params.c1 && params.c1 < params.c2 && params.c2 < 1.0) {
        return Err(LbfgsError::InvalidInput(format!(
            "need memory ≥ 1 and 0 < c1 < c2 < 1 (memory {}, c1 {}, c2 {})",
            params.memory, params.c1, params.c2
        )));
    }

    let mut evaluations = 1usize;
    let mut x = x0.to_vec();
    let (cost0, grad0) = eval(&x).map_err(LbfgsError::Eval)?;
    let mut current = Evaluation {
        cost: cost0,
        grad: grad0,
    };
    let mut memory = LbfgsMemory::new(params.memory);

    let mut cost_history = vec![current.cost];
    let mut grad_norm_history = vec![norm(&current.grad)];
    on_accept(0, &x, current.cost, grad_norm_history[0]);

    let mut best_x = x.clone();
    let mut best = Evaluation {
        cost: current.cost,
        grad: current.grad.clone(),
    };

    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    for iter in 0..max_iters {
        let grad_norm = norm(&current.grad);
        if grad_norm < GRAD_STOP_FACTOR * (1.0 + current.cost.abs()) {
            termination = Termination::GradientTolerance;
            break;
        }

        let mut direction = memory.apply_inverse(&current.grad);
        for d in &mut direction {
            *d = -*d;
        }
        let mut dphi0 = dot(&direction, &current.grad);
        if dphi0 >= 0.0 {
            // The memory produced an ascent direction (numerical breakdown):
            // fall back to steepest descent with a fresh memory.
            memory = LbfgsMemory::new(params.memory);
            direction = current.grad.iter().map(|g| -g).collect();
            dphi0 = -grad_norm * grad_norm;
        }

        let alpha_init = if memory.is_empty() {
            (1.0 / grad_norm).min(1.0)
        } else {
            1.0
        };

        let search = line_search(
            &mut eval,
            &x,
            &direction,
            current.cost,
            dphi0,
            alpha_init,
            params,
            &mut evaluations,
        );

        let Some((alpha, trial)) = search else {
            termination = Termination::LineSearchFailure;
            break;
        };

        let mut x_new = x.clone();
        axpy(alpha, &direction, &mut x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial
            .grad
            .iter()
            .zip(&current.grad)
            .map(|(a, b)| a - b)
            .collect();
        memory.push(s, y);

        x = x_new;
        current = trial;
        iterations = iter + 1;
        let gn = norm(&current.grad);
        cost_history.push(current.cost);
        grad_norm_history.push(gn);
        on_accept(iterations, &x, current.cost, gn);

        if current.cost <= best.cost {
            best_x = x.clone();
            best = Evaluation {
                cost: current.cost,
                grad: current.grad.clone(),
            };
        }
    }

    // The loop may end by exhausting the budget with the tolerance met at the
    // final iterate; report that as convergence.
    if termination == Termination::MaxIters
        && norm(&current.grad) < GRAD_STOP_FACTOR * (1.0 + current.cost.abs())
    {
        termination = Termination::GradientTolerance;
    }

    Ok(LbfgsOutcome {
        x: best_x,
        cost: best.cost,
        grad_norm: norm(&best.grad),
        iterations,
        termination,
        cost_history,
        grad_norm_history,
        evaluations,
        memory,
    })
}

const MAX_BRACKET: usize = 30;
const MAX_ZOOM: usize = 40;
const ALPHA_MAX: f64 = 1e10;

/// Strong-Wolfe line search (bracket then zoom). Returns the accepted step
/// and its evaluation, or `None` when no acceptable step exists. Trial-point
/// evaluation failures behave as infinite cost so the search backtracks.
#[allow(clippy::too_many_arguments)]
fn line_search<F, E>(
    eval: &mut F,
    x: &[f64],
    d: &[f64],
    phi0: f64,
    dphi0: f64,
    alpha_init: f64,
    params: &LbfgsParams,
    evaluations: &mut usize,
) -> Option<(f64, Evaluation)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let c1 = params.c1;
    let c2 = params.c2;
    let eps_f = flat_cost_allowance(phi0);

    let mut alpha_prev = 0.0;
    let mut phi_prev = phi0;
    let mut dphi_prev = dphi0;
    let mut alpha = alpha_init.min(ALPHA_MAX);

    for i in 0..MAX_BRACKET {
        let (phi_a, dphi_a, ev) = probe(eval, x, d, alpha, evaluations);
        // Approximate-Wolfe acceptance: once per-step cost changes drop to
        // the floating-point resolution of J, the sufficient-decrease test
        // is pure noise; accept on the curvature condition alone as long as
        // the cost did not rise beyond that noise.
        if phi_a <= phi0 + eps_f && dphi_a.abs() <= -c2 * dphi0 {
            return ev.map(|ev| (alpha, ev));
        }
        if phi_a > phi0 + c1 * alpha * dphi0 || (i > 0 && phi_a >= phi_prev) {
            return zoom(
                eval,
                x,
                d,
                phi0,
                dphi0,
                (alpha_prev, phi_prev, dphi_prev),
                (alpha, phi_a, dphi_a),
                params,
                evaluations,
            );
        }
        let ev = ev.expect("finite cost implies evaluation");
        if dphi_a.abs() <= -c2 * dphi0 {
            return Some((alpha, ev));
        }
        if dphi_a >= 0.0 {
            return zoom(
                eval,
                x,
                d,
                phi0,
                dphi0,
                (alpha, phi_a, dphi_a),
                (alpha_prev, phi_prev, dphi_prev),
                params,
                evaluations,
            );
        }
        alpha_prev = alpha;
        phi_prev = phi_a;
        dphi_prev = dphi_a;
        alpha *= 2.0;
        if alpha > ALPHA_MAX {
            return None;
        }
    }
    None
}

/// Cost differences smaller than this are indistinguishable from roundoff in
/// the endgame of a minimization; used by the approximate-Wolfe acceptance.
fn flat_cost_allowance(phi0: f64) -> f64 {
    1e-12 * (1.0 + phi0.abs())
}

/// Evaluate at `x + alpha d`; failures and non-finite costs read as +∞ so the
/// search treats the trial as too aggressive.
fn probe<F, E>(
    eval: &mut F,
    x: &[f64],
    d: &[f64],
    alpha: f64,
    evaluations: &mut usize,
) -> (f64, f64, Option<Evaluation>)
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let mut xt = x.to_vec();
    axpy(alpha, d, &mut xt);
    *evaluations += 1;
    match eval(&xt) {
        Ok((cost, grad)) if cost.is_finite() => {
            let slope = dot(&grad, d);
            (cost, slope, Some(Evaluation { cost, grad }))
        }
        _ => (f64::INFINITY, f64::INFINITY, None),
    }
}

/// Zoom phase: shrink `[lo, hi]` (cost-ordered, not value-ordered) until a
/// strong-Wolfe point appears. Cubic interpolation with a bisection
/// safeguard.
#[allow(clippy::too_many_arguments)]
fn zoom<F, E>(
    eval: &mut F,
    x: &[f64],
    d: &[f64],
    phi0: f64,
    dphi0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    params: &LbfgsParams,
    evaluations: &mut usize,
) -> Option<(f64, Evaluation)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    let c1 = params.c1;
    let c2 = params.c2;
    let eps_f = flat_cost_allowance(phi0);
    for _ in 0..MAX_ZOOM {
        let (a_lo, phi_lo, dphi_lo) = lo;
        let (a_hi, phi_hi, _) = hi;
        let width = (a_hi - a_lo).abs();
        if width < 1e-16 * (1.0 + a_lo.abs()) {
            return None;
        }

        let mut alpha = cubic_min(a_lo, phi_lo, dphi_lo, a_hi, phi_hi);
        let lo_end = a_lo.min(a_hi) + 0.1 * width;
        let hi_end = a_lo.max(a_hi) - 0.1 * width;
        if !(alpha.is_finite() && alpha >= lo_end && alpha <= hi_end) {
            alpha = 0.5 * (a_lo + a_hi);
        }

        let (phi_a, dphi_a, ev) = probe(eval, x, d, alpha, evaluations);
        // Same flat-regime acceptance as the bracketing phase.
        if phi_a <= phi0 + eps_f && dphi_a.abs() <= -c2 * dphi0 {
            return ev.map(|ev| (alpha, ev));
        }

        if phi_a > phi0 + c1 * alpha * dphi0 || phi_a >= phi_lo {
            hi = (alpha, phi_a, dphi_a);
        } else {
            let ev = ev.expect("finite cost implies evaluation");
            if dphi_a.abs() <= -c2 * dphi0 {
                return Some((alpha, ev));
            }
            if dphi_a * (a_hi - a_lo) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, phi_a, dphi_a);
        }
    }
    None
}

/// Minimizer of the cubic interpolant matching `(a, fa, dfa)` and `(b, fb)`;
/// falls back to NaN (caller bisects) when the interpolation degenerates.
fn cubic_min(a: f64, fa: f64, dfa: f64, b: f64, fb: f64) -> f64 {
    if !fb.is_finite() {
        return f64::NAN;
    }
    let db = b - a;
    if db == 0.0 {
        return f64::NAN;
    }
    // Quadratic model through (a, fa, dfa) and (b, fb).
    let denom = fb - fa - dfa * db;
    if denom.abs() < 1e-300 {
        return f64::NAN;
    }
    a - dfa * db * db / (2.0 * denom)
}
