//! The variational assimilation problem: cost, gradient, Hessian-vector
//! products, and the minimization driver.
//!
//! The control variable is the initial state `x0`. The cost is
//!
//! ```text
//! J(x0) = ½ (x0−x_b)ᵀ B⁻¹ (x0−x_b)
//!       + ½ Σ_k (H_k x_k − y_k)ᵀ R_k⁻¹ (H_k x_k − y_k),   x_k = M_{0,k}(x0)
//! ```
//!
//! and its gradient costs one forward run plus one adjoint sweep. Three
//! Hessian-vector products are available: the exact second-order adjoint,
//! a finite difference of gradients, and the Gauss-Newton approximation that
//! drops the terms carrying the observation residual.

use crate::covariance::{BackgroundCov, CovError};
use crate::lbfgs::{minimize_lbfgs, LbfgsError, LbfgsParams, Termination};
use crate::model::{adj_run, fwd_run, soa_run, tlm_run, ModelConfig, ModelError, Trajectory};
use crate::observations::{ObsError, ObservationSet};
use crate::state::{Grid, StateError, StateVector, Var};
use crate::vecmath::{dot, norm};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FourDVarError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error(transparent)]
    Obs(#[from] ObsError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("minimization setup: {0}")]
    Minimize(String),
}

/// Weighting matrix C of the verification functional
/// `Ψ(x) = ½ (x − x_v)ᵀ C (x − x_v)`.
#[derive(Debug, Clone)]
pub enum Weighting {
    Identity,
    /// Diagonal weights, one per state component.
    Diagonal(Vec<f64>),
}

impl Weighting {
    fn check(&self, n: usize) -> Result<(), FourDVarError> {
        match self {
            Weighting::Identity => Ok(()),
            Weighting::Diagonal(d) if d.len() == n => {
                if let Some(w) = d.iter().find(|w| !(**w >= 0.0)) {
                    return Err(FourDVarError::InvalidScenario(format!(
                        "verification weights must be non-negative, got {w}"
                    )));
                }
                Ok(())
            }
            Weighting::Diagonal(d) => Err(FourDVarError::InvalidScenario(format!(
                "{} verification weights for a {n}-component state",
                d.len()
            ))),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Weighting::Identity => v.to_vec(),
            Weighting::Diagonal(d) => v.iter().zip(d).map(|(x, w)| x * w).collect(),
        }
    }
}

/// Everything that defines one assimilation problem: the model window, the
/// background and its covariance, the observations and their error model, and
/// the verification functional used by sensitivity analysis.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ModelConfig,
    background: StateVector,
    background_cov: BackgroundCov,
    observations: ObservationSet,
    verification: StateVector,
    weighting: Weighting,
}

impl Scenario {
    pub fn new(
        config: ModelConfig,
        background: StateVector,
        background_cov: BackgroundCov,
        observations: ObservationSet,
        verification: StateVector,
        weighting: Weighting,
    ) -> Result<Self, FourDVarError> {
        let grid = background.grid();
        if background_cov.grid() != grid
            || observations.grid() != grid
            || verification.grid() != grid
        {
            return Err(FourDVarError::InvalidScenario(
                "background, covariance, observations and verification must share one grid".into(),
            ));
        }
        let last = *observations
            .obs_times()
            .last()
            .expect("observation sets are non-empty");
        if last > config.num_steps {
            return Err(FourDVarError::InvalidScenario(format!(
                "observation time {last} outside the {}-step window",
                config.num_steps
            )));
        }
        weighting.check(grid.state_len())?;
        Ok(Self {
            config,
            background,
            background_cov,
            observations,
            verification,
            weighting,
        })
    }

    pub fn grid(&self) -> Grid {
        self.background.grid()
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn background(&self) -> &StateVector {
        &self.background
    }

    pub fn background_cov(&self) -> &BackgroundCov {
        &self.background_cov
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn verification(&self) -> &StateVector {
        &self.verification
    }

    pub fn weighting(&self) -> &Weighting {
        &self.weighting
    }

    /// Swap in a different observation set (same grid, same window).
    pub fn with_observations(&self, observations: ObservationSet) -> Result<Self, FourDVarError> {
        Self::new(
            self.config,
            self.background.clone(),
            self.background_cov.clone(),
            observations,
            self.verification.clone(),
            self.weighting.clone(),
        )
    }

    /// `∇Ψ(x) = C (x − x_v)`, the right-hand side of the supersensitivity
    /// system.
    pub fn verification_gradient(&self, x: &StateVector) -> StateVector {
        let diff: Vec<f64> = x
            .values()
            .iter()
            .zip(self.verification.values())
            .map(|(a, b)| a - b)
            .collect();
        StateVector::new(self.grid(), self.weighting.apply(&diff)).expect("length preserved")
    }

    /// Run the nonlinear model from `x0` over this scenario's window,
    /// recording the states at the observation times.
    pub fn run_forward(&self, x0: &StateVector) -> Result<Trajectory, FourDVarError> {
        Ok(fwd_run(x0, &self.config, &self.observations.obs_times())?)
    }
}

/// `H_kᵀ R_k⁻¹ (H_k x_k − y_k)` for every observation block, in block order.
fn obs_forcings(traj: &Trajectory, scenario: &Scenario) -> Vec<StateVector> {
    scenario
        .observations
        .blocks()
        .iter()
        .map(|b| {
            let hx = b.apply_operator(traj.state(b.time_index()));
            let w: Vec<f64> = hx
                .iter()
                .zip(b.values())
                .zip(b.variances())
                .map(|((p, y), var)| (p - y) / var)
                .collect();
            let mut f = StateVector::zeros(scenario.grid());
            b.scatter_adjoint(&w, &mut f);
            f
        })
        .collect()
}

fn observation_term(traj: &Trajectory, scenario: &Scenario) -> f64 {
    let mut jo = 0.0;
    for b in scenario.observations.blocks() {
        let hx = b.apply_operator(traj.state(b.time_index()));
        for ((p, y), var) in hx.iter().zip(b.values()).zip(b.variances()) {
            let r = p - y;
            jo += r * r / var;
        }
    }
    0.5 * jo
}

fn background_term(x0: &StateVector, scenario: &Scenario) -> Result<(f64, StateVector), FourDVarError> {
    let diff: Vec<f64> = x0
        .values()
        .iter()
        .zip(scenario.background.values())
        .map(|(a, b)| a - b)
        .collect();
    let diff = StateVector::new(scenario.grid(), diff)?;
    let b_inv_diff = scenario.background_cov.apply_inv(&diff)?;
    Ok((0.5 * dot(diff.values(), b_inv_diff.values()), b_inv_diff))
}

/// The 4D-Var cost at `x0`.
pub fn cost(x0: &StateVector, scenario: &Scenario) -> Result<f64, FourDVarError> {
    let traj = scenario.run_forward(x0)?;
    let (jb, _) = background_term(x0, scenario)?;
    Ok(jb + observation_term(&traj, scenario))
}

/// The exact gradient: `B⁻¹(x0−x_b)` plus one adjoint sweep over the
/// observation forcings.
pub fn gradient(x0: &StateVector, scenario: &Scenario) -> Result<StateVector, FourDVarError> {
    Ok(cost_and_gradient(x0, scenario)?.1)
}

/// Cost and gradient from a single forward run.
pub fn cost_and_gradient(
    x0: &StateVector,
    scenario: &Scenario,
) -> Result<(f64, StateVector), FourDVarError> {
    let traj = scenario.run_forward(x0)?;
    let (jb, b_inv_diff) = background_term(x0, scenario)?;
    let jo = observation_term(&traj, scenario);
    let forcings = obs_forcings(&traj, scenario);
    let mut grad = adj_run(&traj, &forcings)?;
    grad.add_scaled(1.0, &b_inv_diff);
    Ok((jb + jo, grad))
}

/// How to form Hessian-vector products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HessVecMethod {
    /// Exact second-order adjoint (forward-over-reverse).
    Soa,
    /// `(∇J(x0+εu) − ∇J(x0))/ε`; `epsilon = None` picks `1e-6·‖x0‖/‖u‖`.
    FdGrad { epsilon: Option<f64> },
    /// `B⁻¹u + Σ Mᵀ Hᵀ R⁻¹ H M u` — drops the terms carrying the residual.
    GaussNewton,
}

/// `∇²J(x0) · u` by the requested method. A zero direction returns zero
/// for every method (with a warning for the finite-difference one, whose
/// step size is undefined there).
pub fn hess_vec(
    x0: &StateVector,
    u: &StateVector,
    scenario: &Scenario,
    method: HessVecMethod,
) -> Result<StateVector, FourDVarError> {
    let grid = scenario.grid();
    if x0.grid() != grid || u.grid() != grid {
        return Err(FourDVarError::InvalidScenario(
            "state grids do not match the scenario".into(),
        ));
    }
    if norm(u.values()) == 0.0 {
        if let HessVecMethod::FdGrad { .. } = method {
            log::warn!("finite-difference Hessian product of a zero direction; returning zero");
        }
        return Ok(StateVector::zeros(grid));
    }
    PreparedHessian::new(scenario, x0, method)?.apply(u)
}

/// A Hessian fixed at one linearization point, with the forward trajectory
/// (and whatever else the chosen method can reuse) computed once. Repeated
/// products — CG solves, Lanczos, randomized sketching — should go through
/// this instead of [`hess_vec`], which rebuilds the trajectory every call.
pub struct PreparedHessian<'a> {
    scenario: &'a Scenario,
    x0: StateVector,
    traj: Trajectory,
    /// `Hᵀ R⁻¹ (H x_k − y_k)` per block; only the SOA product needs these.
    forcings: Vec<StateVector>,
    /// Gradient at `x0`, shared by every finite-difference product.
    g0: Option<StateVector>,
    method: HessVecMethod,
}

impl<'a> PreparedHessian<'a> {
    pub fn new(
        scenario: &'a Scenario,
        x0: &StateVector,
        method: HessVecMethod,
    ) -> Result<Self, FourDVarError> {
        if x0.grid() != scenario.grid() {
            return Err(FourDVarError::InvalidScenario(
                "linearization point grid does not match the scenario".into(),
            ));
        }
        let traj = scenario.run_forward(x0)?;
        let forcings = match method {
            HessVecMethod::Soa => obs_forcings(&traj, scenario),
            _ => Vec::new(),
        };
        let g0 = match method {
            HessVecMethod::FdGrad { .. } => Some(gradient(x0, scenario)?),
            _ => None,
        };
        Ok(Self {
            scenario,
            x0: x0.clone(),
            traj,
            forcings,
            g0,
            method,
        })
    }

    pub fn dim(&self) -> usize {
        self.scenario.grid().state_len()
    }

    pub fn scenario(&self) -> &'a Scenario {
        self.scenario
    }

    pub fn linearization_point(&self) -> &StateVector {
        &self.x0
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn method(&self) -> HessVecMethod {
        self.method
    }

    /// `∇²J(x0) · u`; identical to [`hess_vec`] at the prepared point.
    pub fn apply(&self, u: &StateVector) -> Result<StateVector, FourDVarError> {
        let grid = self.scenario.grid();
        let u_norm = norm(u.values());
        if u_norm == 0.0 {
            return Ok(StateVector::zeros(grid));
        }
        match self.method {
            HessVecMethod::Soa => {
                let blocks = self.scenario.observations.blocks();
                let jac = |slot: usize, dx: &StateVector| -> StateVector {
                    let b = &blocks[slot];
                    let hdx = b.apply_operator(dx);
                    let w: Vec<f64> = hdx
                        .iter()
                        .zip(b.variances())
                        .map(|(p, var)| p / var)
                        .collect();
                    let mut f = StateVector::zeros(grid);
                    b.scatter_adjoint(&w, &mut f);
                    f
                };
                let mut out = soa_run(&self.traj, u, &self.forcings, &jac)?;
                let b_inv_u = self.scenario.background_cov.apply_inv(u)?;
                out.add_scaled(1.0, &b_inv_u);
                Ok(out)
            }
            HessVecMethod::FdGrad { epsilon } => {
                let x0_norm = norm(self.x0.values());
                let eps = epsilon.unwrap_or_else(|| {
                    if x0_norm > 0.0 {
                        1e-6 * x0_norm / u_norm
                    } else {
                        1e-6 / u_norm
                    }
                });
                let g0 = self.g0.as_ref().expect("cached for FdGrad");
                let mut xp = self.x0.clone();
                xp.add_scaled(eps, u);
                let g1 = gradient(&xp, self.scenario)?;
                let vals: Vec<f64> = g1
                    .values()
                    .iter()
                    .zip(g0.values())
                    .map(|(a, b)| (a - b) / eps)
                    .collect();
                Ok(StateVector::new(grid, vals)?)
            }
            HessVecMethod::GaussNewton => {
                let tangent = tlm_run(&self.traj, u)?;
                let forcings: Vec<StateVector> = self
                    .scenario
                    .observations
                    .blocks()
                    .iter()
                    .zip(&tangent.at_obs_times)
                    .map(|(b, dx)| {
                        let hdx = b.apply_operator(dx);
                        let w: Vec<f64> = hdx
                            .iter()
                            .zip(b.variances())
                            .map(|(p, var)| p / var)
                            .collect();
                        let mut f = StateVector::zeros(grid);
                        b.scatter_adjoint(&w, &mut f);
                        f
                    })
                    .collect();
                let mut out = adj_run(&self.traj, &forcings)?;
                let b_inv_u = self.scenario.background_cov.apply_inv(u)?;
                out.add_scaled(1.0, &b_inv_u);
                Ok(out)
            }
        }
    }
}

/// Root-mean-square difference of one variable between two states on the
/// same grid.
pub fn rms_error(x: &StateVector, x_ref: &StateVector, var: Var) -> f64 {
    assert_eq!(x.grid(), x_ref.grid(), "states must share a grid");
    let a = x.field(var);
    let b = x_ref.field(var);
    let cells = x.grid().cells() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    (sum / cells).sqrt()
}

/// Per-iteration diagnostics of one minimization: cost, gradient norm, and
/// RMS distance to the verification state for each variable. All histories
/// have `iterations + 1` entries (the initial point plus each accepted step).
#[derive(Debug, Clone)]
pub struct ConvergenceRecord {
    pub costs: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Indexed by [`Var::block`].
    pub rms: [Vec<f64>; 3],
    pub iterations: usize,
    pub termination: Termination,
    pub evaluations: usize,
}

impl ConvergenceRecord {
    pub fn rms_of(&self, var: Var) -> &[f64] {
        &self.rms[var.block()]
    }
}

/// Minimize the scenario's cost from `x_init` with default L-BFGS settings.
pub fn minimize(
    scenario: &Scenario,
    x_init: &StateVector,
    max_iters: usize,
) -> Result<(StateVector, ConvergenceRecord), FourDVarError> {
    minimize_with(scenario, x_init, max_iters, &LbfgsParams::default())
}

/// Minimize with explicit L-BFGS parameters. Runs `max_iters` iterations
/// unless the gradient tolerance is met early; a failed line search ends the
/// run with the best iterate found so far.
pub fn minimize_with(
    scenario: &Scenario,
    x_init: &StateVector,
    max_iters: usize,
    params: &LbfgsParams,
) -> Result<(StateVector, ConvergenceRecord), FourDVarError> {
    let grid = scenario.grid();
    if x_init.grid() != grid {
        return Err(FourDVarError::InvalidScenario(
            "initial state grid does not match the scenario".into(),
        ));
    }
    let eval = |xs: &[f64]| -> Result<(f64, Vec<f64>), FourDVarError> {
        let x = StateVector::new(grid, xs.to_vec())?;
        let (j, g) = cost_and_gradient(&x, scenario)?;
        Ok((j, g.into_values()))
    };

    let mut rms: [Vec<f64>; 3] = Default::default();
    let reference = scenario.verification.values();
    let cells = grid.cells();
    let outcome = minimize_lbfgs(eval, x_init.values(), max_iters, params, |_, xs, _, _| {
        for var in Var::ALL {
            let o = var.block() * cells;
            let sum: f64 = xs[o..o + cells]
                .iter()
                .zip(&reference[o..o + cells])
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            rms[var.block()].push((sum / cells as f64).sqrt());
        }
    })
    .map_err(|e| match e {
        LbfgsError::Eval(inner) => inner,
        LbfgsError::InvalidInput(msg) => FourDVarError::Minimize(msg),
    })?;

    let record = ConvergenceRecord {
        costs: outcome.cost_history,
        grad_norms: outcome.grad_norm_history,
        rms,
        iterations: outcome.iterations,
        termination: outcome.termination,
        evaluations: outcome.evaluations,
    };
    let x_a = StateVector::new(grid, outcome.x)?;
    Ok((x_a, record))
}
