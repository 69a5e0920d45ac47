//! 2D shallow-water dynamics with tangent-linear, adjoint, and second-order
//! adjoint models.
//!
//! The forward step integrates the conservative form
//!
//! ```text
//! d/dt [h, hu, hv] + d/dx F + d/dy G = 0
//! F = [hu, hu^2 + g h^2/2, huv]      G = [hv, huv, hv^2 + g h^2/2]
//! ```
//!
//! with the two-step Lax-Wendroff (Richtmyer) finite-volume scheme on a
//! periodic cell-centered grid: half-step predictor states on the cell faces,
//! then a conservative corrector from the face fluxes. States are stored as
//! primitives `(h, u, v)`; momenta are formed inside the flux evaluation.
//!
//! The step is written once, generic over [`Scalar`]:
//!
//! * at `f64` it is the nonlinear model;
//! * at [`Dual`] the derivative part carries the exact tangent-linear model.
//!
//! The adjoint step is the hand-derived transpose of that linearisation,
//! stage by stage in reverse. It is also generic over [`Scalar`], so running
//! it on dual numbers (primal part = stored trajectory, derivative part =
//! tangent-propagated perturbation) differentiates the whole adjoint sweep in
//! a chosen direction — forward-over-reverse — which is exactly the
//! second-order adjoint needed for Hessian-vector products.

use crate::dual::{Dual, Scalar};
use crate::state::{Grid, StateVector, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("CFL number {cfl:.3e} exceeds 1 at step {step} (reduce dt or refine the grid)")]
    CflViolation { step: usize, cfl: f64 },
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("non-positive water height at step {step}")]
    NonPositiveDepth { step: usize },
    #[error("invalid observation times: {0}")]
    ObsTimes(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Time-stepping parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub gravity: f64,
    pub dt: f64,
    pub num_steps: usize,
}

impl ModelConfig {
    pub fn new(gravity: f64, dt: f64, num_steps: usize) -> ModelConfig {
        ModelConfig {
            gravity,
            dt,
            num_steps,
        }
    }
}

/// Stored forward solution: every intermediate state plus the observation
/// schedule it was run for. The adjoint and second-order sweeps replay the
/// linearisation from these states.
#[derive(Debug, Clone)]
pub struct Trajectory {
    states: Vec<StateVector>,
    config: ModelConfig,
    obs_times: Vec<usize>,
}

impl Trajectory {
    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn state(&self, step: usize) -> &StateVector {
        &self.states[step]
    }

    pub fn initial(&self) -> &StateVector {
        &self.states[0]
    }

    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("trajectory holds >= 1 state")
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn obs_times(&self) -> &[usize] {
        &self.obs_times
    }

    pub fn grid(&self) -> Grid {
        self.states[0].grid()
    }

    /// States at the observation times, in schedule order.
    pub fn obs_states(&self) -> Vec<&StateVector> {
        self.obs_times.iter().map(|&t| &self.states[t]).collect()
    }
}

/// Tangent-linear perturbations at the trajectory's observation times.
#[derive(Debug, Clone)]
pub struct TangentSnapshot {
    pub at_obs_times: Vec<StateVector>,
}

/// Classic dam-break initial condition: a Gaussian hump of water at rest,
/// `h = 1 + exp(-(x^2 + y^2) / (2 * 0.5^2))`, `u = v = 0`.
pub fn circular_dam_state(grid: Grid) -> StateVector {
    let mut s = StateVector::uniform(grid, 1.0, 0.0, 0.0);
    s.field_mut(Var::H)
        .fill_with(|x, y| 1.0 + (-(x * x + y * y) / (2.0 * 0.5 * 0.5)).exp());
    s
}

/// Largest advective CFL number of `state` under `config`.
pub fn cfl_number(state: &StateVector, config: &ModelConfig) -> f64 {
    let grid = state.grid();
    let h = state.field(Var::H);
    let u = state.field(Var::U);
    let v = state.field(Var::V);
    let mut worst: f64 = 0.0;
    for idx in 0..grid.cells() {
        let c = (config.gravity * h.data()[idx]).sqrt();
        let cx = (u.data()[idx].abs() + c) * config.dt / grid.dx();
        let cy = (v.data()[idx].abs() + c) * config.dt / grid.dy();
        worst = worst.max(cx).max(cy);
    }
    worst
}

fn check_state(state: &StateVector, step: usize) -> Result<(), ModelError> {
    if !state.all_finite() {
        return Err(ModelError::NonFiniteState { step });
    }
    if state.field(Var::H).data().iter().any(|&h| h <= 0.0) {
        return Err(ModelError::NonPositiveDepth { step });
    }
    Ok(())
}

/// One forward step with stability and validity checks.
pub fn fwd_step(state: &StateVector, config: &ModelConfig) -> Result<StateVector, ModelError> {
    fwd_step_at(state, config, 0)
}

fn fwd_step_at(
    state: &StateVector,
    config: &ModelConfig,
    step: usize,
) -> Result<StateVector, ModelError> {
    check_state(state, step)?;
    let cfl = cfl_number(state, config);
    if !(cfl <= 1.0) {
        return Err(ModelError::CflViolation { step, cfl });
    }
    let grid = state.grid();
    let out = step_kernel::<f64>(grid, config, state.values());
    let next = StateVector::new(grid, out).expect("kernel preserves length");
    check_state(&next, step + 1)?;
    Ok(next)
}

/// Integrate `config.num_steps` steps from `x0`, retaining every state.
///
/// `obs_times` must be strictly increasing step indices within `[0, N]`; they
/// are stored on the trajectory and define the slots that `tlm_run`,
/// `adj_run`, and `soa_run` address.
pub fn fwd_run(
    x0: &StateVector,
    config: &ModelConfig,
    obs_times: &[usize],
) -> Result<Trajectory, ModelError> {
    if !obs_times.windows(2).all(|w| w[0] < w[1]) {
        return Err(ModelError::ObsTimes(
            "observation times must be strictly increasing".to_string(),
        ));
    }
    if let Some(&last) = obs_times.last() {
        if last > config.num_steps {
            return Err(ModelError::ObsTimes(format!(
                "observation time {last} exceeds the window length {}",
                config.num_steps
            )));
        }
    }
    let mut states = Vec::with_capacity(config.num_steps + 1);
    check_state(x0, 0)?;
    states.push(x0.clone());
    for step in 0..config.num_steps {
        let next = fwd_step_at(&states[step], config, step)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        config: *config,
        obs_times: obs_times.to_vec(),
    })
}

/// Propagate an initial perturbation through the linearised model; returns
/// the perturbation at each observation time.
pub fn tlm_run(traj: &Trajectory, dx0: &StateVector) -> Result<TangentSnapshot, ModelError> {
    let all = tlm_run_all(traj, dx0)?;
    Ok(TangentSnapshot {
        at_obs_times: traj.obs_times.iter().map(|&t| all[t].clone()).collect(),
    })
}

/// Tangent-linear perturbation at every step (index 0..=N).
pub(crate) fn tlm_run_all(
    traj: &Trajectory,
    dx0: &StateVector,
) -> Result<Vec<StateVector>, ModelError> {
    let duals = dual_trajectory(traj, dx0)?;
    Ok(duals
        .iter()
        .map(|d| {
            StateVector::new(traj.grid(), d.iter().map(|s| s.der).collect())
                .expect("kernel preserves length")
        })
        .collect())
}

fn dual_trajectory(traj: &Trajectory, dx0: &StateVector) -> Result<Vec<Vec<Dual>>, ModelError> {
    let grid = traj.grid();
    if dx0.grid() != grid {
        return Err(ModelError::ShapeMismatch(
            "perturbation grid differs from trajectory grid".to_string(),
        ));
    }
    let config = traj.config;
    let mut duals: Vec<Vec<Dual>> = Vec::with_capacity(traj.states.len());
    duals.push(
        traj.states[0]
            .values()
            .iter()
            .zip(dx0.values())
            .map(|(&v, &d)| Dual::new(v, d))
            .collect(),
    );
    for _ in 0..config.num_steps {
        let next = step_kernel::<Dual>(grid, &config, duals.last().unwrap());
        duals.push(next);
    }
    Ok(duals)
}

/// Adjoint sweep: returns `sum_k M_{0,k}^T f_k` for per-observation-time
/// forcings `f_k` (already in state space), i.e. the transpose of the
/// tangent-linear map underlying [`tlm_run`].
pub fn adj_run(traj: &Trajectory, forcings: &[StateVector]) -> Result<StateVector, ModelError> {
    let grid = traj.grid();
    validate_forcings(traj, forcings)?;
    let config = traj.config;
    let mut lambda = vec![0.0f64; grid.state_len()];
    for step in (0..traj.states.len()).rev() {
        if let Some(slot) = traj.obs_times.iter().position(|&t| t == step) {
            for (l, f) in lambda.iter_mut().zip(forcings[slot].values()) {
                *l += *f;
            }
        }
        if step > 0 {
            lambda = adj_step_kernel::<f64>(grid, &config, traj.states[step - 1].values(), &lambda);
        }
    }
    Ok(StateVector::new(grid, lambda).expect("kernel preserves length"))
}

/// Directional derivative of the adjoint sweep along `tangent_dir`
/// (forward-over-reverse differentiation of [`adj_run`]).
///
/// `forcings` are the adjoint forcings evaluated on the base trajectory;
/// `forcing_jacobian(k, dx_k)` must return the derivative of forcing `k` when
/// the state at its observation time is perturbed by `dx_k` (pass a closure
/// returning zeros for state-independent forcings). The result is the exact
/// second-order term needed for Hessian-vector products: one tangent
/// propagation plus one dual-number adjoint sweep.
pub fn soa_run(
    traj: &Trajectory,
    tangent_dir: &StateVector,
    forcings: &[StateVector],
    forcing_jacobian: &dyn Fn(usize, &StateVector) -> StateVector,
) -> Result<StateVector, ModelError> {
    let grid = traj.grid();
    validate_forcings(traj, forcings)?;
    let config = traj.config;
    let duals = dual_trajectory(traj, tangent_dir)?;

    let mut lambda = vec![Dual::constant(0.0); grid.state_len()];
    for step in (0..traj.states.len()).rev() {
        if let Some(slot) = traj.obs_times.iter().position(|&t| t == step) {
            let dx_k = StateVector::new(grid, duals[step].iter().map(|d| d.der).collect())
                .expect("kernel preserves length");
            let df = forcing_jacobian(slot, &dx_k);
            if df.grid() != grid {
                return Err(ModelError::ShapeMismatch(
                    "forcing jacobian output grid differs from trajectory grid".to_string(),
                ));
            }
            for ((l, f), d) in lambda
                .iter_mut()
                .zip(forcings[slot].values())
                .zip(df.values())
            {
                *l = *l + Dual::new(*f, *d);
            }
        }
        if step > 0 {
            lambda = adj_step_kernel::<Dual>(grid, &config, &duals[step - 1], &lambda);
        }
    }
    Ok(
        StateVector::new(grid, lambda.iter().map(|d| d.der).collect())
            .expect("kernel preserves length"),
    )
}

fn validate_forcings(traj: &Trajectory, forcings: &[StateVector]) -> Result<(), ModelError> {
    if forcings.len() != traj.obs_times.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} forcings for {} observation times",
            forcings.len(),
            traj.obs_times.len()
        )));
    }
    if forcings.iter().any(|f| f.grid() != traj.grid()) {
        return Err(ModelError::ShapeMismatch(
            "forcing grid differs from trajectory grid".to_string(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Kernels. One flat array per stage; component `c` of cell `(i, j)` lives at
// `c * q * q + i * q + j`, matching the packed state layout.
// ---------------------------------------------------------------------------

#[inline]
fn flux_x<S: Scalar>(g: S, half: S, c0: S, c1: S, c2: S) -> (S, S, S) {
    (c1, c1 * c1 / c0 + half * g * c0 * c0, c1 * c2 / c0)
}

#[inline]
fn flux_y<S: Scalar>(g: S, half: S, c0: S, c1: S, c2: S) -> (S, S, S) {
    (c2, c1 * c2 / c0, c2 * c2 / c0 + half * g * c0 * c0)
}

/// Transpose of the x-flux Jacobian at `(c0, c1, c2)` applied to `(w0, w1, w2)`.
#[inline]
fn flux_x_adj<S: Scalar>(g: S, c0: S, c1: S, c2: S, w0: S, w1: S, w2: S) -> (S, S, S) {
    let u = c1 / c0;
    let b0 = (g * c0 - u * u) * w1 - u * (c2 / c0) * w2;
    let b1 = w0 + (u + u) * w1 + (c2 / c0) * w2;
    let b2 = u * w2;
    (b0, b1, b2)
}

/// Transpose of the y-flux Jacobian at `(c0, c1, c2)` applied to `(w0, w1, w2)`.
#[inline]
fn flux_y_adj<S: Scalar>(g: S, c0: S, c1: S, c2: S, w0: S, w1: S, w2: S) -> (S, S, S) {
    let v = c2 / c0;
    let b0 = -v * (c1 / c0) * w1 + (g * c0 - v * v) * w2;
    let b1 = v * w1;
    let b2 = w0 + (c1 / c0) * w1 + (v + v) * w2;
    (b0, b1, b2)
}

struct StageData<S> {
    /// Conservative cell states.
    c: Vec<S>,
    /// Half-step predictor states on x- and y-faces (face `(i,j)` sits between
    /// cell `(i,j)` and its +x / +y neighbour).
    px: Vec<S>,
    py: Vec<S>,
    /// Corrected conservative states.
    cp: Vec<S>,
}

/// Forward stages shared by the step and the adjoint's recomputation.
fn forward_stages<S: Scalar>(grid: Grid, config: &ModelConfig, prim: &[S]) -> StageData<S> {
    let q = grid.q();
    let n2 = q * q;
    let half = S::from_f64(0.5);
    let g = S::from_f64(config.gravity);
    let ax = S::from_f64(0.5 * config.dt / grid.dx());
    let ay = S::from_f64(0.5 * config.dt / grid.dy());
    let bx = S::from_f64(config.dt / grid.dx());
    let by = S::from_f64(config.dt / grid.dy());

    let mut c = vec![S::zero(); 3 * n2];
    for a in 0..n2 {
        let h = prim[a];
        c[a] = h;
        c[n2 + a] = prim[n2 + a] * h;
        c[2 * n2 + a] = prim[2 * n2 + a] * h;
    }

    let mut fx = vec![S::zero(); 3 * n2];
    let mut gy = vec![S::zero(); 3 * n2];
    for a in 0..n2 {
        let (f0, f1, f2) = flux_x(g, half, c[a], c[n2 + a], c[2 * n2 + a]);
        fx[a] = f0;
        fx[n2 + a] = f1;
        fx[2 * n2 + a] = f2;
        let (g0, g1, g2) = flux_y(g, half, c[a], c[n2 + a], c[2 * n2 + a]);
        gy[a] = g0;
        gy[n2 + a] = g1;
        gy[2 * n2 + a] = g2;
    }

    let mut px = vec![S::zero(); 3 * n2];
    let mut py = vec![S::zero(); 3 * n2];
    for i in 0..q {
        for j in 0..q {
            let a = i * q + j;
            let r = ((i + 1) % q) * q + j;
            let t = i * q + (j + 1) % q;
            for comp in 0..3 {
                let o = comp * n2;
                px[o + a] = half * (c[o + r] + c[o + a]) - ax * (fx[o + r] - fx[o + a]);
                py[o + a] = half * (c[o + t] + c[o + a]) - ay * (gy[o + t] - gy[o + a]);
            }
        }
    }

    let mut fpx = vec![S::zero(); 3 * n2];
    let mut gpy = vec![S::zero(); 3 * n2];
    for a in 0..n2 {
        let (f0, f1, f2) = flux_x(g, half, px[a], px[n2 + a], px[2 * n2 + a]);
        fpx[a] = f0;
        fpx[n2 + a] = f1;
        fpx[2 * n2 + a] = f2;
        let (g0, g1, g2) = flux_y(g, half, py[a], py[n2 + a], py[2 * n2 + a]);
        gpy[a] = g0;
        gpy[n2 + a] = g1;
        gpy[2 * n2 + a] = g2;
    }

    let mut cp = vec![S::zero(); 3 * n2];
    for i in 0..q {
        for j in 0..q {
            let a = i * q + j;
            let l = ((i + q - 1) % q) * q + j;
            let d = i * q + (j + q - 1) % q;
            for comp in 0..3 {
                let o = comp * n2;
                cp[o + a] =
                    c[o + a] - bx * (fpx[o + a] - fpx[o + l]) - by * (gpy[o + a] - gpy[o + d]);
            }
        }
    }

    StageData { c, px, py, cp }
}

/// One Lax-Wendroff step on primitive variables.
fn step_kernel<S: Scalar>(grid: Grid, config: &ModelConfig, prim: &[S]) -> Vec<S> {
    let n2 = grid.cells();
    let stages = forward_stages(grid, config, prim);
    let mut out = vec![S::zero(); 3 * n2];
    for a in 0..n2 {
        let c0 = stages.cp[a];
        out[a] = c0;
        out[n2 + a] = stages.cp[n2 + a] / c0;
        out[2 * n2 + a] = stages.cp[2 * n2 + a] / c0;
    }
    out
}

/// Transpose of the step's linearisation at `prim`, applied to the cotangent
/// `cot` (given on the *output* primitives). Each forward stage is transposed
/// in reverse order; the forward intermediates are recomputed from `prim`.
fn adj_step_kernel<S: Scalar>(grid: Grid, config: &ModelConfig, prim: &[S], cot: &[S]) -> Vec<S> {
    let q = grid.q();
    let n2 = q * q;
    let half = S::from_f64(0.5);
    let g = S::from_f64(config.gravity);
    let ax = S::from_f64(0.5 * config.dt / grid.dx());
    let ay = S::from_f64(0.5 * config.dt / grid.dy());
    let bx = S::from_f64(config.dt / grid.dx());
    let by = S::from_f64(config.dt / grid.dy());

    let stages = forward_stages(grid, config, prim);

    // Conversion to output primitives: h' = c0', u' = c1'/c0', v' = c2'/c0'.
    let mut cpb = vec![S::zero(); 3 * n2];
    for a in 0..n2 {
        let c0p = stages.cp[a];
        let up = stages.cp[n2 + a] / c0p;
        let vp = stages.cp[2 * n2 + a] / c0p;
        let c1b = cot[n2 + a] / c0p;
        let c2b = cot[2 * n2 + a] / c0p;
        cpb[a] = cot[a] - up * c1b - vp * c2b;
        cpb[n2 + a] = c1b;
        cpb[2 * n2 + a] = c2b;
    }

    // Corrector: c' = c - bx (fpx - fpx_left) - by (gpy - gpy_down).
    let mut cb = vec![S::zero(); 3 * n2];
    let mut fpxb = vec![S::zero(); 3 * n2];
    let mut gpyb = vec![S::zero(); 3 * n2];
    for i in 0..q {
        for j in 0..q {
            let a = i * q + j;
            let l = ((i + q - 1) % q) * q + j;
            let d = i * q + (j + q - 1) % q;
            for comp in 0..3 {
                let o = comp * n2;
                let w = cpb[o + a];
                cb[o + a] = cb[o + a] + w;
                fpxb[o + a] = fpxb[o + a] - bx * w;
                fpxb[o + l] = fpxb[o + l] + bx * w;
                gpyb[o + a] = gpyb[o + a] - by * w;
                gpyb[o + d] = gpyb[o + d] + by * w;
            }
        }
    }

    // Face fluxes: transpose the flux Jacobians at the predictor states.
    let mut pxb = vec![S::zero(); 3 * n2];
    let mut pyb = vec![S::zero(); 3 * n2];
    for a in 0..n2 {
        let (b0, b1, b2) = flux_x_adj(
            g,
            stages.px[a],
            stages.px[n2 + a],
            stages.px[2 * n2 + a],
            fpxb[a],
            fpxb[n2 + a],
            fpxb[2 * n2 + a],
        );
        pxb[a] = b0;
        pxb[n2 + a] = b1;
        pxb[2 * n2 + a] = b2;
        let (b0, b1, b2) = flux_y_adj(
            g,
            stages.py[a],
            stages.py[n2 + a],
            stages.py[2 * n2 + a],
            gpyb[a],
            gpyb[n2 + a],
            gpyb[2 * n2 + a],
        );
        pyb[a] = b0;
        pyb[n2 + a] = b1;
        pyb[2 * n2 + a] = b2;
    }

    // Predictor: px = (c_right + c)/2 - ax (fx_right - fx).
    let mut fxb = vec![S::zero(); 3 * n2];
    let mut gyb = vec![S::zero(); 3 * n2];
    for i in 0..q {
        for j in 0..q {
            let a = i * q + j;
            let r = ((i + 1) % q) * q + j;
            let t = i * q + (j + 1) % q;
            for comp in 0..3 {
                let o = comp * n2;
                let wx = pxb[o + a];
                cb[o + r] = cb[o + r] + half * wx;
                cb[o + a] = cb[o + a] + half * wx;
                fxb[o + r] = fxb[o + r] - ax * wx;
                fxb[o + a] = fxb[o + a] + ax * wx;
                let wy = pyb[o + a];
                cb[o + t] = cb[o + t] + half * wy;
                cb[o + a] = cb[o + a] + half * wy;
                gyb[o + t] = gyb[o + t] - ay * wy;
                gyb[o + a] = gyb[o + a] + ay * wy;
            }
        }
    }

    // Cell fluxes: transpose the flux Jacobians at the cell states.
    for a in 0..n2 {
        let (b0, b1, b2) = flux_x_adj(
            g,
            stages.c[a],
            stages.c[n2 + a],
            stages.c[2 * n2 + a],
            fxb[a],
            fxb[n2 + a],
            fxb[2 * n2 + a],
        );
        cb[a] = cb[a] + b0;
        cb[n2 + a] = cb[n2 + a] + b1;
        cb[2 * n2 + a] = cb[2 * n2 + a] + b2;
        let (b0, b1, b2) = flux_y_adj(
            g,
            stages.c[a],
            stages.c[n2 + a],
            stages.c[2 * n2 + a],
            gyb[a],
            gyb[n2 + a],
            gyb[2 * n2 + a],
        );
        cb[a] = cb[a] + b0;
        cb[n2 + a] = cb[n2 + a] + b1;
        cb[2 * n2 + a] = cb[2 * n2 + a] + b2;
    }

    // Primitive-to-conservative: c = (h, uh, vh).
    let mut out = vec![S::zero(); 3 * n2];
    for a in 0..n2 {
        let h = prim[a];
        let u = prim[n2 + a];
        let v = prim[2 * n2 + a];
        out[a] = cb[a] + u * cb[n2 + a] + v * cb[2 * n2 + a];
        out[n2 + a] = h * cb[n2 + a];
        out[2 * n2 + a] = h * cb[2 * n2 + a];
    }
    out
}
