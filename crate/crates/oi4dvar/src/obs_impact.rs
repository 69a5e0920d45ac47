//! Observation sensitivity and impact analysis.
//!
//! Everything here revolves around the observation impact matrix
//! `T = R⁻¹ H M A` (per observation time, stacked), where `A` is the inverse
//! of the assimilation Hessian at the analysis. `T` maps a verification
//! gradient to per-observation sensitivities, and `Tᵀ` maps observation-space
//! perturbations to analysis increments — all computable matrix-free:
//!
//! * sensitivities: one conjugate-gradient solve on the Hessian operator (the
//!   "supersensitivity") followed by one tangent-linear propagation;
//! * impacts: one adjoint aggregation followed by the same CG solve;
//! * low-rank factorizations of `T` by either a Lanczos pass over the Hessian
//!   spectrum or randomized sketching of the Hessian pseudoinverse;
//! * a dense, desk-scale assembly of `T` that serves as the oracle for all of
//!   the above.
//!
//! Column propagations are embarrassingly parallel and dispatched with rayon;
//! results are collected by column index, so outputs do not depend on
//! scheduling.

use crate::dense::{cholesky, qr_orthonormalize, solve_cholesky, svd, symeig, DenseError, Matrix};
use crate::fourdvar::{FourDVarError, HessVecMethod, PreparedHessian, Scenario, Weighting};
use crate::model::{adj_run, tlm_run, ModelError, Trajectory};
use crate::observations::ObsMeta;
use crate::operators::{
    cg_solve, lanczos_extremal, LinearOperator, OperatorError, SpectrumEnd,
};
use crate::state::{StateError, StateVector, Var};
use crate::vecmath::{norm, sub};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImpactError {
    #[error(transparent)]
    FourDVar(#[from] FourDVarError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("problem too large for the dense oracle: {0}")]
    SizeGuard(String),
}

/// Default relative tolerance of the supersensitivity CG solve.
pub const DEFAULT_CG_TOL: f64 = 1e-8;
/// Default iteration cap of the supersensitivity CG solve.
pub const DEFAULT_CG_MAX_ITERS: usize = 500;
/// Singular values below this fraction of the largest are treated as zero
/// when inverting.
pub const PSEUDOINVERSE_RTOL: f64 = 1e-12;
/// Dense assemblies refuse to run above this state dimension.
pub const DENSE_ORACLE_MAX_STATE: usize = 2000;

/// `C (x_a − x_v)`: gradient of the verification functional
/// `Ψ = ½ (x_a − x_v)ᵀ C (x_a − x_v)` with respect to the analysis.
pub fn verification_gradient(
    x_a: &StateVector,
    x_v: &StateVector,
    weighting: &Weighting,
) -> StateVector {
    assert_eq!(x_a.grid(), x_v.grid(), "states must share a grid");
    let diff = sub(x_a.values(), x_v.values());
    StateVector::new(x_a.grid(), weighting.apply(&diff)).expect("length preserved")
}

/// Wrap a prepared Hessian as a symmetric linear operator on raw slices.
pub fn linear_operator_of<'a>(prepared: &'a PreparedHessian) -> LinearOperator<'a> {
    let grid = prepared.scenario().grid();
    LinearOperator::new(prepared.dim(), true, move |v: &[f64]| {
        let u = StateVector::new(grid, v.to_vec()).expect("operator input length");
        prepared
            .apply(&u)
            .expect("Hessian product failed on an already-validated trajectory")
            .into_values()
    })
}

/// `μ = A ∇Ψ`, obtained by conjugate gradients on the Hessian operator.
#[derive(Debug, Clone)]
pub struct SupersensitivityResult {
    pub mu: StateVector,
    pub residual_norms: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Solve `∇²J(x_a) · μ = ∇Ψ`. A negative-curvature direction aborts with an
/// error: the Hessian can lose positive definiteness away from an exact
/// analysis, and the result would be meaningless.
pub fn supersensitivity(
    x_a: &StateVector,
    scenario: &Scenario,
    grad_psi: &StateVector,
    tol: f64,
    max_iters: usize,
    method: HessVecMethod,
) -> Result<SupersensitivityResult, ImpactError> {
    if !grad_psi.all_finite() {
        return Err(ImpactError::InvalidArgument(
            "verification gradient is not finite".into(),
        ));
    }
    let prepared = PreparedHessian::new(scenario, x_a, method)?;
    let op = linear_operator_of(&prepared);
    let out = cg_solve(&op, grad_psi.values(), tol, max_iters)?;
    if !out.converged {
        log::warn!(
            "supersensitivity CG hit the iteration cap ({max_iters}); residual {:.3e}",
            out.residual_norms.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(SupersensitivityResult {
        mu: StateVector::new(scenario.grid(), out.x)?,
        residual_norms: out.residual_norms,
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// Per-observation sensitivities `∂Ψ/∂y`, aligned with the observation set's
/// canonical flat order.
#[derive(Debug, Clone)]
pub struct ObsSensitivity {
    pub values: Vec<f64>,
    pub meta: Vec<ObsMeta>,
}

impl ObsSensitivity {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The entries observing one variable, in flat order.
    pub fn for_variable(&self, var: Var) -> Vec<(ObsMeta, f64)> {
        self.meta
            .iter()
            .zip(&self.values)
            .filter(|(m, _)| m.var == var)
            .map(|(m, v)| (*m, *v))
            .collect()
    }
}

/// Propagate a state-space vector to observation space and weight it:
/// `R_k⁻¹ H_k M_{0,k} v` for every block, concatenated in canonical order.
fn propagate_to_obs(
    scenario: &Scenario,
    traj: &Trajectory,
    v: &StateVector,
) -> Result<Vec<f64>, ImpactError> {
    let tangent = tlm_run(traj, v)?;
    let mut out = Vec::with_capacity(scenario.observations().total_obs());
    for (b, dx) in scenario
        .observations()
        .blocks()
        .iter()
        .zip(&tangent.at_obs_times)
    {
        let hdx = b.apply_operator(dx);
        out.extend(hdx.iter().zip(b.variances()).map(|(p, var)| p / var));
    }
    Ok(out)
}

/// `∂Ψ/∂y = R⁻¹ H M μ`: one tangent-linear propagation of the
/// supersensitivity. `traj` must be the forward trajectory at the analysis,
/// recorded at the scenario's observation times.
pub fn obs_sensitivity(
    scenario: &Scenario,
    traj: &Trajectory,
    mu: &StateVector,
) -> Result<ObsSensitivity, ImpactError> {
    if traj.obs_times() != scenario.observations().obs_times() {
        return Err(ImpactError::InvalidArgument(
            "trajectory was not recorded at the scenario's observation times".into(),
        ));
    }
    let values = propagate_to_obs(scenario, traj, mu)?;
    Ok(ObsSensitivity {
        values,
        meta: scenario.observations().flat_meta(),
    })
}

/// `Δx_a = Tᵀ Δy` with the defaults of [`obs_impact_apply_with`].
pub fn obs_impact_apply(
    scenario: &Scenario,
    x_a: &StateVector,
    delta_y: &[f64],
) -> Result<StateVector, ImpactError> {
    obs_impact_apply_with(
        scenario,
        x_a,
        delta_y,
        DEFAULT_CG_TOL,
        DEFAULT_CG_MAX_ITERS,
        HessVecMethod::Soa,
    )
}

/// Analysis increment caused by an observation-space perturbation:
/// one adjoint sweep aggregates `Σ Mᵀ Hᵀ R⁻¹ Δy_k`, then a CG solve applies
/// the inverse Hessian.
pub fn obs_impact_apply_with(
    scenario: &Scenario,
    x_a: &StateVector,
    delta_y: &[f64],
    tol: f64,
    max_iters: usize,
    method: HessVecMethod,
) -> Result<StateVector, ImpactError> {
    let set = scenario.observations();
    if delta_y.len() != set.total_obs() {
        return Err(ImpactError::InvalidArgument(format!(
            "perturbation has {} entries for {} observations",
            delta_y.len(),
            set.total_obs()
        )));
    }
    let traj = scenario.run_forward(x_a)?;
    let mut offset = 0;
    let forcings: Vec<StateVector> = set
        .blocks()
        .iter()
        .map(|b| {
            let w: Vec<f64> = delta_y[offset..offset + b.len()]
                .iter()
                .zip(b.variances())
                .map(|(dy, var)| dy / var)
                .collect();
            offset += b.len();
            let mut f = StateVector::zeros(scenario.grid());
            b.scatter_adjoint(&w, &mut f);
            f
        })
        .collect();
    let rhs = adj_run(&traj, &forcings)?;
    let solved = supersensitivity(x_a, scenario, &rhs, tol, max_iters, method)?;
    Ok(solved.mu)
}

/// Assemble the dense Hessian by `n` operator products (columns collected in
/// parallel, then symmetrized). Desk-scale only.
pub fn build_dense_hessian(
    scenario: &Scenario,
    x_a: &StateVector,
    method: HessVecMethod,
) -> Result<Matrix, ImpactError> {
    let n = scenario.grid().state_len();
    if n > DENSE_ORACLE_MAX_STATE {
        return Err(ImpactError::SizeGuard(format!(
            "state dimension {n} exceeds the dense cap {DENSE_ORACLE_MAX_STATE}"
        )));
    }
    let prepared = PreparedHessian::new(scenario, x_a, method)?;
    let grid = scenario.grid();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>, ImpactError> {
            let mut e = StateVector::zeros(grid);
            e.values_mut()[c] = 1.0;
            Ok(prepared.apply(&e)?.into_values())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let raw = Matrix::from_columns(n, &cols);
    // Exact-arithmetic symmetry holds only to roundoff; make it structural.
    let mut sym = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            sym.set(i, j, 0.5 * (raw.get(i, j) + raw.get(j, i)));
        }
    }
    Ok(sym)
}

/// Dense observation impact matrix `T` (observations × state): factor the
/// dense Hessian once, then propagate each inverse column through the
/// tangent-linear model. This is the oracle the matrix-free paths and both
/// low-rank algorithms are tested against.
pub fn build_full_impact_matrix(
    scenario: &Scenario,
    x_a: &StateVector,
) -> Result<Matrix, ImpactError> {
    let n = scenario.grid().state_len();
    if n > DENSE_ORACLE_MAX_STATE {
        return Err(ImpactError::SizeGuard(format!(
            "state dimension {n} exceeds the dense cap {DENSE_ORACLE_MAX_STATE}"
        )));
    }
    let hess = build_dense_hessian(scenario, x_a, HessVecMethod::Soa)?;
    let l = cholesky(&hess)?;
    let traj = scenario.run_forward(x_a)?;
    let grid = scenario.grid();
    let m = scenario.observations().total_obs();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>, ImpactError> {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            let a_col = solve_cholesky(&l, &e);
            let v = StateVector::new(grid, a_col)?;
            propagate_to_obs(scenario, &traj, &v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Matrix::from_columns(m, &cols))
}

/// Where a low-rank factorization came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Iterative,
    Randomized,
    DenseTruncated,
}

/// Rank-revealing factors of the Hessian pseudoinverse `A⁺ = V Σ⁺ Uᵀ`
/// produced by the randomized algorithm.
#[derive(Debug, Clone)]
pub struct HessPseudoinverse {
    v: Matrix,
    sigma_plus: Vec<f64>,
    u: Matrix,
}

impl HessPseudoinverse {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.u.matvec_transpose(x);
        for (ti, s) in t.iter_mut().zip(&self.sigma_plus) {
            *ti *= s;
        }
        self.v.matvec(&t)
    }

    pub fn rank(&self) -> usize {
        self.sigma_plus.iter().filter(|s| **s > 0.0).count()
    }
}

/// A truncated singular-value factorization `T ≈ U S Vᵀ` of the observation
/// impact matrix: `left_factor` (observations × rank), non-negative descending
/// `singulars`, and an orthonormal state-space `right_factor` (state × rank).
#[derive(Debug, Clone)]
pub struct LowRankImpact {
    left: Matrix,
    singulars: Vec<f64>,
    right: Matrix,
    provenance: Provenance,
    requested_rank: usize,
    complete: bool,
    pseudoinverse: Option<HessPseudoinverse>,
}

impl LowRankImpact {
    /// Assemble from explicit factors, validating the shape and ordering
    /// invariants.
    pub fn from_factors(
        left: Matrix,
        singulars: Vec<f64>,
        right: Matrix,
        provenance: Provenance,
    ) -> Result<Self, ImpactError> {
        if left.cols() != singulars.len() || right.cols() != singulars.len() {
            return Err(ImpactError::InvalidArgument(format!(
                "factor widths {} / {} do not match {} singular values",
                left.cols(),
                right.cols(),
                singulars.len()
            )));
        }
        if singulars.iter().any(|s| !(*s >= 0.0)) {
            return Err(ImpactError::InvalidArgument(
                "singular values must be non-negative".into(),
            ));
        }
        if singulars.windows(2).any(|w| w[0] < w[1]) {
            return Err(ImpactError::InvalidArgument(
                "singular values must be descending".into(),
            ));
        }
        let requested_rank = singulars.len();
        Ok(Self {
            left,
            singulars,
            right,
            provenance,
            requested_rank,
            complete: true,
            pseudoinverse: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.singulars.len()
    }

    pub fn requested_rank(&self) -> usize {
        self.requested_rank
    }

    /// False when the construction fell short of the request (Lanczos hit its
    /// cap, or the random sketch lost rank).
    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn singulars(&self) -> &[f64] {
        &self.singulars
    }

    /// Observation-space factor (observations × rank).
    pub fn left_factor(&self) -> &Matrix {
        &self.left
    }

    /// State-space factor (state × rank), orthonormal columns.
    pub fn right_factor(&self) -> &Matrix {
        &self.right
    }

    /// Hessian pseudoinverse factors (randomized provenance only).
    pub fn pseudoinverse(&self) -> Option<&HessPseudoinverse> {
        self.pseudoinverse.as_ref()
    }

    /// `T v`: state-space vector to observation space.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, ImpactError> {
        if v.len() != self.right.rows() {
            return Err(ImpactError::InvalidArgument(format!(
                "input length {} vs state dimension {}",
                v.len(),
                self.right.rows()
            )));
        }
        let mut t = self.right.matvec_transpose(v);
        for (ti, s) in t.iter_mut().zip(&self.singulars) {
            *ti *= s;
        }
        Ok(self.left.matvec(&t))
    }

    /// `Tᵀ w`: observation-space vector to state space.
    pub fn apply_transpose(&self, w: &[f64]) -> Result<Vec<f64>, ImpactError> {
        if w.len() != self.left.rows() {
            return Err(ImpactError::InvalidArgument(format!(
                "input length {} vs observation count {}",
                w.len(),
                self.left.rows()
            )));
        }
        let mut t = self.left.matvec_transpose(w);
        for (ti, s) in t.iter_mut().zip(&self.singulars) {
            *ti *= s;
        }
        Ok(self.right.matvec(&t))
    }

    /// Materialize `U S Vᵀ` (observations × state) — test/oracle use.
    pub fn reconstruct_dense(&self) -> Matrix {
        let mut scaled = self.left.clone();
        for (j, s) in self.singulars.iter().enumerate() {
            scaled.scale_col(j, *s);
        }
        scaled.matmul(&self.right.transpose())
    }

    /// Squared-singular-value-weighted sums of the leading `m` directions:
    /// `(Σ s_i² v_i, Σ s_i² u_i)` over the state and observation factors.
    pub fn dominant_directions(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        assert!(m <= self.rank(), "asked for {m} of {} modes", self.rank());
        let mut state_dir = vec![0.0; self.right.rows()];
        let mut obs_dir = vec![0.0; self.left.rows()];
        for i in 0..m {
            let w = self.singulars[i] * self.singulars[i];
            for (acc, v) in state_dir.iter_mut().zip(self.right.col(i)) {
                *acc += w * v;
            }
            for (acc, u) in obs_dir.iter_mut().zip(self.left.col(i)) {
                *acc += w * u;
            }
        }
        (state_dir, obs_dir)
    }
}

/// Low-rank factorization from the smallest Hessian eigenpairs (defaults:
/// exact Hessian products, CG-grade tolerance, Krylov cap at the state
/// dimension).
pub fn lowrank_iterative(
    scenario: &Scenario,
    x_a: &StateVector,
    p: usize,
) -> Result<LowRankImpact, ImpactError> {
    let n = scenario.grid().state_len();
    lowrank_iterative_with(scenario, x_a, p, HessVecMethod::Soa, 1e-8, n)
}

/// Eigenpair route: take the `p` smallest Hessian eigenpairs `(V, D)`, so
/// `A ≈ V D⁻¹ Vᵀ`; propagate the eigenvectors to observation space
/// (`W = R⁻¹ H M V`, columns in parallel); eigendecompose the small projected
/// matrix `D⁻¹ (WᵀW) D⁻¹` and rotate the factors into a thin SVD of
/// `T ≈ W D⁻¹ Vᵀ`.
pub fn lowrank_iterative_with(
    scenario: &Scenario,
    x_a: &StateVector,
    p: usize,
    method: HessVecMethod,
    lanczos_tol: f64,
    lanczos_max_iters: usize,
) -> Result<LowRankImpact, ImpactError> {
    let n = scenario.grid().state_len();
    if p == 0 || p > n {
        return Err(ImpactError::InvalidArgument(format!(
            "rank must be in [1, {n}], got {p}"
        )));
    }
    let prepared = PreparedHessian::new(scenario, x_a, method)?;
    let op = linear_operator_of(&prepared);
    let lanczos = lanczos_extremal(&op, p, SpectrumEnd::Smallest, lanczos_tol, lanczos_max_iters)?;
    if !lanczos.converged {
        log::warn!(
            "eigenpair extraction stopped at the Krylov cap after {} steps; \
             factors may be less accurate",
            lanczos.steps
        );
    }
    let d = &lanczos.pairs.values;
    if let Some(bad) = d.iter().find(|v| !(**v > 0.0)) {
        return Err(ImpactError::InvalidArgument(format!(
            "Hessian eigenvalue {bad:.3e} is not positive; \
             the inverse-Hessian factorization needs a positive definite Hessian"
        )));
    }
    let vectors = &lanczos.pairs.vectors;

    // W = R⁻¹ H M V, one tangent propagation per eigenvector.
    let traj = prepared.trajectory();
    let grid = scenario.grid();
    let w_cols: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>, ImpactError> {
            let v = StateVector::new(grid, vectors.col(j).to_vec())?;
            propagate_to_obs(scenario, traj, &v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let m = scenario.observations().total_obs();
    let w_stack = Matrix::from_columns(m, &w_cols);

    // Small projected eigenproblem for the singular structure of W D⁻¹ Vᵀ.
    let w_gram = w_stack.transpose().matmul(&w_stack);
    let mut core = Matrix::zeros(p, p);
    for j in 0..p {
        for i in 0..p {
            core.set(i, j, w_gram.get(i, j) / (d[i] * d[j]));
        }
    }
    let eig = symeig(&core)?;

    // Descending order for the singular structure.
    let order: Vec<usize> = (0..p).rev().collect();
    let v_red = eig.vectors.select_columns(&order);
    let singulars: Vec<f64> = order
        .iter()
        .map(|&k| eig.values[k].max(0.0).sqrt())
        .collect();

    let right = vectors.matmul(&v_red);
    // Left factor: W · D⁻¹ · V_red · S⁻¹, with zero columns where the
    // singular value underflows.
    let cutoff = singulars.first().copied().unwrap_or(0.0) * 1e-14;
    let mut mix = Matrix::zeros(p, p);
    for j in 0..p {
        if singulars[j] > cutoff && singulars[j] > 0.0 {
            for i in 0..p {
                mix.set(i, j, v_red.get(i, j) / (d[i] * singulars[j]));
            }
        }
    }
    let left = w_stack.matmul(&mix);

    Ok(LowRankImpact {
        left,
        singulars,
        right,
        provenance: Provenance::Iterative,
        requested_rank: p,
        complete: lanczos.converged,
        pseudoinverse: None,
    })
}

/// Low-rank factorization by randomized sketching with default settings.
pub fn lowrank_randomized(
    scenario: &Scenario,
    x_a: &StateVector,
    p: usize,
    seed: u64,
) -> Result<LowRankImpact, ImpactError> {
    lowrank_randomized_with(scenario, x_a, p, seed, HessVecMethod::Soa)
}

/// Sketching route: probe the Hessian with a seeded Gaussian block
/// (`Y = ∇²J · Ω`, columns in parallel), orthonormalize to `Q`, project
/// (`B = (∇²J · Q)ᵀ`), and SVD the small matrix. That yields the Hessian
/// pseudoinverse `A⁺ = V_B Σ⁺ (Q U_B)ᵀ`; propagating `V_B` through the
/// tangent-linear model and recompressing gives a thin SVD of
/// `T ≈ (R⁻¹ H M V_B) Σ⁺ (Q U_B)ᵀ`.
pub fn lowrank_randomized_with(
    scenario: &Scenario,
    x_a: &StateVector,
    p: usize,
    seed: u64,
    method: HessVecMethod,
) -> Result<LowRankImpact, ImpactError> {
    let n = scenario.grid().state_len();
    if p == 0 || p > n {
        return Err(ImpactError::InvalidArgument(format!(
            "rank must be in [1, {n}], got {p}"
        )));
    }
    let grid = scenario.grid();
    let prepared = PreparedHessian::new(scenario, x_a, method)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let apply_cols = |cols: &[Vec<f64>]| -> Result<Vec<Vec<f64>>, ImpactError> {
        cols.par_iter()
            .map(|c| -> Result<Vec<f64>, ImpactError> {
                let u = StateVector::new(grid, c.clone())?;
                Ok(prepared.apply(&u)?.into_values())
            })
            .collect()
    };

    let y_cols = apply_cols(&omega)?;
    let basis = qr_orthonormalize(&Matrix::from_columns(n, &y_cols));
    let r = basis.q.cols();
    if r == 0 {
        return Err(ImpactError::InvalidArgument(
            "random sketch collapsed to rank zero".into(),
        ));
    }
    if r < p {
        log::warn!("random sketch lost rank: {r} of {p} directions retained");
    }

    let q_cols: Vec<Vec<f64>> = (0..r).map(|j| basis.q.col(j).to_vec()).collect();
    let z_cols = apply_cols(&q_cols)?;
    // B = (∇²J · Q)ᵀ, an r × n projection of the Hessian.
    let b = Matrix::from_columns(n, &z_cols).transpose();
    let fac = svd(&b)?;
    let sigma_max = fac.singulars.first().copied().unwrap_or(0.0);
    let sigma_plus: Vec<f64> = fac
        .singulars
        .iter()
        .map(|s| {
            if *s > PSEUDOINVERSE_RTOL * sigma_max {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let u_a = basis.q.matmul(&fac.u);
    let pseudo = HessPseudoinverse {
        v: fac.v.clone(),
        sigma_plus: sigma_plus.clone(),
        u: u_a.clone(),
    };

    // Propagate the pseudoinverse's state-space factor to observation space.
    let traj = prepared.trajectory();
    let m = scenario.observations().total_obs();
    let w_cols: Vec<Vec<f64>> = (0..fac.v.cols())
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>, ImpactError> {
            let v = StateVector::new(grid, fac.v.col(j).to_vec())?;
            propagate_to_obs(scenario, traj, &v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut g = Matrix::from_columns(m, &w_cols);
    for (j, s) in sigma_plus.iter().enumerate() {
        g.scale_col(j, *s);
    }

    // Recompress G · U_Aᵀ into a genuine thin SVD.
    let gq = qr_orthonormalize(&g);
    if gq.q.cols() == 0 {
        return Err(ImpactError::InvalidArgument(
            "impact factorization is numerically zero".into(),
        ));
    }
    let r_small = gq.q.transpose().matmul(&g);
    let small = svd(&r_small)?;
    let left = gq.q.matmul(&small.u);
    let right = u_a.matmul(&small.v);
    let singulars = small.singulars;

    Ok(LowRankImpact {
        left,
        right,
        provenance: Provenance::Randomized,
        requested_rank: p,
        complete: r == p && singulars.len() == p,
        singulars,
        pseudoinverse: Some(pseudo),
    })
}

/// Which low-rank construction to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowRankAlgorithm {
    Iterative,
    Randomized,
}

/// One point of a truncation-error curve. Errors are relative: the
/// sensitivity error is `‖s_full − s_p‖/‖s_full‖`, and the Frobenius error
/// (dense-oracle scale only) is `‖T − T_p‖_F/‖T‖_F`.
#[derive(Debug, Clone, Copy)]
pub struct TruncationPoint {
    pub rank: usize,
    pub sensitivity_error: f64,
    pub frobenius_error: Option<f64>,
}

/// Reconstruction quality of the low-rank sensitivity over a list of ranks.
/// Rank 0 means "no approximation" and reads as full relative error.
pub fn truncation_error_curve(
    scenario: &Scenario,
    x_a: &StateVector,
    ranks: &[usize],
    algorithm: LowRankAlgorithm,
    seed: u64,
) -> Result<Vec<TruncationPoint>, ImpactError> {
    let grad_psi = scenario.verification_gradient(x_a);
    if norm(grad_psi.values()) == 0.0 {
        return Err(ImpactError::InvalidArgument(
            "verification gradient vanishes; the sensitivity is identically zero".into(),
        ));
    }
    let solved = supersensitivity(
        x_a,
        scenario,
        &grad_psi,
        DEFAULT_CG_TOL,
        DEFAULT_CG_MAX_ITERS,
        HessVecMethod::Soa,
    )?;
    let traj = scenario.run_forward(x_a)?;
    let full = obs_sensitivity(scenario, &traj, &solved.mu)?;
    let full_norm = norm(&full.values);
    if full_norm == 0.0 {
        return Err(ImpactError::InvalidArgument(
            "reference sensitivity is identically zero".into(),
        ));
    }

    let n = scenario.grid().state_len();
    let oracle = if n <= DENSE_ORACLE_MAX_STATE {
        let t = build_full_impact_matrix(scenario, x_a)?;
        let norm_f = t.frobenius_norm();
        Some((t, norm_f))
    } else {
        None
    };

    let mut out = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        if rank == 0 {
            out.push(TruncationPoint {
                rank,
                sensitivity_error: 1.0,
                frobenius_error: oracle.as_ref().map(|_| 1.0),
            });
            continue;
        }
        let low = match algorithm {
            LowRankAlgorithm::Iterative => lowrank_iterative(scenario, x_a, rank)?,
            LowRankAlgorithm::Randomized => lowrank_randomized(scenario, x_a, rank, seed)?,
        };
        let s_p = low.apply(grad_psi.values())?;
        let sensitivity_error = norm(&sub(&full.values, &s_p)) / full_norm;
        let frobenius_error = oracle
            .as_ref()
            .map(|(t, tf)| t.sub(&low.reconstruct_dense()).frobenius_norm() / tf);
        out.push(TruncationPoint {
            rank,
            sensitivity_error,
            frobenius_error,
        });
    }
    Ok(out)
}
