//! Background and observation error statistics.
//!
//! The background covariance is block diagonal over the three variables. The
//! height block is `D C D`: per-cell standard deviations proportional to the
//! reference height profile around a wrapped-Gaussian spatial correlation on
//! the periodic grid. The velocity blocks are white with a fixed standard
//! deviation (the reference fields start at rest, so a proportional rule
//! would degenerate there). The correlation matrix is factored densely
//! once; applying the inverse is two triangular solves per product and drawing
//! a sample is one triangular multiply.
//!
//! Observation errors are diagonal: every observation of a variable shares the
//! variance `(noise_frac * max |y_var|)^2`, with a tiny floor (and a warning)
//! when a variable's observations are identically zero.

use crate::dense::{cholesky, solve_lower, solve_lower_transpose, Matrix};
use crate::state::{Grid, StateVector, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CovError {
    #[error("correlation factorisation failed: {0}")]
    Factorization(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Block-diagonal background covariance with a spatially correlated height
/// block and white velocity blocks.
#[derive(Debug, Clone)]
pub struct BackgroundCov {
    grid: Grid,
    /// Per-cell height standard deviations (the diagonal of D).
    h_std: Vec<f64>,
    /// Lower Cholesky factor of the height correlation matrix C.
    corr_chol: Matrix,
    uv_std: f64,
    /// Jitter that had to be added to C's diagonal to factor it (0 if none).
    jitter: f64,
}

/// One-dimensional Gaussian kernel wrapped around a ring of `q` cells:
/// `sum_m exp(-(d + m q)^2 / (2 L^2))`.
///
/// The periodic image sum (rather than the nearest-image distance alone)
/// matters: it makes the circulant correlation matrix positive definite for
/// every `L`, while the nearest-image Gaussian loses definiteness once `L`
/// is comparable to the ring size.
fn wrapped_gaussian(q: usize, d: f64, corr_dist_cells: f64) -> f64 {
    let images = ((6.0 * corr_dist_cells / q as f64).ceil() as i64 + 1).min(64);
    let mut sum = 0.0;
    for m in -images..=images {
        let dd = d + (m * q as i64) as f64;
        sum += (-dd * dd / (2.0 * corr_dist_cells * corr_dist_cells)).exp();
    }
    sum
}

/// Gaussian-decay correlation between two cells on the doubly periodic grid,
/// normalised so that the diagonal is exactly 1. Separable: the product of
/// two wrapped one-dimensional kernels.
fn correlation(q: usize, a: usize, b: usize, corr_dist_cells: f64) -> f64 {
    let (ai, aj) = (a / q, a % q);
    let (bi, bj) = (b / q, b % q);
    let di = ai.abs_diff(bi).min(q - ai.abs_diff(bi)) as f64;
    let dj = aj.abs_diff(bj).min(q - aj.abs_diff(bj)) as f64;
    let w0 = wrapped_gaussian(q, 0.0, corr_dist_cells);
    wrapped_gaussian(q, di, corr_dist_cells) * wrapped_gaussian(q, dj, corr_dist_cells) / (w0 * w0)
}

/// Assemble the background covariance from a reference state.
///
/// Height deviations are `rel_std * |h_ref|` per cell, floored at
/// `rel_std * max|h_ref| * 1e-3` so near-dry cells keep a usable spread.
/// The correlation Cholesky retries with escalating diagonal jitter (very
/// flat kernels are positive definite only up to roundoff) and gives up
/// after three escalations.
pub fn build_background_cov(
    ref_state: &StateVector,
    rel_std: f64,
    corr_dist_cells: f64,
    uv_std: f64,
) -> Result<BackgroundCov, CovError> {
    if !(rel_std > 0.0) || !(corr_dist_cells > 0.0) || !(uv_std > 0.0) {
        return Err(CovError::Degenerate(format!(
            "spread parameters must be positive (rel_std {rel_std}, corr_dist {corr_dist_cells}, uv_std {uv_std})"
        )));
    }
    if !ref_state.all_finite() {
        return Err(CovError::Degenerate("reference state is not finite".into()));
    }
    let grid = ref_state.grid();
    let q = grid.q();
    let cells = grid.cells();

    let h_ref = ref_state.field(Var::H);
    let h_max = h_ref.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if h_max == 0.0 {
        return Err(CovError::Degenerate(
            "reference height field is identically zero".into(),
        ));
    }
    let floor = rel_std * h_max * 1e-3;
    let h_std: Vec<f64> = h_ref
        .data()
        .iter()
        .map(|v| (rel_std * v.abs()).max(floor))
        .collect();

    let mut corr = Matrix::zeros(cells, cells);
    for a in 0..cells {
        for b in 0..cells {
            corr.set(a, b, correlation(q, a, b, corr_dist_cells));
        }
    }

    let mut jitter = 0.0;
    let mut corr_chol = None;
    for attempt in 0..4 {
        match cholesky(&corr) {
            Ok(l) => {
                corr_chol = Some(l);
                break;
            }
            Err(err) => {
                if attempt == 3 {
                    return Err(CovError::Factorization(format!(
                        "correlation matrix not SPD after jitter {jitter:.1e}: {err}"
                    )));
                }
                // Raise the total diagonal shift to the next level
                // (1e-12, then 1e-10, then 1e-8).
                let bump = 1e-12 * 100f64.powi(attempt);
                for d in 0..cells {
                    corr.set(d, d, corr.get(d, d) + (bump - jitter));
                }
                jitter = bump;
            }
        }
    }

    Ok(BackgroundCov {
        grid,
        h_std,
        corr_chol: corr_chol.expect("set on success"),
        uv_std,
        jitter,
    })
}

impl BackgroundCov {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn h_std(&self) -> &[f64] {
        &self.h_std
    }

    pub fn uv_std(&self) -> f64 {
        self.uv_std
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn check_grid(&self, v: &StateVector) -> Result<(), CovError> {
        if v.grid() != self.grid {
            return Err(CovError::Shape(
                "state grid differs from covariance grid".into(),
            ));
        }
        Ok(())
    }

    /// `B v`: height block `D (L L^T) D v`, velocity blocks `uv_std^2 v`.
    pub fn apply(&self, v: &StateVector) -> Result<StateVector, CovError> {
        self.check_grid(v)?;
        let cells = self.grid.cells();
        let mut out = v.values().to_vec();
        let mut h: Vec<f64> = (0..cells).map(|a| out[a] * self.h_std[a]).collect();
        h = self.corr_chol.matvec_transpose(&h);
        h = self.corr_chol.matvec(&h);
        for a in 0..cells {
            out[a] = h[a] * self.h_std[a];
        }
        let s2 = self.uv_std * self.uv_std;
        for x in &mut out[cells..] {
            *x *= s2;
        }
        Ok(StateVector::new(self.grid, out).expect("length preserved"))
    }

    /// `B^{-1} v` through the stored Cholesky factor.
    pub fn apply_inv(&self, v: &StateVector) -> Result<StateVector, CovError> {
        self.check_grid(v)?;
        let cells = self.grid.cells();
        let mut out = v.values().to_vec();
        let mut h: Vec<f64> = (0..cells).map(|a| out[a] / self.h_std[a]).collect();
        h = solve_lower(&self.corr_chol, &h);
        h = solve_lower_transpose(&self.corr_chol, &h);
        for a in 0..cells {
            out[a] = h[a] / self.h_std[a];
        }
        let s2 = self.uv_std * self.uv_std;
        for x in &mut out[cells..] {
            *x /= s2;
        }
        Ok(StateVector::new(self.grid, out).expect("length preserved"))
    }

    /// Draw a zero-mean perturbation with covariance `B`: `D L z` for the
    /// height block, `uv_std * z` for the velocities.
    pub fn sample_perturbation(&self, seed: u64) -> StateVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = self.grid.cells();
        let z: Vec<f64> = (0..cells).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; self.grid.state_len()];
        // Lower-triangular multiply L z.
        for (a, slot) in out[..cells].iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..=a {
                acc += self.corr_chol.get(a, k) * z[k];
            }
            *slot = acc * self.h_std[a];
        }
        for slot in &mut out[cells..] {
            let z: f64 = rng.sample(StandardNormal);
            *slot = self.uv_std * z;
        }
        StateVector::new(self.grid, out).expect("length preserved")
    }
}

/// Diagonal observation-error covariance in the observation set's flat order.
#[derive(Debug, Clone)]
pub struct ObsCov {
    pub variances: Vec<f64>,
    /// Variables whose observations were identically zero and got the floor.
    pub floored: Vec<Var>,
}

/// Variance floor used when a variable's observations are all exactly zero.
pub const OBS_VARIANCE_FLOOR: f64 = 1e-12;

/// Per-variable diagonal variances: `(noise_frac * max |y|)^2` shared by all
/// observations of that variable.
pub fn build_obs_cov(values: &[f64], vars: &[Var], noise_frac: f64) -> Result<ObsCov, CovError> {
    if values.len() != vars.len() {
        return Err(CovError::Shape(format!(
            "{} values vs {} variable tags",
            values.len(),
            vars.len()
        )));
    }
    if !(noise_frac > 0.0) {
        return Err(CovError::Degenerate(format!(
            "noise fraction must be positive, got {noise_frac}"
        )));
    }
    let mut max_abs = [0.0f64; 3];
    for (v, var) in values.iter().zip(vars) {
        let slot = &mut max_abs[var.block()];
        *slot = slot.max(v.abs());
    }
    let mut floored = Vec::new();
    let mut per_var = [0.0f64; 3];
    for var in Var::ALL {
        let m = max_abs[var.block()];
        if m == 0.0 && vars.contains(&var) {
            log::warn!(
                "all {} observations are zero; applying variance floor {OBS_VARIANCE_FLOOR:.0e}",
                var.name()
            );
            floored.push(var);
            per_var[var.block()] = OBS_VARIANCE_FLOOR;
        } else {
            let sd = noise_frac * m;
            per_var[var.block()] = sd * sd;
        }
    }
    Ok(ObsCov {
        variances: vars.iter().map(|v| per_var[v.block()]).collect(),
        floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::circular_dam_state;
    use crate::vecmath::{norm, sub};

    fn dam_cov(q: usize) -> BackgroundCov {
        let grid = Grid::new(q, -3.0, 3.0).unwrap();
        let ref_state = circular_dam_state(grid);
        build_background_cov(&ref_state, 0.05, 1.0, 0.05).unwrap()
    }

    #[test]
    fn correlation_decays_and_wraps_around() {
        let l = 1.0;
        // Tight kernel: periodic images are negligible, so one cell apart is
        // the plain Gaussian value.
        assert!((correlation(8, 0, 1, l) - (-0.5f64).exp()).abs() < 1e-9);
        // Last and first cell of a row are also one apart (periodic).
        assert_eq!(correlation(8, 0, 7, l), correlation(8, 0, 1, l));
        // Self-correlation is exactly one by normalisation.
        assert_eq!(correlation(8, 3, 3, l), 1.0);
        // Monotone decay with the nearest-image distance along a row.
        for d in 1..4usize {
            assert!(
                correlation(8, 0, d, l) > correlation(8, 0, d + 1, l),
                "correlation should decay with distance (d = {d})"
            );
        }
        // Separability across the two axes.
        let both = correlation(8, 0, 4 * 8 + 4, l);
        let rows = correlation(8, 0, 4 * 8, l);
        let cols = correlation(8, 0, 4, l);
        assert!((both - rows * cols).abs() < 1e-15);
    }

    #[test]
    fn flat_kernel_stays_positive_definite() {
        // A correlation length comparable to the domain would defeat a
        // nearest-image Gaussian; the wrapped kernel factors cleanly.
        let grid = Grid::new(5, -3.0, 3.0).unwrap();
        let ref_state = circular_dam_state(grid);
        let cov = build_background_cov(&ref_state, 0.05, 2.0, 0.05).unwrap();
        assert!(
            cov.jitter() <= 1e-10,
            "flat kernel needed unexpected jitter {:.1e}",
            cov.jitter()
        );
    }

    #[test]
    fn inverse_round_trip() {
        let cov = dam_cov(8);
        let grid = cov.grid();
        let mut v = StateVector::zeros(grid);
        for (k, x) in v.values_mut().iter_mut().enumerate() {
            *x = ((k * 13 % 17) as f64 - 8.0) / 8.0;
        }
        let w = cov.apply_inv(&cov.apply(&v).unwrap()).unwrap();
        let rel = norm(&sub(w.values(), v.values())) / norm(v.values());
        assert!(rel < 1e-10, "B^-1 B v != v (rel err {rel:.3e})");
    }

    #[test]
    fn height_std_is_proportional_with_floor() {
        let grid = Grid::new(6, -3.0, 3.0).unwrap();
        let mut ref_state = circular_dam_state(grid);
        // Force one near-dry cell; its std must be floored, not ~zero.
        ref_state.set(Var::H, 0, 0, 1e-9);
        let cov = build_background_cov(&ref_state, 0.05, 1.0, 0.05).unwrap();
        let h_max = 2.0; // dam peak is 1 + 1
        let idx = grid.cell_index(0, 0);
        let expected_floor = 0.05 * ref_state.field(Var::H).data().iter().fold(0.0f64, |m, v| m.max(*v)) * 1e-3;
        assert!((cov.h_std()[idx] - expected_floor).abs() < 1e-15);
        let center = grid.cell_index(3, 3);
        let h_center = ref_state.field(Var::H).get(3, 3);
        assert!((cov.h_std()[center] - 0.05 * h_center).abs() < 1e-15);
        assert!(h_center <= h_max);
    }

    #[test]
    fn samples_match_the_covariance_diagonal() {
        let cov = dam_cov(6);
        let n = cov.grid().state_len();
        let cells = cov.grid().cells();
        let draws = 10_000;
        let mut mean = vec![0.0; n];
        let mut second = vec![0.0; n];
        for s in 0..draws {
            let x = cov.sample_perturbation(1000 + s as u64);
            for (k, v) in x.values().iter().enumerate() {
                mean[k] += v;
                second[k] += v * v;
            }
        }
        for m in &mut mean {
            *m /= draws as f64;
        }
        for s in &mut second {
            *s /= draws as f64;
        }

        // Diagonal of B: e_k^T B e_k via apply().
        for &k in &[0usize, cells / 2, cells - 1, cells + 3, 2 * cells + 5] {
            let mut e = StateVector::zeros(cov.grid());
            e.values_mut()[k] = 1.0;
            let diag = cov.apply(&e).unwrap().values()[k];
            let var = second[k] - mean[k] * mean[k];
            let rel = (var - diag).abs() / diag;
            assert!(
                rel < 0.05,
                "empirical variance at {k}: {var:.3e} vs {diag:.3e} (rel {rel:.3e})"
            );
            let sigma = diag.sqrt();
            assert!(
                mean[k].abs() < 3.0 * sigma / (draws as f64).sqrt(),
                "sample mean at {k} is {:.3e}, expected O({:.3e})",
                mean[k],
                sigma / (draws as f64).sqrt()
            );
        }
    }

    #[test]
    fn obs_cov_shares_variance_per_variable() {
        let values = [2.0, -4.0, 0.5, 0.1, 0.0, 0.0];
        let vars = [Var::H, Var::H, Var::U, Var::U, Var::V, Var::V];
        let cov = build_obs_cov(&values, &vars, 0.01).unwrap();
        let h_var = (0.01f64 * 4.0).powi(2);
        let u_var = (0.01f64 * 0.5).powi(2);
        assert_eq!(cov.variances[0], h_var);
        assert_eq!(cov.variances[1], h_var);
        assert_eq!(cov.variances[2], u_var);
        assert_eq!(cov.variances[3], u_var);
        // All-zero v observations: floored.
        assert_eq!(cov.variances[4], OBS_VARIANCE_FLOOR);
        assert_eq!(cov.floored, vec![Var::V]);
    }

    #[test]
    fn degenerate_parameters_are_rejected() {
        let grid = Grid::new(5, -3.0, 3.0).unwrap();
        let ref_state = circular_dam_state(grid);
        assert!(build_background_cov(&ref_state, 0.0, 2.0, 0.05).is_err());
        assert!(build_background_cov(&ref_state, 0.05, -1.0, 0.05).is_err());
        assert!(build_obs_cov(&[1.0], &[Var::H], 0.0).is_err());
        let zero = StateVector::zeros(grid);
        assert!(build_background_cov(&zero, 0.05, 2.0, 0.05).is_err());
    }
}
