//! Observation networks, synthetic observations, and the (linear) observation
//! operator.
//!
//! Observations are grouped into blocks, one per observation time. Each block
//! records which state components are observed (by flat state index, kept
//! sorted), the observed values, and the diagonal error variances. The
//! observation operator is pure subsetting, so its action is a gather and its
//! adjoint a scatter-add.
//!
//! Every routine that produces or consumes a flat observation vector (values,
//! sensitivities, impact-matrix rows) uses the same canonical order: blocks in
//! ascending time order, entries within a block in ascending state-index
//! order. [`ObservationSet::flat_meta`] spells that order out.

use crate::covariance::{build_obs_cov, CovError};
use crate::model::Trajectory;
use crate::state::{Grid, StateVector, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("invalid observation block: {0}")]
    InvalidBlock(String),
    #[error("invalid observation network: {0}")]
    InvalidNetwork(String),
    #[error(transparent)]
    Cov(#[from] CovError),
}

/// Which state components are observed, and when. The same set of components
/// is observed at every listed time.
#[derive(Debug, Clone)]
pub struct ObsNetwork {
    times: Vec<usize>,
    state_indices: Vec<usize>,
}

impl ObsNetwork {
    pub fn new(times: Vec<usize>, mut state_indices: Vec<usize>) -> Result<Self, ObsError> {
        if times.is_empty() || state_indices.is_empty() {
            return Err(ObsError::InvalidNetwork(
                "need at least one observation time and one component".into(),
            ));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(ObsError::InvalidNetwork(
                "observation times must be strictly increasing".into(),
            ));
        }
        state_indices.sort_unstable();
        if state_indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(ObsError::InvalidNetwork(
                "duplicate observed component".into(),
            ));
        }
        Ok(Self {
            times,
            state_indices,
        })
    }

    /// Observe all three variables in every cell.
    pub fn all_vars(grid: Grid, times: Vec<usize>) -> Result<Self, ObsError> {
        Self::new(times, (0..grid.state_len()).collect())
    }

    /// Observe only the height field, in every cell.
    pub fn height_only(grid: Grid, times: Vec<usize>) -> Result<Self, ObsError> {
        Self::new(times, (0..grid.cells()).collect())
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn state_indices(&self) -> &[usize] {
        &self.state_indices
    }
}

/// Observations taken at a single model time.
#[derive(Debug, Clone)]
pub struct ObsBlock {
    time_index: usize,
    state_indices: Vec<usize>,
    values: Vec<f64>,
    variances: Vec<f64>,
}

impl ObsBlock {
    pub fn new(
        time_index: usize,
        state_indices: Vec<usize>,
        values: Vec<f64>,
        variances: Vec<f64>,
    ) -> Result<Self, ObsError> {
        if state_indices.len() != values.len() || state_indices.len() != variances.len() {
            return Err(ObsError::InvalidBlock(format!(
                "lengths disagree: {} indices, {} values, {} variances",
                state_indices.len(),
                values.len(),
                variances.len()
            )));
        }
        if state_indices.is_empty() {
            return Err(ObsError::InvalidBlock("empty block".into()));
        }
        if !state_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(ObsError::InvalidBlock(
                "state indices must be sorted and distinct".into(),
            ));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0)) {
            return Err(ObsError::InvalidBlock(format!(
                "variances must be positive, got {v}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ObsError::InvalidBlock("non-finite value".into()));
        }
        Ok(Self {
            time_index,
            state_indices,
            values,
            variances,
        })
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn state_indices(&self) -> &[usize] {
        &self.state_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `H x`: gather the observed components.
    pub fn apply_operator(&self, state: &StateVector) -> Vec<f64> {
        let v = state.values();
        self.state_indices.iter().map(|&k| v[k]).collect()
    }

    /// `out += H^T w`: scatter the weights back onto the state.
    pub fn scatter_adjoint(&self, w: &[f64], out: &mut StateVector) {
        assert_eq!(w.len(), self.len(), "weight vector length mismatch");
        let v = out.values_mut();
        for (&k, &wk) in self.state_indices.iter().zip(w) {
            v[k] += wk;
        }
    }
}

/// Identifies one scalar observation within a set's canonical flat order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsMeta {
    /// Position of the block within the set.
    pub block: usize,
    /// Position within the block.
    pub pos: usize,
    pub time_index: usize,
    pub state_index: usize,
    pub var: Var,
    pub i: usize,
    pub j: usize,
}

/// A full set of observations over the assimilation window.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    grid: Grid,
    blocks: Vec<ObsBlock>,
}

impl ObservationSet {
    pub fn new(grid: Grid, blocks: Vec<ObsBlock>) -> Result<Self, ObsError> {
        if blocks.is_empty() {
            return Err(ObsError::InvalidBlock("no observation blocks".into()));
        }
        if !blocks.windows(2).all(|w| w[0].time_index < w[1].time_index) {
            return Err(ObsError::InvalidBlock(
                "blocks must be in strictly increasing time order".into(),
            ));
        }
        let n = grid.state_len();
        for b in &blocks {
            if let Some(&k) = b.state_indices.iter().find(|&&k| k >= n) {
                return Err(ObsError::InvalidBlock(format!(
                    "state index {k} out of range for {n}-component state"
                )));
            }
        }
        Ok(Self { grid, blocks })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn blocks(&self) -> &[ObsBlock] {
        &self.blocks
    }

    pub fn obs_times(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.time_index).collect()
    }

    /// Total number of scalar observations.
    pub fn total_obs(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// The canonical flat ordering: blocks by time, entries by state index.
    pub fn flat_meta(&self) -> Vec<ObsMeta> {
        let mut out = Vec::with_capacity(self.total_obs());
        for (bi, b) in self.blocks.iter().enumerate() {
            for (pos, &k) in b.state_indices.iter().enumerate() {
                let (var, i, j) = self
                    .grid
                    .unpack_index(k)
                    .expect("indices were validated at construction");
                out.push(ObsMeta {
                    block: bi,
                    pos,
                    time_index: b.time_index,
                    state_index: k,
                    var,
                    i,
                    j,
                });
            }
        }
        out
    }

    /// All values in canonical flat order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    /// All variances in canonical flat order.
    pub fn flat_variances(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.variances.iter().copied())
            .collect()
    }

    /// Multiply every observation of `(var, i, j)` (at all times) by `factor`.
    /// Returns how many scalar observations were scaled.
    pub fn scale_at(&mut self, var: Var, i: usize, j: usize, factor: f64) -> usize {
        let Ok(target) = self.grid.state_index(var, i, j) else {
            return 0;
        };
        let mut touched = 0;
        for b in &mut self.blocks {
            if let Ok(pos) = b.state_indices.binary_search(&target) {
                b.values[pos] *= factor;
                touched += 1;
            }
        }
        touched
    }

    /// Keep only the observations whose flat-order mask entry is true.
    /// Blocks left empty are dropped.
    pub fn retain_flat(&self, mask: &[bool]) -> Result<Self, ObsError> {
        if mask.len() != self.total_obs() {
            return Err(ObsError::InvalidBlock(format!(
                "mask has {} entries for {} observations",
                mask.len(),
                self.total_obs()
            )));
        }
        let mut flat = mask.iter();
        let mut blocks = Vec::new();
        for b in &self.blocks {
            let mut idx = Vec::new();
            let mut val = Vec::new();
            let mut var = Vec::new();
            for pos in 0..b.len() {
                if *flat.next().expect("mask length checked") {
                    idx.push(b.state_indices[pos]);
                    val.push(b.values[pos]);
                    var.push(b.variances[pos]);
                }
            }
            if !idx.is_empty() {
                blocks.push(ObsBlock::new(b.time_index, idx, val, var)?);
            }
        }
        if blocks.is_empty() {
            return Err(ObsError::InvalidBlock(
                "mask removed every observation".into(),
            ));
        }
        Self::new(self.grid, blocks)
    }
}

/// Sample a truth trajectory on an observation network.
///
/// `added_noise_frac` controls the noise actually added to the sampled values
/// (0 gives perfect observations); per variable the noise standard deviation
/// is that fraction of the variable's largest sampled magnitude.
/// `r_noise_frac` independently sets the assumed error model, giving every
/// observation of a variable the variance `(r_noise_frac * max |y_var|)^2`.
/// Keeping the two separate lets perfect observations carry a proper
/// positive-definite error covariance.
pub fn generate_observations(
    truth: &Trajectory,
    network: &ObsNetwork,
    added_noise_frac: f64,
    r_noise_frac: f64,
    seed: u64,
) -> Result<ObservationSet, ObsError> {
    if added_noise_frac < 0.0 {
        return Err(ObsError::InvalidNetwork(format!(
            "added noise fraction must be non-negative, got {added_noise_frac}"
        )));
    }
    let last = *network.times.last().expect("validated non-empty");
    if last >= truth.states().len() {
        return Err(ObsError::InvalidNetwork(format!(
            "observation time {last} beyond trajectory ({} states)",
            truth.states().len()
        )));
    }
    let grid = truth.states()[0].grid();

    // Gather the exact values first; noise levels depend on their maxima.
    let mut exact: Vec<Vec<f64>> = Vec::with_capacity(network.times.len());
    for &t in &network.times {
        let state = &truth.states()[t];
        let v = state.values();
        exact.push(network.state_indices.iter().map(|&k| v[k]).collect());
    }

    let flat_vars: Vec<Var> = network
        .state_indices
        .iter()
        .map(|&k| {
            grid.var_of_index(k)
                .expect("network indices were validated at construction")
        })
        .collect();
    let mut max_abs = [0.0f64; 3];
    for block in &exact {
        for (v, var) in block.iter().zip(&flat_vars) {
            let slot = &mut max_abs[var.block()];
            *slot = slot.max(v.abs());
        }
    }

    // One shared error model across the whole set, in canonical flat order,
    // built from the exact values so the model is independent of the noise
    // realisation (and the added noise below is drawn from it when the two
    // fractions coincide).
    let all_exact: Vec<f64> = exact.iter().flatten().copied().collect();
    let all_vars: Vec<Var> = network
        .times
        .iter()
        .flat_map(|_| flat_vars.iter().copied())
        .collect();
    let cov = build_obs_cov(&all_exact, &all_vars, r_noise_frac)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = exact;
    if added_noise_frac > 0.0 {
        for block in &mut noisy {
            for (v, var) in block.iter_mut().zip(&flat_vars) {
                let z: f64 = rng.sample(StandardNormal);
                *v += added_noise_frac * max_abs[var.block()] * z;
            }
        }
    }

    let per_block = network.state_indices.len();
    let blocks = network
        .times
        .iter()
        .zip(noisy)
        .enumerate()
        .map(|(bi, (&t, values))| {
            let variances = cov.variances[bi * per_block..(bi + 1) * per_block].to_vec();
            ObsBlock::new(t, network.state_indices.clone(), values, variances)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ObservationSet::new(grid, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::OBS_VARIANCE_FLOOR;
    use crate::model::{circular_dam_state, fwd_run, ModelConfig};

    fn dam_truth(q: usize, steps: usize) -> Trajectory {
        let grid = Grid::new(q, -3.0, 3.0).unwrap();
        let x0 = circular_dam_state(grid);
        let config = ModelConfig::new(9.8, 1e-4, steps);
        fwd_run(&x0, &config, &[steps]).unwrap()
    }

    #[test]
    fn network_constructors_cover_expected_components() {
        let grid = Grid::new(5, -3.0, 3.0).unwrap();
        let all = ObsNetwork::all_vars(grid, vec![3, 7]).unwrap();
        assert_eq!(all.state_indices().len(), 75);
        let h = ObsNetwork::height_only(grid, vec![3]).unwrap();
        assert_eq!(h.state_indices().len(), 25);
        assert!(h.state_indices().iter().all(|&k| k < 25));
        assert!(ObsNetwork::new(vec![2, 2], vec![0]).is_err());
        assert!(ObsNetwork::new(vec![], vec![0]).is_err());
    }

    #[test]
    fn perfect_observations_reproduce_the_truth() {
        let truth = dam_truth(6, 10);
        let grid = truth.states()[0].grid();
        let network = ObsNetwork::all_vars(grid, vec![5, 10]).unwrap();
        let set = generate_observations(&truth, &network, 0.0, 0.01, 42).unwrap();
        assert_eq!(set.blocks().len(), 2);
        for b in set.blocks() {
            let expected = b.apply_operator(&truth.states()[b.time_index()]);
            assert_eq!(b.values(), expected.as_slice(), "values must be exact");
        }
    }

    #[test]
    fn rest_state_velocity_observations_get_the_variance_floor() {
        let truth = dam_truth(6, 0);
        let grid = truth.states()[0].grid();
        // Only time 0 observed: u and v are identically zero there.
        let network = ObsNetwork::all_vars(grid, vec![0]).unwrap();
        let set = generate_observations(&truth, &network, 0.0, 0.01, 7).unwrap();
        let meta = set.flat_meta();
        let variances = set.flat_variances();
        for (m, v) in meta.iter().zip(&variances) {
            match m.var {
                Var::H => assert!(*v > OBS_VARIANCE_FLOOR),
                Var::U | Var::V => assert_eq!(*v, OBS_VARIANCE_FLOOR),
            }
        }
    }

    #[test]
    fn noisy_generation_is_deterministic_and_bounded() {
        let truth = dam_truth(6, 10);
        let grid = truth.states()[0].grid();
        let network = ObsNetwork::all_vars(grid, vec![5, 10]).unwrap();
        let a = generate_observations(&truth, &network, 0.01, 0.01, 42).unwrap();
        let b = generate_observations(&truth, &network, 0.01, 0.01, 42).unwrap();
        assert_eq!(a.flat_values(), b.flat_values(), "same seed, same values");
        let c = generate_observations(&truth, &network, 0.01, 0.01, 43).unwrap();
        assert_ne!(a.flat_values(), c.flat_values(), "different seed differs");

        let perfect = generate_observations(&truth, &network, 0.0, 0.01, 42).unwrap();
        let mut max_h = 0.0f64;
        for v in perfect.flat_values() {
            max_h = max_h.max(v.abs());
        }
        for (ya, yp) in a.flat_values().iter().zip(perfect.flat_values()) {
            assert!(
                (ya - yp).abs() <= 6.0 * 0.01 * max_h,
                "noise larger than six sigma: {ya} vs {yp}"
            );
        }
    }

    #[test]
    fn operator_and_adjoint_are_exact_transposes() {
        let grid = Grid::new(5, -3.0, 3.0).unwrap();
        let block = ObsBlock::new(
            2,
            vec![3, 17, 40, 74],
            vec![0.0; 4],
            vec![1.0; 4],
        )
        .unwrap();
        let mut x = StateVector::zeros(grid);
        for (k, v) in x.values_mut().iter_mut().enumerate() {
            *v = (k as f64).sin();
        }
        let w = [1.5, -2.0, 0.25, 3.0];
        let hx = block.apply_operator(&x);
        let forward: f64 = hx.iter().zip(&w).map(|(a, b)| a * b).sum();
        let mut htw = StateVector::zeros(grid);
        block.scatter_adjoint(&w, &mut htw);
        let backward: f64 = htw
            .values()
            .iter()
            .zip(x.values())
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(forward, backward, "gather/scatter must agree bit for bit");
    }

    #[test]
    fn scale_at_touches_every_time() {
        let truth = dam_truth(6, 10);
        let grid = truth.states()[0].grid();
        let network = ObsNetwork::all_vars(grid, vec![5, 10]).unwrap();
        let mut set = generate_observations(&truth, &network, 0.0, 0.01, 1).unwrap();
        let before = set.flat_values();
        let touched = set.scale_at(Var::H, 2, 3, 10.0);
        assert_eq!(touched, 2, "one observation per block");
        let target = grid.state_index(Var::H, 2, 3).unwrap();
        let after = set.flat_values();
        for (m, (b, a)) in set.flat_meta().iter().zip(before.iter().zip(&after)) {
            if m.state_index == target {
                assert_eq!(*a, b * 10.0);
            } else {
                assert_eq!(*a, *b);
            }
        }
    }

    #[test]
    fn retain_flat_preserves_order_and_drops_empty_blocks() {
        let truth = dam_truth(6, 10);
        let grid = truth.states()[0].grid();
        let network = ObsNetwork::all_vars(grid, vec![5, 10]).unwrap();
        let set = generate_observations(&truth, &network, 0.0, 0.01, 1).unwrap();
        let m = set.total_obs();
        // Keep the first block's even entries only.
        let mut mask = vec![false; m];
        for (f, meta) in set.flat_meta().iter().enumerate() {
            if meta.block == 0 && f % 2 == 0 {
                mask[f] = true;
            }
        }
        let sub = set.retain_flat(&mask).unwrap();
        assert_eq!(sub.blocks().len(), 1, "second block should be dropped");
        assert_eq!(sub.total_obs(), set.blocks()[0].len().div_ceil(2));
        let orig = set.flat_values();
        let kept: Vec<f64> = mask
            .iter()
            .zip(&orig)
            .filter(|(m, _)| **m)
            .map(|(_, v)| *v)
            .collect();
        assert_eq!(sub.flat_values(), kept, "order must be preserved");
        assert!(set.retain_flat(&vec![false; m]).is_err());
    }
}
