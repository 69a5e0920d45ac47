//! The batch experiments behind each CLI subcommand.
//!
//! Every runner follows the same shape: build the twin-experiment setup
//! (dam-break truth, perturbed background, synthetic observations), do the
//! work, and write its outputs under one directory using a small set of
//! declared file formats:
//!
//! * `field_*.csv` — a full grid state (`x,y,h,u,v` per cell; observation-space
//!   vectors are scattered onto the grid first, summing across times).
//! * `rms_*.csv` — `iteration,rms` convergence curves.
//! * `spectrum.csv` — `index,singular_value`, descending.
//! * `truncation.csv` — `rank,error` for the low-rank reconstruction.
//! * `flags.csv` — `variable,i,j,sensitivity` for flagged observations.
//! * `manifest.txt` — sorted list of every other file the run produced.
//!
//! All numbers are written through [`format_real`], so repeated runs with the
//! same seeds produce byte-identical files. Wall-clock times go to the log
//! and the returned [`ExperimentReport`], never into the output files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use oi4dvar::covariance::{build_background_cov, BackgroundCov};
use oi4dvar::fourdvar::{
    minimize_with, rms_error, ConvergenceRecord, HessVecMethod, Scenario, Weighting,
};
use oi4dvar::lbfgs::LbfgsParams;
use oi4dvar::model::{circular_dam_state, fwd_run, ModelConfig, Trajectory};
use oi4dvar::obs_impact::{
    lowrank_iterative, lowrank_randomized, obs_impact_apply, obs_sensitivity, supersensitivity,
    truncation_error_curve, verification_gradient, ImpactError, LowRankAlgorithm, LowRankImpact,
    ObsSensitivity, SupersensitivityResult, DEFAULT_CG_MAX_ITERS, DEFAULT_CG_TOL,
};
use oi4dvar::observations::{generate_observations, ObsMeta, ObsNetwork, ObservationSet};
use oi4dvar::operators::OperatorError;
use oi4dvar::state::{decode_field_csv, encode_field_csv, format_real, Grid, StateVector, Var};

use crate::config::{Algorithm, ConfigError, ExperimentConfig};

/// How many sample standard deviations from the per-variable mean a
/// sensitivity must sit to be flagged as a suspect observation.
pub const FLAG_SIGMA: f64 = 5.0;

#[derive(Debug)]
pub enum ExperimentError {
    /// The configuration is inconsistent with the requested experiment.
    Config(String),
    /// A numerical phase failed; `phase` names it for the operator.
    Phase { phase: String, message: String },
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Config(m) => write!(f, "config error: {m}"),
            ExperimentError::Phase { phase, message } => {
                write!(f, "failure during {phase}: {message}")
            }
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e.0)
    }
}

fn in_phase<T, E: fmt::Display>(phase: &str, r: Result<T, E>) -> Result<T, ExperimentError> {
    r.map_err(|e| ExperimentError::Phase {
        phase: phase.to_string(),
        message: e.to_string(),
    })
}

/// An observation flagged by the fault screen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlaggedObs {
    pub var: Var,
    pub i: usize,
    pub j: usize,
    pub sensitivity: f64,
}

/// What a run produced: the output files (relative to `output_dir`), named
/// summary numbers, per-phase wall times in seconds, and any flagged
/// observations. [`ExperimentReport::verify`] re-opens every listed file and
/// checks it parses under its declared format.
#[derive(Debug)]
pub struct ExperimentReport {
    pub name: String,
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub scalars: Vec<(String, f64)>,
    pub wall_times: Vec<(String, f64)>,
    pub flagged: Vec<FlaggedObs>,
}

impl ExperimentReport {
    fn new(cfg: &ExperimentConfig) -> Self {
        ExperimentReport {
            name: cfg.name.clone(),
            output_dir: PathBuf::from(&cfg.output_dir),
            files: Vec::new(),
            scalars: Vec::new(),
            wall_times: Vec::new(),
            flagged: Vec::new(),
        }
    }

    fn time(&mut self, phase: &str, since: Instant) {
        let secs = since.elapsed().as_secs_f64();
        log::info!("{}: {phase} took {secs:.3}s", self.name);
        self.wall_times.push((phase.to_string(), secs));
    }

    fn scalar(&mut self, key: &str, value: f64) {
        log::info!("{}: {key} = {}", self.name, format_real(value));
        self.scalars.push((key.to_string(), value));
    }

    /// Every listed file must exist and parse under its declared format.
    pub fn verify(&self) -> Result<(), String> {
        for rel in &self.files {
            let path = self.output_dir.join(rel);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| format!("{rel}: cannot read: {e}"))?;
            let base = Path::new(rel)
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default();
            verify_file(&base, &text).map_err(|m| format!("{rel}: {m}"))?;
        }
        Ok(())
    }
}

fn verify_file(base: &str, text: &str) -> Result<(), String> {
    if base.starts_with("field_") {
        decode_field_csv(text).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let check_table = |header: &str, int_cols: usize, float_cols: usize| -> Result<(), String> {
        let mut lines = text.lines();
        let first = lines.next().ok_or("empty file")?;
        if first != header {
            return Err(format!("header {first:?}, expected {header:?}"));
        }
        for (lno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != int_cols + float_cols {
                return Err(format!("row {}: wrong column count", lno + 2));
            }
            for f in &fields[..int_cols] {
                f.parse::<usize>()
                    .map_err(|_| format!("row {}: {f:?} is not an index", lno + 2))?;
            }
            for f in &fields[int_cols..] {
                f.parse::<f64>()
                    .map_err(|_| format!("row {}: {f:?} is not a number", lno + 2))?;
            }
        }
        Ok(())
    };
    if base.starts_with("rms_") {
        return check_table("iteration,rms", 1, 1);
    }
    match base {
        "spectrum.csv" => check_table("index,singular_value", 1, 1),
        "truncation.csv" => check_table("rank,error", 1, 1),
        "flags.csv" => {
            let mut lines = text.lines();
            let first = lines.next().ok_or("empty file")?;
            if first != "variable,i,j,sensitivity" {
                return Err(format!("unexpected header {first:?}"));
            }
            for (lno, line) in lines.enumerate() {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 4 {
                    return Err(format!("row {}: wrong column count", lno + 2));
                }
                if !matches!(fields[0], "h" | "u" | "v") {
                    return Err(format!("row {}: unknown variable {:?}", lno + 2, fields[0]));
                }
                fields[1].parse::<usize>().map_err(|_| "bad i index".to_string())?;
                fields[2].parse::<usize>().map_err(|_| "bad j index".to_string())?;
                fields[3].parse::<f64>().map_err(|_| "bad sensitivity".to_string())?;
            }
            Ok(())
        }
        "manifest.txt" => Ok(()),
        other => Err(format!("no declared format for {other:?}")),
    }
}

/// Collects output files under one root and remembers their relative paths.
struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self, ExperimentError> {
        std::fs::create_dir_all(root).map_err(|e| {
            ExperimentError::Config(format!("cannot create {}: {e}", root.display()))
        })?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, content: &str) -> Result<(), ExperimentError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| {
                ExperimentError::Phase {
                    phase: "writing outputs".into(),
                    message: format!("cannot create {}: {e}", parent.display()),
                }
            })?;
        }
        std::fs::write(&path, content).map_err(|e| ExperimentError::Phase {
            phase: "writing outputs".into(),
            message: format!("cannot write {}: {e}", path.display()),
        })?;
        self.files.push(rel.to_string());
        Ok(())
    }

    /// Write `manifest.txt` (sorted list of everything else) and hand the
    /// file list to the report.
    fn finish(mut self, report: &mut ExperimentReport) -> Result<(), ExperimentError> {
        let mut listed = self.files.clone();
        listed.sort();
        let mut content = listed.join("\n");
        content.push('\n');
        self.write("manifest.txt", &content)?;
        report.files = self.files;
        report
            .verify()
            .map_err(|m| ExperimentError::Phase {
                phase: "report verification".into(),
                message: m,
            })
    }
}

/// The twin-experiment ingredients shared by every runner.
struct Setup {
    grid: Grid,
    model: ModelConfig,
    truth0: StateVector,
    truth_traj: Trajectory,
    cov: BackgroundCov,
    background: StateVector,
}

fn build_setup(cfg: &ExperimentConfig) -> Result<Setup, ExperimentError> {
    let grid = in_phase("setup", Grid::new(cfg.q, cfg.domain_min, cfg.domain_max))?;
    let model = ModelConfig::new(cfg.gravity, cfg.dt, cfg.num_steps);
    let truth0 = circular_dam_state(grid);
    let truth_traj = in_phase("truth integration", fwd_run(&truth0, &model, &cfg.obs_times))?;
    let cov = in_phase(
        "covariance construction",
        build_background_cov(&truth0, cfg.bg_rel_std, cfg.corr_dist_cells, cfg.uv_std),
    )?;
    // The background is the truth plus one correlated draw from B; a seed
    // distinct from the observation-noise seed keeps the two independent.
    let pert = cov.sample_perturbation(cfg.obs_seed.wrapping_add(1));
    let background = add_states(&truth0, &pert);
    Ok(Setup {
        grid,
        model,
        truth0,
        truth_traj,
        cov,
        background,
    })
}

impl Setup {
    /// Observe every variable in every cell at the configured times, with
    /// `added_frac` synthetic noise on top of the truth.
    fn observations(
        &self,
        cfg: &ExperimentConfig,
        added_frac: f64,
    ) -> Result<ObservationSet, ExperimentError> {
        let network = in_phase(
            "observation setup",
            ObsNetwork::all_vars(self.grid, cfg.obs_times.clone()),
        )?;
        in_phase(
            "observation generation",
            generate_observations(
                &self.truth_traj,
                &network,
                added_frac,
                cfg.noise_frac,
                cfg.obs_seed,
            ),
        )
    }

    /// Assimilation scenario verifying against the truth (so convergence
    /// records carry truth-referenced RMS curves).
    fn scenario(&self, obs: ObservationSet) -> Result<Scenario, ExperimentError> {
        in_phase(
            "scenario setup",
            Scenario::new(
                self.model,
                self.background.clone(),
                self.cov.clone(),
                obs,
                self.truth0.clone(),
                Weighting::Identity,
            ),
        )
    }
}

fn optimizer_params(cfg: &ExperimentConfig) -> LbfgsParams {
    LbfgsParams {
        memory: cfg.lbfgs_memory,
        ..LbfgsParams::default()
    }
}

fn add_states(a: &StateVector, b: &StateVector) -> StateVector {
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    StateVector::new(a.grid(), values).expect("same grid, same length")
}

fn sub_states(a: &StateVector, b: &StateVector) -> StateVector {
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    StateVector::new(a.grid(), values).expect("same grid, same length")
}

/// Scatter an observation-space vector onto the grid, summing entries that
/// share a cell (multiple observation times land in the same cell).
fn obs_as_state(grid: Grid, meta: &[ObsMeta], values: &[f64]) -> StateVector {
    assert_eq!(meta.len(), values.len(), "metadata must match values");
    let mut state = StateVector::zeros(grid);
    for (m, v) in meta.iter().zip(values) {
        state.values_mut()[m.state_index] += v;
    }
    state
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rms_csv(values: &[f64]) -> String {
    let mut out = String::from("iteration,rms\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", format_real(*v)));
    }
    out
}

fn write_rms_curves(
    out: &mut RunDir,
    prefix: &str,
    record: &ConvergenceRecord,
) -> Result<(), ExperimentError> {
    for var in Var::ALL {
        out.write(
            &format!("{prefix}rms_{}.csv", var.name()),
            &rms_csv(record.rms_of(var)),
        )?;
    }
    Ok(())
}

/// Sensitivity of the analysis increment to each observation: solves the
/// supersensitivity system at `x_a` with `∇ψ = x_a − x_b` and maps the
/// solution to observation space.
///
/// The exact second-order Hessian is used first; away from a residual-free
/// minimum (e.g. around injected faults) it can lose positive definiteness,
/// in which case the solve deterministically retries with the Gauss-Newton
/// approximation, which is positive definite by construction.
fn increment_sensitivity(
    scenario: &Scenario,
    x_a: &StateVector,
    x_b: &StateVector,
    phase: &str,
) -> Result<(ObsSensitivity, SupersensitivityResult), ExperimentError> {
    let grad_psi = verification_gradient(x_a, x_b, &Weighting::Identity);
    let solve = |method| {
        supersensitivity(
            x_a,
            scenario,
            &grad_psi,
            DEFAULT_CG_TOL,
            DEFAULT_CG_MAX_ITERS,
            method,
        )
    };
    let ss = match solve(HessVecMethod::Soa) {
        Err(ImpactError::Operator(OperatorError::NegativeCurvature { curvature, .. })) => {
            log::warn!(
                "exact Hessian is indefinite at this analysis (curvature {curvature:.3e}); \
                 retrying with the Gauss-Newton approximation"
            );
            in_phase(phase, solve(HessVecMethod::GaussNewton))?
        }
        other => in_phase(phase, other)?,
    };
    let traj = in_phase(phase, scenario.run_forward(x_a))?;
    let sens = in_phase(phase, obs_sensitivity(scenario, &traj, &ss.mu))?;
    Ok((sens, ss))
}

/// Clamp the configured factorization rank to the state dimension.
fn effective_rank(cfg: &ExperimentConfig, n: usize) -> usize {
    if cfg.rank > n {
        log::warn!(
            "requested rank {} exceeds the state dimension; clamping to {n}",
            cfg.rank
        );
        n
    } else {
        cfg.rank
    }
}

fn build_lowrank(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    x_a: &StateVector,
    p: usize,
) -> Result<LowRankImpact, ExperimentError> {
    in_phase(
        "low-rank factorization",
        match cfg.algorithm {
            Algorithm::Iterative => lowrank_iterative(scenario, x_a, p),
            Algorithm::Randomized => lowrank_randomized(scenario, x_a, p, cfg.lowrank_seed),
        },
    )
}

/// One assimilation with the configured observations, from the background.
fn assimilate(
    cfg: &ExperimentConfig,
    setup: &Setup,
    scenario: &Scenario,
    phase: &str,
    report: &mut ExperimentReport,
) -> Result<(StateVector, ConvergenceRecord), ExperimentError> {
    let t0 = Instant::now();
    let (x_a, record) = in_phase(
        phase,
        minimize_with(
            scenario,
            &setup.background,
            cfg.max_iters,
            &optimizer_params(cfg),
        ),
    )?;
    report.time(phase, t0);
    log::info!(
        "{}: {phase} finished after {} iterations ({:?}), cost {} -> {}",
        report.name,
        record.iterations,
        record.termination,
        format_real(record.costs[0]),
        format_real(*record.costs.last().expect("cost history is never empty")),
    );
    Ok((x_a, record))
}

/// Twin assimilations on perfect and noise-corrupted observations, with
/// truth/background/analysis fields, RMS curves, and the cosine similarity
/// between the two analyses' observation sensitivities.
pub fn run_assimilation(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(cfg);
    let setup = build_setup(cfg)?;
    let mut out = RunDir::create(Path::new(&cfg.output_dir))?;
    out.write("field_truth.csv", &encode_field_csv(&setup.truth0))?;
    out.write("field_background.csv", &encode_field_csv(&setup.background))?;
    report.scalar(
        "rms_h_background",
        rms_error(&setup.background, &setup.truth0, Var::H),
    );

    let mut sensitivities: Vec<Vec<f64>> = Vec::new();
    for (label, added) in [("perfect", 0.0), ("noisy", cfg.noise_frac)] {
        let obs = setup.observations(cfg, added)?;
        let scenario = setup.scenario(obs)?;
        let (x_a, record) = assimilate(cfg, &setup, &scenario, &format!("{label} assimilation"), &mut report)?;
        write_rms_curves(&mut out, &format!("{label}/"), &record)?;
        out.write(
            &format!("{label}/field_analysis.csv"),
            &encode_field_csv(&x_a),
        )?;
        report.scalar(
            &format!("rms_h_{label}"),
            rms_error(&x_a, &setup.truth0, Var::H),
        );

        let t0 = Instant::now();
        let phase = format!("{label} sensitivity");
        let (sens, ss) = increment_sensitivity(&scenario, &x_a, &setup.background, &phase)?;
        report.time(&phase, t0);
        if !ss.converged {
            log::warn!(
                "{}: {phase} solver stopped at its iteration cap (residual {})",
                report.name,
                format_real(*ss.residual_norms.last().unwrap_or(&f64::NAN)),
            );
        }
        out.write(
            &format!("{label}/field_sensitivity.csv"),
            &encode_field_csv(&obs_as_state(setup.grid, &sens.meta, &sens.values)),
        )?;
        sensitivities.push(sens.values);
    }

    report.scalar(
        "sensitivity_cosine",
        cosine_similarity(&sensitivities[0], &sensitivities[1]),
    );
    out.finish(&mut report)?;
    Ok(report)
}

/// Rank observations by |sensitivity| per variable, split each variable into
/// equally sized HIGH/LOW halves, and re-assimilate with each half alone.
pub fn run_pruning(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    if cfg.obs_times.len() != 1 {
        return Err(ExperimentError::Config(
            "pruning expects a single observation time".into(),
        ));
    }
    let mut report = ExperimentReport::new(cfg);
    let setup = build_setup(cfg)?;
    let mut out = RunDir::create(Path::new(&cfg.output_dir))?;
    out.write("field_truth.csv", &encode_field_csv(&setup.truth0))?;
    out.write("field_background.csv", &encode_field_csv(&setup.background))?;

    let obs = setup.observations(cfg, cfg.noise_frac)?;
    let scenario = setup.scenario(obs.clone())?;
    let (x_a, record) = assimilate(cfg, &setup, &scenario, "full assimilation", &mut report)?;
    write_rms_curves(&mut out, "all/", &record)?;
    out.write("all/field_analysis.csv", &encode_field_csv(&x_a))?;

    let t0 = Instant::now();
    let (sens, _) = increment_sensitivity(&scenario, &x_a, &setup.background, "sensitivity")?;
    report.time("sensitivity", t0);
    out.write(
        "field_sensitivity.csv",
        &encode_field_csv(&obs_as_state(setup.grid, &sens.meta, &sens.values)),
    )?;

    // Per-variable ranking: HIGH takes the top half by |sensitivity|; ties
    // break on the packed state index so the partition is deterministic.
    let mut high_mask = vec![false; sens.values.len()];
    for var in Var::ALL {
        let mut ranked: Vec<(usize, f64, usize)> = sens
            .meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.var == var)
            .map(|(flat, m)| (flat, sens.values[flat].abs(), m.state_index))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
        for (flat, _, _) in ranked.iter().take(ranked.len() / 2) {
            high_mask[*flat] = true;
        }
    }
    let high_count = high_mask.iter().filter(|m| **m).count();
    report.scalar("high_count", high_count as f64);
    report.scalar("low_count", (high_mask.len() - high_count) as f64);

    let mask_state = obs_as_state(
        setup.grid,
        &sens.meta,
        &high_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
    );
    out.write("field_high_mask.csv", &encode_field_csv(&mask_state))?;

    let low_mask: Vec<bool> = high_mask.iter().map(|m| !m).collect();
    for (label, mask) in [("high", &high_mask), ("low", &low_mask)] {
        let subset = in_phase("observation pruning", obs.retain_flat(mask))?;
        let sub_scenario = in_phase("scenario setup", scenario.with_observations(subset))?;
        let (x_sub, rec) = assimilate(
            cfg,
            &setup,
            &sub_scenario,
            &format!("{label}-subset assimilation"),
            &mut report,
        )?;
        write_rms_curves(&mut out, &format!("{label}/"), &rec)?;
        out.write(
            &format!("{label}/field_analysis.csv"),
            &encode_field_csv(&x_sub),
        )?;
        report.scalar(
            &format!("rms_h_{label}_final"),
            rms_error(&x_sub, &setup.truth0, Var::H),
        );
        let curve = rec.rms_of(Var::H);
        let at_20 = curve.get(20).copied().unwrap_or(*curve.last().expect("rms curve is never empty"));
        report.scalar(&format!("rms_h_{label}_iter20"), at_20);
    }

    out.finish(&mut report)?;
    Ok(report)
}

/// Inflate the observed height at the configured cells, assimilate, and flag
/// the suspect observations: the top-F height observations by |sensitivity|
/// when F faults were injected, or — with no faults configured — every
/// sensitivity beyond [`FLAG_SIGMA`] standard deviations of its variable's
/// mean.
pub fn run_fault_detection(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(cfg);
    let setup = build_setup(cfg)?;
    let mut out = RunDir::create(Path::new(&cfg.output_dir))?;
    out.write("field_truth.csv", &encode_field_csv(&setup.truth0))?;
    out.write("field_background.csv", &encode_field_csv(&setup.background))?;

    let mut obs = setup.observations(cfg, cfg.noise_frac)?;
    for &(i, j) in &cfg.fault_locations {
        let touched = obs.scale_at(Var::H, i, j, cfg.fault_factor);
        if touched == 0 {
            return Err(ExperimentError::Config(format!(
                "no height observation exists at cell ({i},{j}) to make faulty"
            )));
        }
        log::info!(
            "{}: scaled {touched} height observation(s) at ({i},{j}) by {}",
            report.name,
            cfg.fault_factor
        );
    }

    let scenario = setup.scenario(obs)?;
    let (x_a, record) = assimilate(cfg, &setup, &scenario, "assimilation", &mut report)?;
    write_rms_curves(&mut out, "", &record)?;
    out.write("field_analysis.csv", &encode_field_csv(&x_a))?;
    out.write(
        "field_increment.csv",
        &encode_field_csv(&sub_states(&x_a, &setup.background)),
    )?;

    let t0 = Instant::now();
    let (sens, ss) = increment_sensitivity(&scenario, &x_a, &setup.background, "sensitivity")?;
    report.time("sensitivity", t0);
    out.write("field_supersensitivity.csv", &encode_field_csv(&ss.mu))?;
    out.write(
        "field_sensitivity.csv",
        &encode_field_csv(&obs_as_state(setup.grid, &sens.meta, &sens.values)),
    )?;

    // Flag suspects per variable. Faults are injected into the height
    // observations, so for each variable carrying F injected faults the top
    // F observations by |sensitivity| are flagged (a fixed multiple of the
    // field's standard deviation cannot isolate a second fault once the
    // first has inflated the spread). A faulty sensor also raises the
    // sensitivities of nearby observations of the *other* variables through
    // the dynamics; those are collateral, not instrument faults, so declared
    // faults suppress flags outside the faulted variables. Only the blind
    // screen — no faults configured — flags every sensitivity beyond
    // FLAG_SIGMA sample standard deviations of its variable's mean, which
    // leaves a clean run quiet.
    let mut fault_counts = [0usize; 3];
    fault_counts[Var::H.block()] = cfg.fault_locations.len();
    let blind = cfg.fault_locations.is_empty();
    let mut flagged = Vec::new();
    for var in Var::ALL {
        let entries = sens.for_variable(var);
        if entries.is_empty() {
            continue;
        }
        let count = entries.len() as f64;
        let mean = entries.iter().map(|(_, s)| s).sum::<f64>() / count;
        let std = (entries.iter().map(|(_, s)| (s - mean) * (s - mean)).sum::<f64>() / count)
            .sqrt();
        report.scalar(&format!("sensitivity_mean_{}", var.name()), mean);
        report.scalar(&format!("sensitivity_std_{}", var.name()), std);
        let mut suspects: Vec<(ObsMeta, f64)> = if blind {
            entries
                .into_iter()
                .filter(|(_, s)| (s - mean).abs() > FLAG_SIGMA * std)
                .collect()
        } else {
            let cap = fault_counts[var.block()];
            let mut ranked = entries;
            ranked.sort_by(|a, b| {
                b.1.abs()
                    .total_cmp(&a.1.abs())
                    .then(a.0.state_index.cmp(&b.0.state_index))
            });
            ranked.truncate(cap);
            ranked
        };
        flagged.append(&mut suspects);
    }
    let mut flagged: Vec<FlaggedObs> = flagged
        .into_iter()
        .map(|(m, s)| FlaggedObs {
            var: m.var,
            i: m.i,
            j: m.j,
            sensitivity: s,
        })
        .collect();
    flagged.sort_by(|a, b| {
        b.sensitivity
            .abs()
            .total_cmp(&a.sensitivity.abs())
            .then(a.var.block().cmp(&b.var.block()))
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    report.scalar("flag_count", flagged.len() as f64);
    for f in &flagged {
        log::info!(
            "{}: flagged {} at ({},{}) with sensitivity {}",
            report.name,
            f.var.name(),
            f.i,
            f.j,
            format_real(f.sensitivity)
        );
    }

    let mut flags_text = String::from("variable,i,j,sensitivity\n");
    for f in &flagged {
        flags_text.push_str(&format!(
            "{},{},{},{}\n",
            f.var.name(),
            f.i,
            f.j,
            format_real(f.sensitivity)
        ));
    }
    out.write("flags.csv", &flags_text)?;
    report.flagged = flagged;

    out.finish(&mut report)?;
    Ok(report)
}

/// Factor the observation impact matrix and report its spectrum, the
/// truncation-error curve, and the dominant directions in state and
/// observation space.
pub fn run_spectrum_report(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(cfg);
    let setup = build_setup(cfg)?;
    let mut out = RunDir::create(Path::new(&cfg.output_dir))?;

    let obs = setup.observations(cfg, cfg.noise_frac)?;
    let scenario = setup.scenario(obs)?;
    let (x_a, _) = assimilate(cfg, &setup, &scenario, "assimilation", &mut report)?;

    let n = setup.grid.state_len();
    let p = effective_rank(cfg, n);
    let t0 = Instant::now();
    let low = build_lowrank(cfg, &scenario, &x_a, p)?;
    report.time("low-rank factorization", t0);
    report.scalar("achieved_rank", low.rank() as f64);
    report.scalar("complete", if low.is_complete() { 1.0 } else { 0.0 });
    if !low.is_complete() {
        log::warn!(
            "{}: factorization achieved rank {} of the requested {p}; \
             the spectrum is zero-padded",
            report.name,
            low.rank()
        );
    }

    // Exactly p rows, zero-padded past the achieved rank.
    let mut spectrum = String::from("index,singular_value\n");
    for i in 0..p {
        let s = low.singulars().get(i).copied().unwrap_or(0.0);
        spectrum.push_str(&format!("{i},{}\n", format_real(s)));
    }
    out.write("spectrum.csv", &spectrum)?;

    let mut ranks: Vec<usize> = [p / 8, p / 4, p / 2, p]
        .into_iter()
        .filter(|r| *r > 0)
        .collect();
    ranks.dedup();
    let t0 = Instant::now();
    let algorithm = match cfg.algorithm {
        Algorithm::Iterative => LowRankAlgorithm::Iterative,
        Algorithm::Randomized => LowRankAlgorithm::Randomized,
    };
    let curve = in_phase(
        "truncation-error curve",
        truncation_error_curve(&scenario, &x_a, &ranks, algorithm, cfg.lowrank_seed),
    )?;
    report.time("truncation-error curve", t0);
    let mut truncation = String::from("rank,error\n");
    for point in &curve {
        truncation.push_str(&format!(
            "{},{}\n",
            point.rank,
            format_real(point.sensitivity_error)
        ));
    }
    out.write("truncation.csv", &truncation)?;

    let modes = cfg.modes.min(low.rank());
    report.scalar("modes_used", modes as f64);
    let (state_dir, obs_dir) = low.dominant_directions(modes);
    out.write(
        "field_dominant_state.csv",
        &encode_field_csv(
            &StateVector::new(setup.grid, state_dir).expect("direction has state length"),
        ),
    )?;
    let meta = scenario.observations().flat_meta();
    out.write(
        "field_dominant_obs.csv",
        &encode_field_csv(&obs_as_state(setup.grid, &meta, &obs_dir)),
    )?;

    out.finish(&mut report)?;
    Ok(report)
}

/// Push a unit innovation through the exact impact path and through the
/// low-rank factorization at each configured cell, and compare the fields.
pub fn run_impact(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let mut report = ExperimentReport::new(cfg);
    let setup = build_setup(cfg)?;
    let mut out = RunDir::create(Path::new(&cfg.output_dir))?;

    let obs = setup.observations(cfg, cfg.noise_frac)?;
    let scenario = setup.scenario(obs)?;
    let (x_a, _) = assimilate(cfg, &setup, &scenario, "assimilation", &mut report)?;

    let n = setup.grid.state_len();
    let p = effective_rank(cfg, n);
    let t0 = Instant::now();
    let low = build_lowrank(cfg, &scenario, &x_a, p)?;
    report.time("low-rank factorization", t0);

    let meta = scenario.observations().flat_meta();
    let final_time = *cfg.obs_times.last().expect("validated non-empty");
    for &(i, j) in &cfg.impact_cells {
        let k = meta
            .iter()
            .position(|m| m.var == Var::H && m.i == i && m.j == j && m.time_index == final_time)
            .ok_or_else(|| {
                ExperimentError::Config(format!(
                    "no height observation at cell ({i},{j}) at the final observation time"
                ))
            })?;
        let mut delta_y = vec![0.0; meta.len()];
        delta_y[k] = 1.0;

        let t0 = Instant::now();
        let exact = in_phase(
            "exact impact",
            obs_impact_apply(&scenario, &x_a, &delta_y),
        )?;
        report.time(&format!("exact impact ({i},{j})"), t0);
        let t0 = Instant::now();
        let approx_values = in_phase("low-rank impact", low.apply_transpose(&delta_y))?;
        report.time(&format!("low-rank impact ({i},{j})"), t0);
        let approx =
            StateVector::new(setup.grid, approx_values).expect("impact has state length");

        out.write(
            &format!("field_impact_full_{i}_{j}.csv"),
            &encode_field_csv(&exact),
        )?;
        out.write(
            &format!("field_impact_lowrank_{i}_{j}.csv"),
            &encode_field_csv(&approx),
        )?;

        let diff = sub_states(&exact, &approx);
        let denom = norm(exact.values());
        let rel = if denom == 0.0 {
            0.0
        } else {
            norm(diff.values()) / denom
        };
        report.scalar(&format!("impact_rel_diff_{i}_{j}"), rel);
    }

    out.finish(&mut report)?;
    Ok(report)
}
