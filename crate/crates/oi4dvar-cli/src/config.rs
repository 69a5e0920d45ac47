//! INI experiment configuration: sections, defaults, and validation.
//!
//! Unknown sections or keys are rejected (typo safety), missing keys fall
//! back to the documented defaults, and every value is range-checked here so
//! the experiment runners can assume a sane configuration.

use configparser::ini::Ini;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Iterative,
    Randomized,
}

/// Fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // [grid]
    pub q: usize,
    pub domain_min: f64,
    pub domain_max: f64,
    // [time]
    pub dt: f64,
    pub num_steps: usize,
    pub gravity: f64,
    // [covariance]
    pub bg_rel_std: f64,
    pub corr_dist_cells: f64,
    pub uv_std: f64,
    // [observations]
    pub obs_times: Vec<usize>,
    pub noise_frac: f64,
    pub obs_seed: u64,
    // [optimizer]
    pub max_iters: usize,
    pub lbfgs_memory: usize,
    // [lowrank]
    pub algorithm: Algorithm,
    pub rank: usize,
    pub modes: usize,
    pub lowrank_seed: u64,
    // [experiment]
    pub name: String,
    pub output_dir: String,
    pub fault_locations: Vec<(usize, usize)>,
    pub fault_factor: f64,
    pub impact_cells: Vec<(usize, usize)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            q: 40,
            domain_min: -3.0,
            domain_max: 3.0,
            dt: 1e-4,
            num_steps: 100,
            gravity: 9.8,
            bg_rel_std: 0.05,
            corr_dist_cells: 5.0,
            uv_std: 0.05,
            obs_times: vec![100],
            noise_frac: 0.01,
            obs_seed: 42,
            max_iters: 100,
            lbfgs_memory: 10,
            algorithm: Algorithm::Iterative,
            rank: 1600,
            modes: 500,
            lowrank_seed: 7,
            name: "experiment".into(),
            output_dir: "out".into(),
            fault_locations: vec![(20, 20), (10, 10)],
            fault_factor: 10.0,
            impact_cells: vec![(20, 20)],
        }
    }
}

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("grid", &["q", "domain"]),
    ("time", &["dt", "n", "gravity"]),
    ("covariance", &["bg_rel_std", "corr_dist_cells", "uv_std"]),
    ("observations", &["obs_times", "noise_frac", "seed"]),
    ("optimizer", &["max_iters", "lbfgs_memory"]),
    ("lowrank", &["algorithm", "rank", "modes", "seed"]),
    (
        "experiment",
        &[
            "name",
            "output_dir",
            "fault_locations",
            "fault_factor",
            "impact_cells",
        ],
    ),
];

fn parse_usize(section: &str, key: &str, raw: &str) -> Result<usize, ConfigError> {
    raw.trim()
        .parse()
        .map_err(|_| ConfigError(format!("[{section}] {key} = {raw:?} is not a whole number")))
}

fn parse_u64(section: &str, key: &str, raw: &str) -> Result<u64, ConfigError> {
    raw.trim()
        .parse()
        .map_err(|_| ConfigError(format!("[{section}] {key} = {raw:?} is not a seed integer")))
}

fn parse_f64(section: &str, key: &str, raw: &str) -> Result<f64, ConfigError> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| ConfigError(format!("[{section}] {key} = {raw:?} is not a number")))?;
    if !v.is_finite() {
        return Err(ConfigError(format!("[{section}] {key} must be finite")));
    }
    Ok(v)
}

/// `"20,20; 10,10"` → `[(20, 20), (10, 10)]`. Empty input is an empty list.
fn parse_cell_list(section: &str, key: &str, raw: &str) -> Result<Vec<(usize, usize)>, ConfigError> {
    let mut out = Vec::new();
    for item in raw.split(';') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let parts: Vec<&str> = item.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(ConfigError(format!(
                "[{section}] {key}: expected \"i,j\" pairs separated by ';', got {item:?}"
            )));
        }
        out.push((
            parse_usize(section, key, parts[0])?,
            parse_usize(section, key, parts[1])?,
        ));
    }
    Ok(out)
}

fn parse_time_list(section: &str, key: &str, raw: &str) -> Result<Vec<usize>, ConfigError> {
    let mut out = Vec::new();
    for item in raw.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        out.push(parse_usize(section, key, item)?);
    }
    if out.is_empty() {
        return Err(ConfigError(format!("[{section}] {key} lists no times")));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut ini = Ini::new();
        // Only `#` starts a comment; `;` separates cell pairs in lists.
        ini.set_comment_symbols(&['#']);
        let map = ini
            .read(text.to_string())
            .map_err(|e| ConfigError(format!("not parseable as INI: {e}")))?;

        // Reject unknown sections/keys before reading anything.
        for (section, keys) in &map {
            let Some((_, known)) = KNOWN_KEYS.iter().find(|(s, _)| s == section) else {
                return Err(ConfigError(format!("unknown section [{section}]")));
            };
            let known: HashSet<&str> = known.iter().copied().collect();
            for key in keys.keys() {
                if !known.contains(key.as_str()) {
                    return Err(ConfigError(format!("unknown key {key:?} in [{section}]")));
                }
            }
        }

        let get = |section: &str, key: &str| ini.get(section, key);
        let mut cfg = ExperimentConfig::default();

        if let Some(raw) = get("grid", "q") {
            cfg.q = parse_usize("grid", "q", &raw)?;
        }
        if let Some(raw) = get("grid", "domain") {
            let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(ConfigError(format!(
                    "[grid] domain must be \"min,max\", got {raw:?}"
                )));
            }
            cfg.domain_min = parse_f64("grid", "domain", parts[0])?;
            cfg.domain_max = parse_f64("grid", "domain", parts[1])?;
        }
        if let Some(raw) = get("time", "dt") {
            cfg.dt = parse_f64("time", "dt", &raw)?;
        }
        if let Some(raw) = get("time", "n") {
            cfg.num_steps = parse_usize("time", "n", &raw)?;
        }
        if let Some(raw) = get("time", "gravity") {
            cfg.gravity = parse_f64("time", "gravity", &raw)?;
        }
        if let Some(raw) = get("covariance", "bg_rel_std") {
            cfg.bg_rel_std = parse_f64("covariance", "bg_rel_std", &raw)?;
        }
        if let Some(raw) = get("covariance", "corr_dist_cells") {
            cfg.corr_dist_cells = parse_f64("covariance", "corr_dist_cells", &raw)?;
        }
        if let Some(raw) = get("covariance", "uv_std") {
            cfg.uv_std = parse_f64("covariance", "uv_std", &raw)?;
        }
        match get("observations", "obs_times") {
            Some(raw) => cfg.obs_times = parse_time_list("observations", "obs_times", &raw)?,
            // Default: observe once, at the final step.
            None => cfg.obs_times = vec![cfg.num_steps],
        }
        if let Some(raw) = get("observations", "noise_frac") {
            cfg.noise_frac = parse_f64("observations", "noise_frac", &raw)?;
        }
        if let Some(raw) = get("observations", "seed") {
            cfg.obs_seed = parse_u64("observations", "seed", &raw)?;
        }
        if let Some(raw) = get("optimizer", "max_iters") {
            cfg.max_iters = parse_usize("optimizer", "max_iters", &raw)?;
        }
        if let Some(raw) = get("optimizer", "lbfgs_memory") {
            cfg.lbfgs_memory = parse_usize("optimizer", "lbfgs_memory", &raw)?;
        }
        if let Some(raw) = get("lowrank", "algorithm") {
            cfg.algorithm = match raw.trim().to_ascii_lowercase().as_str() {
                "iterative" => Algorithm::Iterative,
                "randomized" => Algorithm::Randomized,
                other => {
                    return Err(ConfigError(format!(
                        "[lowrank] algorithm must be \"iterative\" or \"randomized\", got {other:?}"
                    )))
                }
            };
        }
        if let Some(raw) = get("lowrank", "rank") {
            cfg.rank = parse_usize("lowrank", "rank", &raw)?;
        }
        if let Some(raw) = get("lowrank", "modes") {
            cfg.modes = parse_usize("lowrank", "modes", &raw)?;
        }
        if let Some(raw) = get("lowrank", "seed") {
            cfg.lowrank_seed = parse_u64("lowrank", "seed", &raw)?;
        }
        if let Some(raw) = get("experiment", "name") {
            cfg.name = raw.trim().to_string();
        }
        if let Some(raw) = get("experiment", "output_dir") {
            cfg.output_dir = raw.trim().to_string();
        }
        match get("experiment", "fault_locations") {
            Some(raw) => {
                cfg.fault_locations = parse_cell_list("experiment", "fault_locations", &raw)?
            }
            // Defaults scale with the grid; at q = 40 they are the canonical
            // (20,20) and (10,10).
            None => cfg.fault_locations = vec![(cfg.q / 2, cfg.q / 2), (cfg.q / 4, cfg.q / 4)],
        }
        if let Some(raw) = get("experiment", "fault_factor") {
            cfg.fault_factor = parse_f64("experiment", "fault_factor", &raw)?;
        }
        match get("experiment", "impact_cells") {
            Some(raw) => cfg.impact_cells = parse_cell_list("experiment", "impact_cells", &raw)?,
            // Default: the grid center.
            None => cfg.impact_cells = vec![(cfg.q / 2, cfg.q / 2)],
        }

        cfg.validate()?;
        Ok(cfg)
    }

    /// Check the cross-field invariants. Runs automatically after parsing;
    /// call it directly on configurations assembled in code.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.q < 3 {
            return Err(ConfigError(format!("[grid] q must be at least 3, got {}", self.q)));
        }
        if !(self.domain_max > self.domain_min) {
            return Err(ConfigError(format!(
                "[grid] domain must satisfy min < max, got {},{}",
                self.domain_min, self.domain_max
            )));
        }
        if !(self.dt > 0.0) {
            return Err(ConfigError("[time] dt must be positive".into()));
        }
        if !(self.gravity > 0.0) {
            return Err(ConfigError("[time] gravity must be positive".into()));
        }
        if self.obs_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError(
                "[observations] obs_times must be strictly increasing".into(),
            ));
        }
        if *self.obs_times.last().unwrap() > self.num_steps {
            return Err(ConfigError(format!(
                "[observations] obs_times reach step {} but the window has {} steps",
                self.obs_times.last().unwrap(),
                self.num_steps
            )));
        }
        if self.noise_frac < 0.0 {
            return Err(ConfigError("[observations] noise_frac must be >= 0".into()));
        }
        if !(self.bg_rel_std > 0.0) || !(self.corr_dist_cells > 0.0) || !(self.uv_std > 0.0) {
            return Err(ConfigError(
                "[covariance] bg_rel_std, corr_dist_cells and uv_std must be positive".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(ConfigError("[optimizer] max_iters must be at least 1".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(ConfigError("[optimizer] lbfgs_memory must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(ConfigError("[lowrank] rank must be at least 1".into()));
        }
        if self.modes == 0 {
            return Err(ConfigError("[lowrank] modes must be at least 1".into()));
        }
        if !(self.fault_factor > 0.0) {
            return Err(ConfigError("[experiment] fault_factor must be positive".into()));
        }
        for &(i, j) in self.fault_locations.iter().chain(&self.impact_cells) {
            if i >= self.q || j >= self.q {
                return Err(ConfigError(format!(
                    "[experiment] cell ({i},{j}) is outside the {0}x{0} grid",
                    self.q
                )));
            }
        }
        if self.output_dir.is_empty() {
            return Err(ConfigError("[experiment] output_dir must not be empty".into()));
        }
        Ok(())
    }
}
