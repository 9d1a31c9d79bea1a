//! Monte Carlo experiment driver: scenario generation, received-block
//! synthesis, trial execution and aggregation, config-file loading, and the
//! CSV/JSON emitters the CLI builds on.
//!
//! Every trial derives its own seed from the master seed and its grid
//! position, so runs are reproducible and trials are order-independent.

use crate::channel::ChannelSet;
use crate::estimation::{self, SearchGrid};
use crate::fim;
use crate::isac::{self, BfConfiguration, CombinerMode};
use crate::scenario::{
    dbm_to_watts, fraunhofer_distance, parse_power, ConfigError, Scenario, SphericalPosition,
    SystemConfig,
};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("could not write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Operating mode of the blend-weight selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Isac,
    SensingOnly,
    CommOnly,
}

impl Mode {
    pub fn combiner(self) -> CombinerMode {
        match self {
            Mode::Isac => CombinerMode::Grid,
            Mode::SensingOnly => CombinerMode::Forced { xi: 0.0, rho: 0.0 },
            Mode::CommOnly => CombinerMode::Forced { xi: 1.0, rho: 1.0 },
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "isac" => Ok(Mode::Isac),
            "sensing-only" => Ok(Mode::SensingOnly),
            "comm-only" => Ok(Mode::CommOnly),
            other => Err(format!("unknown mode {other}; use isac|sensing-only|comm-only")),
        }
    }
}

/// Coherent block of U orthonormal symbol streams scaled so each stream
/// carries p_max / U.
#[derive(Debug, Clone)]
pub struct SymbolBlock {
    pub s: Array2<Complex64>,
}

impl SymbolBlock {
    /// Deterministic orthonormalization of a seeded random matrix, scaled
    /// so (1/T) S S^H = (p_max / U) I exactly.
    pub fn generate(users: usize, t_slots: usize, p_max: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut s: Array2<Complex64> = Array2::from_shape_fn((users, t_slots), |_| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        // Gram-Schmidt to unit rows, then one common power scaling
        for u in 0..users {
            for prev in 0..u {
                let dot: Complex64 = (0..t_slots).map(|t| s[(prev, t)].conj() * s[(u, t)]).sum();
                for t in 0..t_slots {
                    let x = s[(prev, t)];
                    s[(u, t)] -= dot * x;
                }
            }
            let norm: f64 = (0..t_slots).map(|t| s[(u, t)].norm_sqr()).sum::<f64>().sqrt();
            for t in 0..t_slots {
                s[(u, t)] /= norm;
            }
        }
        let scale = (t_slots as f64 * p_max / users as f64).sqrt();
        s.mapv_inplace(|z| z * scale);
        Self { s }
    }
}

/// Received block at the microstrip outputs: reflected signal, residual
/// self-interference after the digital canceller, and combined noise.
pub fn synthesize_received(
    bf: &BfConfiguration,
    channels: &ChannelSet,
    symbols: &SymbolBlock,
    rng: &mut ChaCha8Rng,
    config: &SystemConfig,
) -> Array2<Complex64> {
    let a = bf.w_rx.combine_matrix(&channels.p_rx);
    let b = bf.w_tx.precode_matrix(&channels.p_tx, &bf.v);
    let eff_signal = a.dot(&channels.h_r).dot(&b); // n_rf x U
    let eff_si = isac::effective_si(&bf.w_rx, &bf.w_tx, channels);
    let si_path = (&eff_si + &bf.d).dot(&bf.v); // n_rf x U
    let mut y = (&eff_signal + &si_path).dot(&symbols.s);
    // combined noise A n(t), drawn column by column
    let n = config.n_total();
    let t_slots = symbols.s.ncols();
    let sigma = (config.noise_power / 2.0).sqrt();
    let mut noise_col: Array1<Complex64> = Array1::zeros(n);
    for t in 0..t_slots {
        for m in 0..n {
            noise_col[m] = Complex64::new(
                sigma * rng.sample::<f64, _>(StandardNormal),
                sigma * rng.sample::<f64, _>(StandardNormal),
            );
        }
        for i in 0..a.nrows() {
            let mut s = Complex64::new(0.0, 0.0);
            for m in 0..n {
                s += a[(i, m)] * noise_col[m];
            }
            y[(i, t)] += s;
        }
    }
    y
}

/// Scenario generation and estimation-grid knobs of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessParams {
    pub trials: usize,
    pub p_max_dbm: Vec<f64>,
    pub mode: Mode,
    pub k_targets: usize,
    pub n_users: usize,
    /// Target range interval in meters; the upper end is additionally
    /// clipped to the panel's near/far-field boundary when that leaves a
    /// nonempty interval.
    pub r_min: f64,
    pub r_max: f64,
    pub theta_deg: f64,
    pub phi_min_deg: f64,
    pub phi_max_deg: f64,
    pub est_r_points: usize,
    pub est_theta_points: usize,
    pub est_phi_points: usize,
    pub est_theta_min_deg: f64,
    pub est_theta_max_deg: f64,
    pub est_sweeps: usize,
}

impl Default for HarnessParams {
    fn default() -> Self {
        Self {
            trials: 50,
            p_max_dbm: vec![-10.0, 0.0, 10.0, 20.0, 30.0],
            mode: Mode::Isac,
            k_targets: 3,
            n_users: 2,
            r_min: 1.0,
            r_max: 15.0,
            theta_deg: 30.0,
            phi_min_deg: 0.0,
            phi_max_deg: 180.0,
            est_r_points: 60,
            est_theta_points: 60,
            est_phi_points: 180,
            est_theta_min_deg: 0.0,
            est_theta_max_deg: 90.0,
            est_sweeps: 3,
        }
    }
}

impl HarnessParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.trials == 0 {
            return err("trials must be >= 1");
        }
        if self.p_max_dbm.is_empty() {
            return err("at least one transmit power point required");
        }
        if self.k_targets == 0 || self.n_users == 0 || self.n_users > self.k_targets {
            return err("need 1 <= n_users <= k_targets");
        }
        if !(self.r_min > 0.0 && self.r_max > self.r_min) {
            return err("need 0 < r_min < r_max");
        }
        if self.est_r_points < 2 || self.est_theta_points < 2 || self.est_phi_points < 2 {
            return err("estimation grids need at least 2 points per axis");
        }
        if self.est_sweeps == 0 {
            return err("est_sweeps must be >= 1");
        }
        Ok(())
    }

    pub fn search_grid(&self) -> SearchGrid {
        SearchGrid {
            r: (self.r_min, self.r_max, self.est_r_points),
            theta: (
                self.est_theta_min_deg.to_radians().max(0.0),
                self.est_theta_max_deg.to_radians(),
                self.est_theta_points,
            ),
            phi: (
                self.phi_min_deg.to_radians(),
                self.phi_max_deg.to_radians(),
                self.est_phi_points,
            ),
            sweeps: self.est_sweeps,
        }
    }
}

/// Full experiment configuration: physical system plus harness knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub harness: HarnessParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.system.validate()?;
        self.harness.validate()
    }
}

/// Loads a TOML run configuration. Powers accept either plain watts or a
/// string with an explicit "dBm"/"W" suffix; the noise power defaults to
/// thermal noise over the configured bandwidth when absent.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_run_config(&text, &path.display().to_string())
}

pub fn parse_run_config(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let mut doc: toml::Value = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        path: origin.to_string(),
        source: Box::new(e),
    })?;
    let table = doc
        .as_table_mut()
        .ok_or_else(|| ConfigError::Invalid("top level must be a table".into()))?;
    let mut system = table
        .remove("system")
        .ok_or_else(|| ConfigError::Invalid("missing [system] section".into()))?;
    let sys_table = system
        .as_table_mut()
        .ok_or_else(|| ConfigError::Invalid("[system] must be a table".into()))?;
    // powers may carry unit suffixes; normalize to watts before deserializing
    for key in ["p_max", "noise_power", "gamma_si"] {
        if let Some(raw) = sys_table.get(key) {
            let watts = parse_power(raw, key)?;
            sys_table.insert(key.to_string(), toml::Value::Float(watts));
        }
    }
    if !sys_table.contains_key("noise_power") {
        let bandwidth = sys_table
            .get("bandwidth")
            .and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64)))
            .ok_or_else(|| ConfigError::Invalid("bandwidth required".into()))?;
        let dbm = -174.0 + 10.0 * bandwidth.log10();
        sys_table.insert("noise_power".into(), toml::Value::Float(dbm_to_watts(dbm)));
    }
    let system: SystemConfig = system.clone().try_into().map_err(|e: toml::de::Error| {
        ConfigError::Parse {
            path: origin.to_string(),
            source: Box::new(e),
        }
    })?;
    let harness: HarnessParams = match table.remove("harness") {
        Some(h) => h.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: origin.to_string(),
            source: Box::new(e),
        })?,
        None => HarnessParams::default(),
    };
    let cfg = RunConfig { system, harness };
    cfg.validate()?;
    Ok(cfg)
}

/// Scenario file: a list of targets in degrees plus the user indices.
#[derive(Debug, Deserialize)]
struct ScenarioFile {
    targets: Vec<ScenarioTarget>,
    user_indices: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct ScenarioTarget {
    r: f64,
    theta_deg: f64,
    phi_deg: f64,
    #[serde(default)]
    beta_phase_deg: f64,
}

/// Loads a scenario file (angles in degrees, unit reflection coefficients
/// given by phase).
pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parsed: ScenarioFile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.display().to_string(),
        source: Box::new(e),
    })?;
    let mut targets = Vec::with_capacity(parsed.targets.len());
    let mut betas = Vec::with_capacity(parsed.targets.len());
    for t in &parsed.targets {
        targets.push(SphericalPosition::new(
            t.r,
            t.theta_deg.to_radians(),
            t.phi_deg.to_radians(),
        )?);
        betas.push(Complex64::from_polar(1.0, t.beta_phase_deg.to_radians()));
    }
    Scenario::new(targets, betas, parsed.user_indices)
}

/// Draws one scenario: fixed elevation, uniform azimuth, uniform range
/// clipped into the panel's radiating near field, unit reflection
/// coefficients with uniform phase; the first n_users targets are the
/// downlink users.
pub fn generate_scenario(
    rng: &mut ChaCha8Rng,
    config: &SystemConfig,
    params: &HarnessParams,
) -> Scenario {
    let fresnel_limit = fraunhofer_distance(config.aperture(), config);
    let mut r_hi = params.r_max.min(fresnel_limit);
    if r_hi <= params.r_min {
        // the configured interval lies outside the near field; keep it
        r_hi = params.r_max;
    }
    let theta = params.theta_deg.to_radians();
    let phi_lo = params.phi_min_deg.to_radians();
    let phi_hi = params.phi_max_deg.to_radians();
    let mut targets = Vec::with_capacity(params.k_targets);
    let mut betas = Vec::with_capacity(params.k_targets);
    for _ in 0..params.k_targets {
        let r = params.r_min + (r_hi - params.r_min) * rng.gen::<f64>();
        let phi = phi_lo + (phi_hi - phi_lo) * rng.gen::<f64>();
        targets.push(SphericalPosition { r, theta, phi });
        betas.push(Complex64::from_polar(
            1.0,
            2.0 * std::f64::consts::PI * rng.gen::<f64>(),
        ));
    }
    Scenario::new(targets, betas, (0..params.n_users).collect())
        .expect("generated scenarios are valid by construction")
}

/// One completed trial.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub seed: u64,
    pub p_max_dbm: f64,
    pub scenario: Scenario,
    pub rmse: f64,
    /// Position error bound of the final configuration at the true user
    /// parameters.
    pub peb: f64,
    pub sum_rate_true: f64,
    pub sum_rate_est: f64,
    pub residual_si_max: f64,
    pub feasible: bool,
    pub wall_ms: u64,
}

/// Aggregates for one transmit power point, over completed trials.
#[derive(Debug, Clone, Serialize)]
pub struct PowerSummary {
    pub p_max_dbm: f64,
    pub trials: usize,
    pub failures: usize,
    pub mean_rmse_m: f64,
    pub median_rmse_m: f64,
    pub mean_peb_m: f64,
    pub median_peb_m: f64,
    pub mean_sum_rate_true: f64,
    pub mean_sum_rate_est: f64,
    pub feasible_fraction: f64,
    pub mean_wall_ms: f64,
}

/// Whole-run summary: configuration echo plus per-power aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub master_seed: u64,
    pub config: RunConfig,
    pub per_power: Vec<PowerSummary>,
}

/// Stable per-trial seed derived from the master seed and the trial's grid
/// position (splitmix64 over a fixed mixing pattern).
pub fn trial_seed(master: u64, power_idx: usize, trial_idx: usize) -> u64 {
    let mut x = master
        ^ (power_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (trial_idx as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Runs one trial: scenario synthesis, the end-to-end design, a final
/// estimation round through the optimized configuration, and the metrics.
pub fn run_single_trial(
    config: &SystemConfig,
    params: &HarnessParams,
    seed: u64,
    p_max_dbm: f64,
) -> Result<TrialRecord, isac::IsacError> {
    let start = std::time::Instant::now();
    let mut cfg = config.clone();
    cfg.p_max = dbm_to_watts(p_max_dbm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = generate_scenario(&mut rng, &cfg, params);
    let channels = ChannelSet::synthesize(&scenario, &cfg);
    let grid = params.search_grid();
    let solution = isac::isac_design(
        &scenario,
        &channels,
        &cfg,
        &mut rng,
        params.mode.combiner(),
        &grid,
    )?;
    // final estimation round through the optimized configuration
    let symbols = SymbolBlock::generate(scenario.num_users(), cfg.t_slots, cfg.p_max, &mut rng);
    let y = synthesize_received(&solution.bf, &channels, &symbols, &mut rng, &cfg);
    let r_sample = estimation::sample_covariance(&y);
    let ctx = estimation::EstimationContext::new(
        &solution.bf.w_tx,
        &solution.bf.w_rx,
        &solution.bf.v,
        &channels.p_tx,
        &channels.p_rx,
        &cfg,
        scenario.num_targets(),
    );
    let final_estimates = estimation::estimate_targets(&r_sample, &ctx, &grid)?;
    let rmse = estimation::rmse(&final_estimates, &scenario)?;
    // bound at the true user parameters for the final configuration
    let truth_partials = fim::channel_partials(&scenario.user_positions(), &cfg);
    let truth_fim = fim::fim_assemble(
        &solution.bf.w_tx,
        &solution.bf.w_rx,
        &solution.bf.v,
        &truth_partials,
        &channels.p_tx,
        &channels.p_rx,
        &cfg,
    )?;
    let peb = fim::peb(&truth_fim)?.peb_full;
    let sum_rate_true = crate::comm_opt::sum_rate(
        &solution.bf.w_tx,
        &solution.bf.v,
        &channels.h_dl,
        &channels.p_tx,
        &cfg,
    );
    let residual_si_max = solution
        .residual_si
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    Ok(TrialRecord {
        seed,
        p_max_dbm,
        scenario,
        rmse,
        peb,
        sum_rate_true,
        sum_rate_est: solution.sum_rate,
        residual_si_max,
        feasible: solution.feasible,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

fn median(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs the full power sweep. Per-trial failures are counted, not fatal;
/// records come back sorted by (power index, trial index).
pub fn run_monte_carlo(run: &RunConfig) -> (RunSummary, Vec<TrialRecord>) {
    let master = run.system.rng_seed;
    let mut records = Vec::new();
    let mut per_power = Vec::new();
    for (p_idx, &p_dbm) in run.harness.p_max_dbm.iter().enumerate() {
        let mut power_records = Vec::new();
        let mut failures = 0usize;
        for t_idx in 0..run.harness.trials {
            let seed = trial_seed(master, p_idx, t_idx);
            match run_single_trial(&run.system, &run.harness, seed, p_dbm) {
                Ok(rec) => power_records.push(rec),
                Err(_) => failures += 1,
            }
        }
        let n = power_records.len();
        let mean = |f: &dyn Fn(&TrialRecord) -> f64| -> f64 {
            if n == 0 {
                0.0
            } else {
                power_records.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        let mut rmse_sorted: Vec<f64> = power_records.iter().map(|r| r.rmse).collect();
        rmse_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut peb_sorted: Vec<f64> = power_records.iter().map(|r| r.peb).collect();
        peb_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        per_power.push(PowerSummary {
            p_max_dbm: p_dbm,
            trials: n,
            failures,
            mean_rmse_m: mean(&|r| r.rmse),
            median_rmse_m: median(&rmse_sorted),
            mean_peb_m: mean(&|r| r.peb),
            median_peb_m: median(&peb_sorted),
            mean_sum_rate_true: mean(&|r| r.sum_rate_true),
            mean_sum_rate_est: mean(&|r| r.sum_rate_est),
            feasible_fraction: mean(&|r| if r.feasible { 1.0 } else { 0.0 }),
            mean_wall_ms: mean(&|r| r.wall_ms as f64),
        });
        records.extend(power_records);
    }
    let summary = RunSummary {
        run_id: run_id(run),
        master_seed: master,
        config: run.clone(),
        per_power,
    };
    (summary, records)
}

/// Short content hash identifying a (configuration, seed) pair.
pub fn run_id(run: &RunConfig) -> String {
    let echo = serde_json::to_string(run).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(echo.as_bytes());
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Renders the per-trial CSV. Column order is stable; floats use the
/// shortest round-trip representation.
pub fn render_records_csv(records: &[TrialRecord]) -> String {
    let mut out = String::from(
        "seed,p_max_dbm,rmse_m,peb_m,sum_rate_bpshz_true,sum_rate_bpshz_est,residual_si_max,feasible,wall_ms\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.p_max_dbm,
            r.rmse,
            r.peb,
            r.sum_rate_true,
            r.sum_rate_est,
            r.residual_si_max,
            r.feasible,
            r.wall_ms
        ));
    }
    out
}

/// Renders the plot-ready per-metric CSVs as (name, content) pairs.
pub fn render_plotdata(summary: &RunSummary) -> Vec<(String, String)> {
    let mut rmse = String::from("p_max_dbm,mean_rmse_m,median_rmse_m\n");
    let mut peb = String::from("p_max_dbm,mean_peb_m,median_peb_m\n");
    let mut rate = String::from("p_max_dbm,mean_sum_rate_bpshz_true,mean_sum_rate_bpshz_est\n");
    let mut feas = String::from("p_max_dbm,feasible_fraction\n");
    for p in &summary.per_power {
        rmse.push_str(&format!(
            "{},{},{}\n",
            p.p_max_dbm, p.mean_rmse_m, p.median_rmse_m
        ));
        peb.push_str(&format!(
            "{},{},{}\n",
            p.p_max_dbm, p.mean_peb_m, p.median_peb_m
        ));
        rate.push_str(&format!(
            "{},{},{}\n",
            p.p_max_dbm, p.mean_sum_rate_true, p.mean_sum_rate_est
        ));
        feas.push_str(&format!("{},{}\n", p.p_max_dbm, p.feasible_fraction));
    }
    vec![
        ("plotdata_rmse.csv".into(), rmse),
        ("plotdata_peb.csv".into(), peb),
        ("plotdata_sum_rate.csv".into(), rate),
        ("plotdata_feasibility.csv".into(), feas),
    ]
}

/// Writes records.csv, summary.json, and the plotdata files into `dir`.
pub fn emit_outputs(
    summary: &RunSummary,
    records: &[TrialRecord],
    dir: &Path,
) -> Result<(), HarnessError> {
    let write = |name: &str, content: &str| -> Result<(), HarnessError> {
        let path = dir.join(name);
        let mut file = std::fs::File::create(&path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        file.write_all(content.as_bytes())
            .map_err(|source| HarnessError::Io {
                path: path.display().to_string(),
                source,
            })
    };
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write("records.csv", &render_records_csv(records))?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write("summary.json", &json)?;
    for (name, content) in render_plotdata(summary) {
        write(&name, &content)?;
    }
    Ok(())
}

/// Debug dump of a complex matrix as CSV rows of "re,im" pairs.
pub fn dump_matrix_csv(path: &Path, m: &Array2<Complex64>) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|c| format!("{},{}", m[(r, c)].re, m[(r, c)].im))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}
