//! Scenario bundles: loading, writing, and synthetic generation.
//!
//! A scenario directory holds five documents:
//!
//! | file           | format                                                         |
//! |----------------|----------------------------------------------------------------|
//! | `network.json` | network document (see [`crate::grid::NetworkFile`])            |
//! | `prices.csv`   | `step, buy_per_kwh, sell_per_kwh`, one row per step            |
//! | `pv.csv`       | `step, evcs_id, pv_kw`, one row per step and station           |
//! | `sessions.csv` | `arrival_min, departure_min, energy_kwh, capacity_kwh, evcs_id`|
//! | `config.json`  | [`ScenarioConfig`]                                             |
//!
//! Session minutes map to steps by flooring the arrival and ceiling the
//! departure. Station ids are 0-based indices into the deployment.

mod profiles;
mod synth;

pub use profiles::{price_preset, pv_profile, residential_load_shape, PricePreset};
pub use synth::{synthesize, ArrivalProfile, SynthError, SynthesisSpec, TruncatedLogNormal};

use crate::fleet::{EvSession, FleetError};
use crate::grid::{self, BusId, DeploymentMap, GridError, Network};
use crate::signals::{PriceSignal, SignalError, Weights};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing scenario file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: horizon mismatch: {message}")]
    HorizonMismatch { path: PathBuf, message: String },
    #[error("{path}:{line}: session references EVCS {evcs_id} but only {deployed} are deployed")]
    DanglingEvcs { path: PathBuf, line: usize, evcs_id: usize, deployed: usize },
    #[error("network: {0}")]
    Grid(#[from] GridError),
    #[error("prices: {0}")]
    Prices(#[from] SignalError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Charger parameters shared by every charger of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChargerSpec {
    pub p_ch_max_kw: f64,
    pub p_dis_max_kw: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
}

impl Default for ChargerSpec {
    fn default() -> Self {
        Self { p_ch_max_kw: 22.0, p_dis_max_kw: 22.0, eta_ch: 0.95, eta_dis: 0.95 }
    }
}

/// Seeded per-episode perturbation of the scenario's day.
///
/// Arrival and departure shift together by up to `arrival_steps`; energy and
/// PV are scaled by `1 + u` with `u` uniform in `[-frac, frac]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    pub arrival_steps: usize,
    pub energy_frac: f64,
    pub pv_frac: f64,
}

impl Jitter {
    pub fn is_none(&self) -> bool {
        self.arrival_steps == 0 && self.energy_frac == 0.0 && self.pv_frac == 0.0
    }
}

/// Contents of `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_horizon")]
    pub horizon_steps: usize,
    #[serde(default = "default_dt")]
    pub dt_hours: f64,
    #[serde(default)]
    pub seed: u64,
    pub deployment: Vec<BusId>,
    #[serde(default = "default_chargers")]
    pub chargers_per_evcs: Vec<usize>,
    #[serde(default)]
    pub charger: ChargerSpec,
    #[serde(default)]
    pub weights: Weights,
    /// Multiplier on the network's nominal loads.
    #[serde(default = "one")]
    pub base_load_scale: f64,
    /// Per-step load shape; a residential daily curve when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_profile: Option<Vec<f64>>,
    #[serde(default)]
    pub allow_price_arbitrage: bool,
    #[serde(default)]
    pub jitter: Jitter,
}

fn default_horizon() -> usize {
    288
}
fn default_dt() -> f64 {
    1.0 / 12.0
}
fn default_chargers() -> Vec<usize> {
    vec![10; 4]
}
fn one() -> f64 {
    1.0
}

impl ScenarioConfig {
    /// Load multiplier per step: `base_load_scale * shape[t]`.
    pub fn load_multipliers(&self) -> Vec<f64> {
        let shape = self
            .load_profile
            .clone()
            .unwrap_or_else(|| residential_load_shape(self.horizon_steps, self.dt_hours));
        shape.iter().map(|s| s * self.base_load_scale).collect()
    }
}

/// One row of `sessions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub arrival_min: f64,
    pub departure_min: f64,
    pub energy_kwh: f64,
    pub capacity_kwh: f64,
    pub evcs_id: usize,
}

impl SessionRecord {
    pub fn arrival_step(&self, dt_hours: f64) -> usize {
        (self.arrival_min / (dt_hours * 60.0) + 1e-9).floor() as usize
    }

    pub fn departure_step(&self, dt_hours: f64) -> usize {
        (self.departure_min / (dt_hours * 60.0) - 1e-9).ceil() as usize
    }

    /// SoC on arrival: 20 % of capacity, lowered if the demand would not fit.
    pub fn soc_arrival_kwh(&self) -> f64 {
        (0.2 * self.capacity_kwh).min(self.capacity_kwh - self.energy_kwh).max(0.0)
    }

    /// Builds the session in step units, clamped to `[0, horizon]`.
    pub fn to_session(&self, id: usize, dt_hours: f64, horizon: usize) -> Result<EvSession, FleetError> {
        let arrival = self.arrival_step(dt_hours).min(horizon.saturating_sub(1));
        let departure = self.departure_step(dt_hours).clamp(arrival + 1, horizon);
        let soc0 = self.soc_arrival_kwh();
        let target = (soc0 + self.energy_kwh).min(self.capacity_kwh);
        EvSession::new(id, self.evcs_id, arrival, departure, soc0, target, self.capacity_kwh)
    }
}

/// Everything needed to run episodes of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub network: Network,
    pub prices: PriceSignal,
    /// `pv_kw[step][evcs]`.
    pub pv_kw: Vec<Vec<f64>>,
    pub sessions: Vec<SessionRecord>,
    pub config: ScenarioConfig,
}

impl ScenarioBundle {
    pub fn deployment(&self) -> Result<DeploymentMap, GridError> {
        DeploymentMap::new(&self.network, self.config.deployment.clone())
    }

    pub fn num_evcs(&self) -> usize {
        self.config.deployment.len()
    }

    /// Checks cross-references and horizon coverage.
    pub fn validate(&self) -> Result<(), DataError> {
        let cfg = &self.config;
        let h = cfg.horizon_steps;
        if h == 0 || !(cfg.dt_hours > 0.0) {
            return Err(DataError::Config("horizon and dt must be positive".into()));
        }
        self.deployment()?;
        if cfg.chargers_per_evcs.len() != cfg.deployment.len() {
            return Err(DataError::Config(format!(
                "chargers_per_evcs has {} entries for {} stations",
                cfg.chargers_per_evcs.len(),
                cfg.deployment.len()
            )));
        }
        if let Some(p) = &cfg.load_profile {
            if p.len() != h {
                return Err(DataError::HorizonMismatch {
                    path: "config.json".into(),
                    message: format!("load_profile has {} entries, horizon is {h}", p.len()),
                });
            }
        }
        cfg.weights.validate()?;
        if self.prices.len() != h {
            return Err(DataError::HorizonMismatch {
                path: "prices.csv".into(),
                message: format!("{} rows for a {h}-step horizon", self.prices.len()),
            });
        }
        if self.pv_kw.len() != h || self.pv_kw.iter().any(|r| r.len() != self.num_evcs()) {
            return Err(DataError::HorizonMismatch {
                path: "pv.csv".into(),
                message: format!("expected {h} steps x {} stations", self.num_evcs()),
            });
        }
        for (i, s) in self.sessions.iter().enumerate() {
            if s.evcs_id >= self.num_evcs() {
                return Err(DataError::DanglingEvcs {
                    path: "sessions.csv".into(),
                    line: i + 2,
                    evcs_id: s.evcs_id,
                    deployed: self.num_evcs(),
                });
            }
            s.to_session(i, cfg.dt_hours, h).map_err(|e| DataError::Parse {
                path: "sessions.csv".into(),
                line: i + 2,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialized documents.
    pub fn content_hash(&self) -> String {
        let docs = self.render();
        let mut h = Sha256::new();
        for (name, body) in &docs {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(body.as_bytes());
        }
        hex_digest(&h.finalize())
    }

    fn render(&self) -> Vec<(&'static str, String)> {
        let mut prices = String::from("step,buy_per_kwh,sell_per_kwh\n");
        for t in 0..self.prices.len() {
            prices.push_str(&format!("{t},{},{}\n", self.prices.buy[t], self.prices.sell[t]));
        }
        let mut pv = String::from("step,evcs_id,pv_kw\n");
        for (t, row) in self.pv_kw.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                pv.push_str(&format!("{t},{k},{v}\n"));
            }
        }
        let mut sessions = String::from("arrival_min,departure_min,energy_kwh,capacity_kwh,evcs_id\n");
        for s in &self.sessions {
            sessions.push_str(&format!(
                "{},{},{},{},{}\n",
                s.arrival_min, s.departure_min, s.energy_kwh, s.capacity_kwh, s.evcs_id
            ));
        }
        let network = serde_json::to_string_pretty(&self.network.to_file()).expect("serializable");
        let config = serde_json::to_string_pretty(&self.config).expect("serializable");
        vec![
            ("network.json", network + "\n"),
            ("prices.csv", prices),
            ("pv.csv", pv),
            ("sessions.csv", sessions),
            ("config.json", config + "\n"),
        ]
    }

    /// Writes the five scenario documents into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.into(), source })?;
        for (name, body) in self.render() {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| DataError::Io { path, source })?;
        }
        Ok(())
    }

    /// Sessions converted to step units, in file order.
    pub fn ev_sessions(&self) -> Vec<EvSession> {
        self.sessions
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.to_session(i, self.config.dt_hours, self.config.horizon_steps).ok())
            .collect()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.into()));
    }
    std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.into(), source })
}

fn csv_rows<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        out.push(row.map_err(|e| DataError::Parse {
            path: path.into(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct PriceRow {
    step: usize,
    buy_per_kwh: f64,
    sell_per_kwh: f64,
}

#[derive(Deserialize)]
struct PvRow {
    step: usize,
    evcs_id: usize,
    pv_kw: f64,
}

/// Loads and validates a scenario directory.
pub fn load_scenario(dir: impl AsRef<Path>) -> Result<ScenarioBundle, DataError> {
    let dir = dir.as_ref();
    let network_path = dir.join("network.json");
    let network = grid::load_network(&read(&network_path)?)?;

    let config_path = dir.join("config.json");
    let config: ScenarioConfig = serde_json::from_str(&read(&config_path)?).map_err(|e| DataError::Parse {
        path: config_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let h = config.horizon_steps;
    let k = config.deployment.len();

    let price_path = dir.join("prices.csv");
    let rows: Vec<PriceRow> = csv_rows(&price_path, &read(&price_path)?)?;
    if rows.len() != h {
        return Err(DataError::HorizonMismatch {
            path: price_path,
            message: format!("{} rows for a {h}-step horizon", rows.len()),
        });
    }
    let mut buy = vec![0.0; h];
    let mut sell = vec![0.0; h];
    for (i, r) in rows.iter().enumerate() {
        if r.step != i {
            return Err(DataError::Parse {
                path: price_path,
                line: i + 2,
                message: format!("expected step {i}, found {}", r.step),
            });
        }
        buy[i] = r.buy_per_kwh;
        sell[i] = r.sell_per_kwh;
    }
    let prices = PriceSignal::new(buy, sell, config.allow_price_arbitrage)?;

    let pv_path = dir.join("pv.csv");
    let rows: Vec<PvRow> = csv_rows(&pv_path, &read(&pv_path)?)?;
    let mut pv_kw = vec![vec![f64::NAN; k]; h];
    for (i, r) in rows.iter().enumerate() {
        if r.step >= h {
            return Err(DataError::HorizonMismatch {
                path: pv_path,
                message: format!("line {}: step {} beyond horizon {h}", i + 2, r.step),
            });
        }
        if r.evcs_id >= k {
            return Err(DataError::DanglingEvcs { path: pv_path, line: i + 2, evcs_id: r.evcs_id, deployed: k });
        }
        pv_kw[r.step][r.evcs_id] = r.pv_kw;
    }
    if pv_kw.iter().flatten().any(|v| v.is_nan()) || rows.len() != h * k {
        return Err(DataError::HorizonMismatch {
            path: pv_path,
            message: format!("expected exactly one row per step and station ({} rows), found {}", h * k, rows.len()),
        });
    }

    let session_path = dir.join("sessions.csv");
    let sessions: Vec<SessionRecord> = csv_rows(&session_path, &read(&session_path)?)?;
    for (i, s) in sessions.iter().enumerate() {
        if s.evcs_id >= k {
            return Err(DataError::DanglingEvcs { path: session_path, line: i + 2, evcs_id: s.evcs_id, deployed: k });
        }
    }

    let bundle = ScenarioBundle { network, prices, pv_kw, sessions, config };
    bundle.validate().map_err(|e| match e {
        DataError::Parse { line, message, .. } => DataError::Parse { path: session_path, line, message },
        other => other,
    })?;
    Ok(bundle)
}

/// A session that cannot reach its target even when charged flat out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfeasibleSession {
    pub index: usize,
    pub evcs_id: usize,
    pub energy_kwh: f64,
    pub max_deliverable_kwh: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub flagged: Vec<InfeasibleSession>,
    pub checked: usize,
}

/// Largest energy a charger can put into a battery over `minutes`, kWh.
pub fn max_deliverable_kwh(charger: &ChargerSpec, minutes: f64) -> f64 {
    charger.p_ch_max_kw * charger.eta_ch * minutes / 60.0
}

/// Flags sessions whose demand exceeds `max rate x duration x efficiency`.
pub fn validate_feasibility(bundle: &ScenarioBundle) -> FeasibilityReport {
    let flagged = bundle
        .sessions
        .iter()
        .enumerate()
        .filter_map(|(index, s)| {
            let cap = max_deliverable_kwh(&bundle.config.charger, s.departure_min - s.arrival_min);
            (s.energy_kwh > cap + 1e-9).then_some(InfeasibleSession {
                index,
                evcs_id: s.evcs_id,
                energy_kwh: s.energy_kwh,
                max_deliverable_kwh: cap,
            })
        })
        .collect();
    FeasibilityReport { flagged, checked: bundle.sessions.len() }
}
