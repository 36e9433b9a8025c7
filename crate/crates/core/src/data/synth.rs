//! Seeded synthetic scenarios.
//!
//! Demands and durations are truncated log-normals; arrivals mix a morning
//! peak, an evening peak and a uniform background. Sessions that would leave
//! after the horizon or could not be served even at full rate are re-drawn.

use super::profiles::{price_preset, pv_profile, PricePreset};
use super::{max_deliverable_kwh, ChargerSpec, Jitter, ScenarioBundle, ScenarioConfig, SessionRecord};
use crate::grid::{self, BusId, GridError};
use crate::signals::{PriceSignal, SignalError, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

const MAX_REDRAWS: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("EV {index} at station {evcs}: no feasible session after {MAX_REDRAWS} draws")]
    Infeasible { index: usize, evcs: usize },
    #[error("generated sessions miss the target statistics: {0}")]
    Statistics(String),
    #[error("network: {0}")]
    Grid(#[from] GridError),
    #[error("prices: {0}")]
    Prices(#[from] SignalError),
}

/// Log-normal parameterized by its median, truncated to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedLogNormal {
    pub median: f64,
    pub sigma: f64,
    pub min: f64,
    pub max: f64,
}

impl TruncatedLogNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let dist = LogNormal::new(self.median.ln(), self.sigma).expect("validated");
        for _ in 0..MAX_REDRAWS {
            let x = dist.sample(rng);
            if (self.min..=self.max).contains(&x) {
                return x;
            }
        }
        self.median.clamp(self.min, self.max)
    }

    fn validate(&self, name: &str) -> Result<(), SynthError> {
        let ok = self.median > 0.0 && self.sigma > 0.0 && self.min <= self.max && self.min >= 0.0;
        ok.then_some(()).ok_or_else(|| SynthError::InvalidSpec(format!("{name}: bad distribution {self:?}")))
    }
}

/// Arrival-time mixture in hours of the day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArrivalProfile {
    pub morning_weight: f64,
    pub morning_hour: f64,
    pub morning_sd: f64,
    pub evening_weight: f64,
    pub evening_hour: f64,
    pub evening_sd: f64,
}

impl Default for ArrivalProfile {
    fn default() -> Self {
        Self {
            morning_weight: 0.45,
            morning_hour: 8.0,
            morning_sd: 1.25,
            evening_weight: 0.35,
            evening_hour: 17.5,
            evening_sd: 1.5,
        }
    }
}

impl ArrivalProfile {
    /// Arrival in minutes within `[0, horizon_min)`; the remaining weight is uniform.
    fn sample<R: Rng + ?Sized>(&self, horizon_min: f64, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let t = if u < self.morning_weight {
            Normal::new(self.morning_hour * 60.0, self.morning_sd * 60.0).expect("validated").sample(rng)
        } else if u < self.morning_weight + self.evening_weight {
            Normal::new(self.evening_hour * 60.0, self.evening_sd * 60.0).expect("validated").sample(rng)
        } else {
            rng.random_range(0.0..horizon_min)
        };
        t.rem_euclid(horizon_min)
    }
}

/// Parameters of a synthetic scenario. Defaults describe the desk 33-bus case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSpec {
    pub seed: u64,
    /// Built-in feeder name (`ieee33`, `two_bus`) or a path to a network document.
    pub network: String,
    pub deployment: Vec<BusId>,
    pub chargers_per_evcs: Vec<usize>,
    pub horizon_steps: usize,
    pub dt_hours: f64,
    pub evs_per_evcs: usize,
    pub demand_kwh: TruncatedLogNormal,
    pub duration_min: TruncatedLogNormal,
    pub arrival: ArrivalProfile,
    /// Battery capacity drawn uniformly from this range, kWh.
    pub capacity_kwh: (f64, f64),
    /// PV peak per station; a single entry applies to all stations.
    pub pv_peak_kw: Vec<f64>,
    pub pv_noise: f64,
    pub price: PricePreset,
    pub charger: ChargerSpec,
    pub weights: Weights,
    pub base_load_scale: f64,
    pub jitter: Jitter,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            network: "ieee33".into(),
            deployment: vec![BusId(8), BusId(12), BusId(14), BusId(30)],
            chargers_per_evcs: vec![10; 4],
            horizon_steps: 288,
            dt_hours: 1.0 / 12.0,
            evs_per_evcs: 40,
            demand_kwh: TruncatedLogNormal { median: 10.0, sigma: 0.7, min: 1.0, max: 80.0 },
            duration_min: TruncatedLogNormal { median: 240.0, sigma: 0.8, min: 10.0, max: 800.0 },
            arrival: ArrivalProfile::default(),
            capacity_kwh: (50.0, 100.0),
            pv_peak_kw: vec![20.0],
            pv_noise: 0.1,
            price: PricePreset::Tou,
            charger: ChargerSpec::default(),
            weights: Weights::default(),
            base_load_scale: 0.5,
            jitter: Jitter { arrival_steps: 3, energy_frac: 0.1, pv_frac: 0.1 },
        }
    }
}

impl SynthesisSpec {
    /// The small two-bus scenario used by smoke tests.
    pub fn smoke() -> Self {
        Self {
            network: "two_bus".into(),
            deployment: vec![BusId(2)],
            chargers_per_evcs: vec![2],
            evs_per_evcs: 6,
            pv_peak_kw: vec![5.0],
            base_load_scale: 1.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.horizon_steps == 0 || !(self.dt_hours > 0.0) {
            return bad("horizon and dt must be positive");
        }
        if self.chargers_per_evcs.len() != self.deployment.len() {
            return bad("chargers_per_evcs must have one entry per station");
        }
        if !(self.pv_peak_kw.len() == 1 || self.pv_peak_kw.len() == self.deployment.len()) {
            return bad("pv_peak_kw must have one entry or one per station");
        }
        if !(self.capacity_kwh.0 > 0.0 && self.capacity_kwh.0 <= self.capacity_kwh.1) {
            return bad("capacity range must be positive and ordered");
        }
        let a = &self.arrival;
        if a.morning_weight < 0.0 || a.evening_weight < 0.0 || a.morning_weight + a.evening_weight > 1.0 {
            return bad("arrival weights must be nonnegative and sum to at most 1");
        }
        if !(a.morning_sd > 0.0 && a.evening_sd > 0.0) {
            return bad("arrival spreads must be positive");
        }
        self.demand_kwh.validate("demand_kwh")?;
        self.duration_min.validate("duration_min")?;
        Ok(())
    }
}

fn resolve_network(name: &str) -> Result<grid::Network, GridError> {
    match name {
        "ieee33" => Ok(grid::ieee33()),
        "two_bus" => Ok(grid::two_bus()),
        path => grid::load_network_file(path),
    }
}

/// Stream ids keep sessions, PV and prices independent of each other's draw counts.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// Generates a scenario bundle; identical specs give identical bundles.
pub fn synthesize(spec: &SynthesisSpec) -> Result<ScenarioBundle, SynthError> {
    spec.validate()?;
    let network = resolve_network(&spec.network)?;
    grid::DeploymentMap::new(&network, spec.deployment.clone())?;
    let h = spec.horizon_steps;
    let horizon_min = h as f64 * spec.dt_hours * 60.0;
    let k = spec.deployment.len();

    let mut rng = stream(spec.seed, 1);
    let mut sessions = Vec::with_capacity(k * spec.evs_per_evcs);
    for evcs in 0..k {
        for i in 0..spec.evs_per_evcs {
            sessions.push(draw_session(spec, evcs, horizon_min, &mut rng).ok_or(SynthError::Infeasible {
                index: i,
                evcs,
            })?);
        }
    }
    sessions.sort_by(|a: &SessionRecord, b| {
        a.arrival_min.total_cmp(&b.arrival_min).then(a.evcs_id.cmp(&b.evcs_id))
    });
    check_statistics(&sessions)?;

    let mut rng = stream(spec.seed, 2);
    let per_station: Vec<Vec<f64>> = (0..k)
        .map(|s| {
            let peak = spec.pv_peak_kw[if spec.pv_peak_kw.len() == 1 { 0 } else { s }];
            pv_profile(peak, h, spec.dt_hours, spec.pv_noise, &mut rng)
                .into_iter()
                .map(|v| round_to(v, 1e-3))
                .collect()
        })
        .collect();
    let pv_kw = (0..h).map(|t| per_station.iter().map(|p| p[t]).collect()).collect();

    let mut rng = stream(spec.seed, 3);
    let (buy, sell) = price_preset(spec.price, h, spec.dt_hours, &mut rng);
    let buy = buy.into_iter().map(|v| round_to(v, 1e-4)).collect();
    let sell = sell.into_iter().map(|v| round_to(v, 1e-4)).collect();
    let prices = PriceSignal::new(buy, sell, false)?;

    let config = ScenarioConfig {
        horizon_steps: h,
        dt_hours: spec.dt_hours,
        seed: spec.seed,
        deployment: spec.deployment.clone(),
        chargers_per_evcs: spec.chargers_per_evcs.clone(),
        charger: spec.charger,
        weights: spec.weights,
        base_load_scale: spec.base_load_scale,
        load_profile: None,
        allow_price_arbitrage: false,
        jitter: spec.jitter,
    };
    Ok(ScenarioBundle { network, prices, pv_kw, sessions, config })
}

fn draw_session<R: Rng + ?Sized>(
    spec: &SynthesisSpec,
    evcs: usize,
    horizon_min: f64,
    rng: &mut R,
) -> Option<SessionRecord> {
    for _ in 0..MAX_REDRAWS {
        let arrival = spec.arrival.sample(horizon_min, rng).floor();
        let duration = spec.duration_min.sample(rng).round();
        let departure = arrival + duration;
        if departure > horizon_min || duration < spec.duration_min.min {
            continue;
        }
        let energy = round_to(spec.demand_kwh.sample(rng), 1e-3);
        let capacity = round_to(rng.random_range(spec.capacity_kwh.0..=spec.capacity_kwh.1), 0.1).max(energy);
        if energy > max_deliverable_kwh(&spec.charger, duration) {
            continue;
        }
        return Some(SessionRecord { arrival_min: arrival, departure_min: departure, energy_kwh: energy, capacity_kwh: capacity, evcs_id: evcs });
    }
    None
}

/// Below this many sessions the empirical statistics are too noisy to check.
const MIN_SESSIONS_FOR_STATS: usize = 20;

fn check_statistics(sessions: &[SessionRecord]) -> Result<(), SynthError> {
    if sessions.len() < MIN_SESSIONS_FOR_STATS {
        return Ok(());
    }
    let mut demand: Vec<f64> = sessions.iter().map(|s| s.energy_kwh).collect();
    demand.sort_by(f64::total_cmp);
    let median = demand[demand.len() / 2];
    if median >= 20.0 {
        return Err(SynthError::Statistics(format!("median demand {median:.2} kWh is not below 20")));
    }
    let in_range = sessions
        .iter()
        .filter(|s| (10.0..=800.0).contains(&(s.departure_min - s.arrival_min)))
        .count();
    let frac = in_range as f64 / sessions.len() as f64;
    if frac < 0.9 {
        return Err(SynthError::Statistics(format!("only {:.1}% of durations in [10, 800] min", frac * 100.0)));
    }
    Ok(())
}
