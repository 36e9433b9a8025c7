//! The multi-station charging environment.
//!
//! One [`EvcsEnv::step`] advances the clock from `t` to `t + 1`:
//!
//! 1. EVs arriving at `t` are already seated (they were admitted when the
//!    clock reached `t`, before the observation for `t` was built);
//! 2. charger actions are projected onto their feasible sets and applied;
//! 3. tracking shortfall is measured at `t + 1`, then EVs due at `t + 1`
//!    leave and report their unmet demand;
//! 4. bus injections are composed from the scaled base load and each
//!    station's net trading power;
//! 5. the power flow is solved;
//! 6. the cost breakdown, reward and safety cost are computed;
//! 7. arrivals at `t + 1` are admitted and observations are built from this
//!    step's power flow, so an action never sees its own grid effect.

use crate::data::{DataError, ScenarioBundle, SessionRecord};
use crate::fleet::{
    apply_charger_action, assign_arrivals, depart_all, process_departures, ChargerOutcome, ChargerState,
    EvSession, EvcsState, FleetError,
};
use crate::grid::{solve_power_flow, GridError, Network, PowerFlowOptions, PowerFlowResult};
use crate::signals::{
    degradation_cost, dissatisfaction_cost, step_signals, trading_cost, trading_power, voltage_violation,
    BreakdownInputs, CostBreakdown, PriceSignal, StepPrice, Weights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("episode has terminated; call reset")]
    Terminated,
    #[error("expected actions for {expected} agents, got {got}")]
    AgentCount { got: usize, expected: usize },
    #[error("agent {agent}: expected {expected} charger actions, got {got}")]
    ActionDims { agent: usize, got: usize, expected: usize },
    #[error("scenario: {0}")]
    Data(#[from] DataError),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("fleet: {0}")]
    Fleet(#[from] FleetError),
}

/// Scales applied to raw quantities before they enter an observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// kW mapped to 1.0 for injections and PV: charger rating x largest station size.
    pub power_kw: f64,
    /// Multiplier on `v - 1` (p.u.).
    pub voltage_gain: f64,
    /// $/kWh mapped to 1.0: the day's highest buy price.
    pub price: f64,
    /// Hours mapped to 1.0 for time-to-departure.
    pub time_hours: f64,
    /// kWh mapped to 1.0 for SoC gaps: energy one charger adds over `time_hours` at full rate.
    pub energy_kwh: f64,
}

/// Fixed observation shape shared by every agent of a scenario.
///
/// ```text
/// [ neighborhood slots x (injection, voltage, valid) | pv, buy, sell | charger slots x (time left, SoC gap, occupied) ]
/// ```
///
/// The first neighborhood slot is the hosting bus, followed by its 1-hop
/// neighbors in ascending bus id. Unused slots are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub neighbor_slots: usize,
    pub charger_slots: usize,
}

impl ObsLayout {
    pub const NEIGHBOR_FEATURES: usize = 3;
    pub const GLOBAL_FEATURES: usize = 3;
    pub const CHARGER_FEATURES: usize = 3;

    pub fn dim(&self) -> usize {
        self.charger_offset() + self.charger_slots * Self::CHARGER_FEATURES
    }

    pub fn global_offset(&self) -> usize {
        self.neighbor_slots * Self::NEIGHBOR_FEATURES
    }

    pub fn charger_offset(&self) -> usize {
        self.global_offset() + Self::GLOBAL_FEATURES
    }

    /// Index of the occupancy flag of charger `j`.
    pub fn occupancy_index(&self, j: usize) -> usize {
        self.charger_offset() + j * Self::CHARGER_FEATURES + 2
    }
}

/// One agent's normalized local view.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub agent: usize,
    pub features: Vec<f64>,
    /// Occupancy per charger slot; padded slots are `false`.
    pub charger_mask: Vec<bool>,
}

/// Inputs the observation builder may read. Only the entries listed in
/// `neighborhood` are touched in `injections` and `voltages`.
pub struct ObsInputs<'a> {
    pub layout: ObsLayout,
    pub norm: &'a Normalization,
    pub neighborhood: &'a [usize],
    pub injections_kw: &'a [f64],
    pub voltages: &'a [f64],
    pub pv_kw: f64,
    pub price: StepPrice,
    pub station: &'a EvcsState,
    pub t: usize,
    pub dt_hours: f64,
}

/// Builds one agent's observation vector.
pub fn build_observation(agent: usize, inp: &ObsInputs<'_>) -> Observation {
    let layout = inp.layout;
    let norm = inp.norm;
    let mut f = vec![0.0; layout.dim()];
    for (slot, &bus) in inp.neighborhood.iter().take(layout.neighbor_slots).enumerate() {
        let o = slot * ObsLayout::NEIGHBOR_FEATURES;
        f[o] = inp.injections_kw[bus] / norm.power_kw;
        f[o + 1] = (inp.voltages[bus] - 1.0) * norm.voltage_gain;
        f[o + 2] = 1.0;
    }
    let g = layout.global_offset();
    f[g] = inp.pv_kw / norm.power_kw;
    f[g + 1] = inp.price.buy / norm.price;
    f[g + 2] = inp.price.sell / norm.price;
    let mut mask = vec![false; layout.charger_slots];
    for (j, ev) in inp.station.occupied() {
        if j >= layout.charger_slots {
            continue;
        }
        let o = layout.charger_offset() + j * ObsLayout::CHARGER_FEATURES;
        let steps_left = ev.departure_step.saturating_sub(inp.t);
        f[o] = steps_left as f64 * inp.dt_hours / norm.time_hours;
        f[o + 1] = (ev.soc_target_departure_kwh - ev.soc_kwh) / norm.energy_kwh;
        f[o + 2] = 1.0;
        mask[j] = true;
    }
    Observation { agent, features: f, charger_mask: mask }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub breakdown: CostBreakdown,
    /// `outcomes[k][j]`: projection result for charger `j` of station `k`.
    pub outcomes: Vec<Vec<ChargerOutcome>>,
    pub p_trade_kw: Vec<f64>,
    /// Bus voltages in dense index order, p.u.
    pub voltages: Vec<f64>,
    pub converged: bool,
    pub departures: usize,
}

impl StepInfo {
    pub fn clipped(&self) -> usize {
        self.outcomes.iter().flatten().filter(|o| o.was_clipped()).count()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Compact per-step record kept for metrics and traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub reward: f64,
    pub cost: f64,
    pub breakdown: CostBreakdown,
    pub p_trade_kw: Vec<f64>,
    /// Empty unless voltage recording is enabled.
    pub voltages: Vec<f64>,
    pub converged: bool,
    /// Battery-side energy added this step, kWh.
    pub charged_kwh: f64,
    /// Battery-side energy removed this step, kWh.
    pub discharged_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepartureRecord {
    pub evcs: usize,
    pub session: usize,
    pub step: usize,
    pub unmet_kwh: f64,
    pub served: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EpisodeTrace {
    pub steps: Vec<StepRecord>,
    pub departures: Vec<DepartureRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Sum of trading costs, $.
    pub energy_cost: f64,
    /// Throughput over net delivered energy, %; `None` when nothing was delivered.
    pub cycling_overhead: Option<f64>,
    /// Mean per-step voltage violation, p.u.
    pub avg_voltage_violation: f64,
    /// Unmet kWh per departed EV.
    pub avg_dissatisfaction: f64,
    /// Set when no EV departed, in which case `avg_dissatisfaction` is 0.
    pub no_departures: bool,
    pub total_reward: f64,
    pub total_cost: f64,
    /// `sum(-reward + cost)`.
    pub objective: f64,
    pub departed: usize,
}

/// Summarizes a finished episode.
pub fn metrics(trace: &EpisodeTrace) -> EpisodeMetrics {
    let steps = &trace.steps;
    let energy_cost = steps.iter().map(|s| s.breakdown.f_td.iter().sum::<f64>()).sum();
    let charged: f64 = steps.iter().map(|s| s.charged_kwh).sum();
    let discharged: f64 = steps.iter().map(|s| s.discharged_kwh).sum();
    let delivered = charged - discharged;
    let cycling_overhead = (delivered > 1e-12).then(|| (charged + discharged) / delivered * 100.0);
    let avg_voltage_violation = if steps.is_empty() {
        0.0
    } else {
        steps.iter().map(|s| s.breakdown.f_vt).sum::<f64>() / steps.len() as f64
    };
    let departed = trace.departures.len();
    let unmet: f64 = trace.departures.iter().map(|d| d.unmet_kwh).sum();
    let total_reward: f64 = steps.iter().map(|s| s.reward).sum();
    let total_cost: f64 = steps.iter().map(|s| s.cost).sum();
    EpisodeMetrics {
        energy_cost,
        cycling_overhead,
        avg_voltage_violation,
        avg_dissatisfaction: if departed == 0 { 0.0 } else { unmet / departed as f64 },
        no_departures: departed == 0,
        total_reward,
        total_cost,
        objective: total_cost - total_reward,
        departed,
    }
}

/// A running episode over one scenario bundle.
#[derive(Debug, Clone)]
pub struct EvcsEnv {
    network: Network,
    prices: PriceSignal,
    pv_base: Vec<Vec<f64>>,
    records: Vec<SessionRecord>,
    weights: Weights,
    horizon: usize,
    dt_hours: f64,
    jitter: crate::data::Jitter,
    load_mult: Vec<f64>,
    hosts: Vec<usize>,
    neighborhoods: Vec<Vec<usize>>,
    layout: ObsLayout,
    norm: Normalization,
    pf_opts: PowerFlowOptions,
    template: Vec<EvcsState>,
    record_voltages: bool,

    t: usize,
    done: bool,
    stations: Vec<EvcsState>,
    pv: Vec<Vec<f64>>,
    arrivals: Vec<Vec<EvSession>>,
    injections_kw: Vec<f64>,
    voltages: Vec<f64>,
    trace: EpisodeTrace,
}

impl EvcsEnv {
    pub fn new(bundle: &ScenarioBundle) -> Result<Self, EnvError> {
        bundle.validate()?;
        let cfg = &bundle.config;
        let network = bundle.network.clone();
        let deployment = bundle.deployment()?;
        let mut hosts = Vec::new();
        let mut neighborhoods = Vec::new();
        for k in 0..deployment.len() {
            let host = network.index_of(deployment.bus(k)?)?;
            let mut hood = vec![host];
            hood.extend(network.adjacent(host).iter().copied());
            hosts.push(host);
            neighborhoods.push(hood);
        }
        let c = &cfg.charger;
        let template = cfg
            .chargers_per_evcs
            .iter()
            .zip(&deployment.placements)
            .map(|(&n, &bus)| {
                let chargers = (0..n)
                    .map(|_| ChargerState::new(c.p_ch_max_kw, c.p_dis_max_kw, c.eta_ch, c.eta_dis))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(EvcsState::new(bus, chargers))
            })
            .collect::<Result<Vec<_>, FleetError>>()?;
        let layout = ObsLayout {
            neighbor_slots: neighborhoods.iter().map(Vec::len).max().unwrap_or(0),
            charger_slots: cfg.chargers_per_evcs.iter().copied().max().unwrap_or(0),
        };
        let time_hours = 8.0;
        let norm = Normalization {
            power_kw: c.p_ch_max_kw * layout.charger_slots.max(1) as f64,
            voltage_gain: 20.0,
            price: bundle.prices.max_buy().max(1e-9),
            time_hours,
            energy_kwh: c.p_ch_max_kw * c.eta_ch * time_hours,
        };
        let n = network.len();
        let mut env = Self {
            prices: bundle.prices.clone(),
            pv_base: bundle.pv_kw.clone(),
            records: bundle.sessions.clone(),
            weights: cfg.weights,
            horizon: cfg.horizon_steps,
            dt_hours: cfg.dt_hours,
            jitter: cfg.jitter,
            load_mult: cfg.load_multipliers(),
            hosts,
            neighborhoods,
            layout,
            norm,
            pf_opts: PowerFlowOptions::default(),
            stations: template.clone(),
            template,
            record_voltages: true,
            t: 0,
            done: true,
            pv: Vec::new(),
            arrivals: Vec::new(),
            injections_kw: vec![0.0; n],
            voltages: vec![network.v_slack; n],
            trace: EpisodeTrace::default(),
            network,
        };
        env.reset(cfg.seed)?;
        Ok(env)
    }

    pub fn num_agents(&self) -> usize {
        self.hosts.len()
    }

    pub fn chargers(&self, agent: usize) -> usize {
        self.template[agent].chargers.len()
    }

    pub fn layout(&self) -> ObsLayout {
        self.layout
    }

    pub fn obs_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_hours
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn stations(&self) -> &[EvcsState] {
        &self.stations
    }

    /// Dense bus indices read by agent `k`: hosting bus first, then neighbors.
    pub fn neighborhood(&self, agent: usize) -> &[usize] {
        &self.neighborhoods[agent]
    }

    pub fn trace(&self) -> &EpisodeTrace {
        &self.trace
    }

    /// Keeps per-bus voltages in the trace (on by default).
    pub fn set_record_voltages(&mut self, on: bool) {
        self.record_voltages = on;
    }

    pub fn charger_limits(&self) -> (f64, f64) {
        let c = &self.template.first().and_then(|s| s.chargers.first());
        c.map(|c| (c.p_dis_max_kw, c.p_ch_max_kw)).unwrap_or((0.0, 0.0))
    }

    /// Starts a new episode. `seed` drives the per-episode jitter only.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step_min = self.dt_hours * 60.0;
        let horizon_min = self.horizon as f64 * step_min;
        let j = self.jitter;

        self.arrivals = vec![Vec::new(); self.horizon];
        for (id, rec) in self.records.iter().enumerate() {
            let mut rec = rec.clone();
            if !j.is_none() {
                let a = j.arrival_steps as i64;
                let shift = rng.random_range(-a..=a) as f64 * step_min;
                let e = if j.energy_frac > 0.0 { rng.random_range(-j.energy_frac..=j.energy_frac) } else { 0.0 };
                let duration = rec.departure_min - rec.arrival_min;
                rec.arrival_min = (rec.arrival_min + shift).clamp(0.0, horizon_min - step_min);
                rec.departure_min = (rec.arrival_min + duration).min(horizon_min);
                rec.energy_kwh = (rec.energy_kwh * (1.0 + e)).clamp(0.0, rec.capacity_kwh);
            }
            let session = rec.to_session(id, self.dt_hours, self.horizon)?;
            self.arrivals[session.arrival_step].push(session);
        }
        for slot in &mut self.arrivals {
            slot.sort_by_key(|s| (s.evcs, s.id));
        }

        let pv_scale: Vec<f64> = (0..self.num_agents())
            .map(|_| if j.pv_frac > 0.0 { 1.0 + rng.random_range(-j.pv_frac..=j.pv_frac) } else { 1.0 })
            .collect();
        self.pv = self
            .pv_base
            .iter()
            .map(|row| row.iter().zip(&pv_scale).map(|(p, s)| p * s).collect())
            .collect();

        self.stations = self.template.clone();
        self.t = 0;
        self.done = false;
        self.trace = EpisodeTrace::default();

        let station_kw: Vec<f64> = self.pv[0].iter().map(|p| -p).collect();
        let pf = self.solve(0, &station_kw)?;
        self.adopt(&pf);
        self.admit(0);
        Ok(self.observations())
    }

    /// Applies one joint action (kW per charger, positive = charging).
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        if actions.len() != self.num_agents() {
            return Err(EnvError::AgentCount { got: actions.len(), expected: self.num_agents() });
        }
        for (k, a) in actions.iter().enumerate() {
            if a.len() != self.chargers(k) {
                return Err(EnvError::ActionDims { agent: k, got: a.len(), expected: self.chargers(k) });
            }
        }
        let t = self.t;
        let next = t + 1;
        let price = self.prices.at(t);
        let k_count = self.num_agents();

        let mut outcomes = Vec::with_capacity(k_count);
        let mut p_trade = Vec::with_capacity(k_count);
        let mut f_td = Vec::with_capacity(k_count);
        let mut f_dg = Vec::with_capacity(k_count);
        let mut f_ds = Vec::with_capacity(k_count);
        let (mut charged, mut discharged) = (0.0, 0.0);
        for (k, station) in self.stations.iter_mut().enumerate() {
            station.pv_kw = self.pv[t][k];
            let out = station
                .chargers
                .iter_mut()
                .zip(&actions[k])
                .map(|(c, &a)| apply_charger_action(c, a, self.dt_hours))
                .collect::<Result<Vec<_>, _>>()?;
            for o in &out {
                if o.delta_soc_kwh >= 0.0 {
                    charged += o.delta_soc_kwh;
                } else {
                    discharged -= o.delta_soc_kwh;
                }
            }
            let p = trading_power(&out, station.pv_kw);
            f_td.push(trading_cost(p, price, self.dt_hours));
            f_dg.push(degradation_cost(&out, self.weights.alpha_e));
            f_ds.push(dissatisfaction_cost(station, next));
            p_trade.push(p);
            outcomes.push(out);
        }

        let mut departures = 0;
        for (k, station) in self.stations.iter_mut().enumerate() {
            let left = if next >= self.horizon { depart_all(station) } else { process_departures(station, next).0 };
            departures += left.len();
            for d in left {
                self.trace.departures.push(DepartureRecord {
                    evcs: k,
                    session: d.session.id,
                    step: next,
                    unmet_kwh: d.unmet_kwh,
                    served: d.charger.is_some() || d.session.charged_kwh > 0.0,
                });
            }
        }

        let pf = self.solve(t, &p_trade)?;
        let f_vt = if pf.converged {
            voltage_violation(&pf.voltages, self.weights.v_min, self.weights.v_max)
        } else {
            log::warn!("power flow did not converge at step {t} (mismatch {:.3e})", pf.max_mismatch);
            self.weights.nonconvergence_penalty
        };
        let breakdown = step_signals(BreakdownInputs { f_td, f_dg, f_ds, f_vt }, &self.weights);
        let (reward, cost) = (breakdown.reward, breakdown.safety_cost);
        if pf.converged {
            self.adopt(&pf);
        }

        self.t = next;
        self.done = next >= self.horizon;
        if !self.done {
            self.admit(next);
        }
        self.trace.steps.push(StepRecord {
            reward,
            cost,
            breakdown: breakdown.clone(),
            p_trade_kw: p_trade.clone(),
            voltages: if self.record_voltages { pf.voltages.clone() } else { Vec::new() },
            converged: pf.converged,
            charged_kwh: charged,
            discharged_kwh: discharged,
        });
        Ok(StepOutcome {
            observations: self.observations(),
            reward,
            cost,
            done: self.done,
            info: StepInfo { breakdown, outcomes, p_trade_kw: p_trade, voltages: pf.voltages, converged: pf.converged, departures },
        })
    }

    /// Power flow for step `t` with station `k` drawing `station_kw[k]` from its bus.
    fn solve(&mut self, t: usize, station_kw: &[f64]) -> Result<PowerFlowResult, EnvError> {
        let mut inj = self.network.base_injections(self.load_mult[t]);
        for (&host, &p) in self.hosts.iter().zip(station_kw) {
            inj[host].p -= self.network.kw_to_pu(p);
        }
        let pf = solve_power_flow(&self.network, &inj, &self.pf_opts)?;
        for (dst, i) in self.injections_kw.iter_mut().zip(&inj) {
            *dst = self.network.pu_to_kw(i.p);
        }
        Ok(pf)
    }

    fn adopt(&mut self, pf: &PowerFlowResult) {
        self.voltages.clone_from(&pf.voltages);
    }

    fn admit(&mut self, t: usize) {
        let arrivals = std::mem::take(&mut self.arrivals[t]);
        let mut per_station: Vec<Vec<EvSession>> = vec![Vec::new(); self.num_agents()];
        for s in arrivals {
            per_station[s.evcs].push(s);
        }
        for (station, batch) in self.stations.iter_mut().zip(per_station) {
            if !batch.is_empty() || !station.waiting_queue.is_empty() {
                assign_arrivals(station, batch, t);
            }
        }
    }

    /// Observations at the current clock.
    pub fn observations(&self) -> Vec<Observation> {
        let t_obs = self.t.min(self.horizon - 1);
        let pv = &self.pv[t_obs];
        let price = self.prices.at(t_obs);
        (0..self.num_agents())
            .map(|k| {
                build_observation(
                    k,
                    &ObsInputs {
                        layout: self.layout,
                        norm: &self.norm,
                        neighborhood: &self.neighborhoods[k],
                        injections_kw: &self.injections_kw,
                        voltages: &self.voltages,
                        pv_kw: pv[k],
                        price,
                        station: &self.stations[k],
                        t: self.t,
                        dt_hours: self.dt_hours,
                    },
                )
            })
            .collect()
    }
}
