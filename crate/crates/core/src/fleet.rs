//! Charging-station state: EV sessions, chargers, and the FIFO waiting queue.
//!
//! Energies are in kWh, powers in kW, time in episode steps. A signed charger
//! action is positive for charging and negative for discharging; the battery
//! sees `eta_ch * p * dt` when charging and `p * dt / eta_dis` when
//! discharging.

use crate::grid::BusId;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FleetError {
    #[error("session {id}: {reason}")]
    InvalidSession { id: usize, reason: String },
    #[error("step {t} outside session window [{arrival}, {departure}]")]
    OutsideWindow { t: usize, arrival: usize, departure: usize },
    #[error("invalid charger parameters: {0}")]
    InvalidCharger(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
}

/// One EV's visit to a station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub id: usize,
    pub evcs: usize,
    pub arrival_step: usize,
    pub departure_step: usize,
    pub soc_arrival_kwh: f64,
    pub soc_target_departure_kwh: f64,
    pub capacity_kwh: f64,
    pub soc_min_kwh: f64,
    pub soc_max_kwh: f64,
    pub soc_kwh: f64,
    /// Battery-side energy gained while charging, kWh.
    pub charged_kwh: f64,
    /// Battery-side energy released while discharging, kWh.
    pub discharged_kwh: f64,
}

impl EvSession {
    /// Creates a session with `SoC_min = 0` and `SoC_max = capacity`.
    pub fn new(
        id: usize,
        evcs: usize,
        arrival_step: usize,
        departure_step: usize,
        soc_arrival_kwh: f64,
        soc_target_departure_kwh: f64,
        capacity_kwh: f64,
    ) -> Result<Self, FleetError> {
        Self::with_bounds(
            id,
            evcs,
            arrival_step,
            departure_step,
            soc_arrival_kwh,
            soc_target_departure_kwh,
            capacity_kwh,
            0.0,
            capacity_kwh,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_bounds(
        id: usize,
        evcs: usize,
        arrival_step: usize,
        departure_step: usize,
        soc_arrival_kwh: f64,
        soc_target_departure_kwh: f64,
        capacity_kwh: f64,
        soc_min_kwh: f64,
        soc_max_kwh: f64,
    ) -> Result<Self, FleetError> {
        let bad = |reason: String| FleetError::InvalidSession { id, reason };
        if arrival_step >= departure_step {
            return Err(bad(format!(
                "arrival step {arrival_step} must precede departure step {departure_step}"
            )));
        }
        let ordered = 0.0 <= soc_arrival_kwh
            && soc_arrival_kwh <= soc_target_departure_kwh
            && soc_target_departure_kwh <= capacity_kwh;
        if !ordered {
            return Err(bad(format!(
                "need 0 <= arrival SoC ({soc_arrival_kwh}) <= target ({soc_target_departure_kwh}) <= capacity ({capacity_kwh})"
            )));
        }
        if !(0.0 <= soc_min_kwh && soc_min_kwh <= soc_arrival_kwh && soc_max_kwh <= capacity_kwh)
            || soc_max_kwh < soc_target_departure_kwh
        {
            return Err(bad(format!(
                "SoC bounds [{soc_min_kwh}, {soc_max_kwh}] incompatible with the session"
            )));
        }
        Ok(Self {
            id,
            evcs,
            arrival_step,
            departure_step,
            soc_arrival_kwh,
            soc_target_departure_kwh,
            capacity_kwh,
            soc_min_kwh,
            soc_max_kwh,
            soc_kwh: soc_arrival_kwh,
            charged_kwh: 0.0,
            discharged_kwh: 0.0,
        })
    }

    /// Energy requested between arrival and departure, kWh.
    pub fn demand_kwh(&self) -> f64 {
        self.soc_target_departure_kwh - self.soc_arrival_kwh
    }

    /// Shortfall against the departure target, kWh.
    pub fn unmet_kwh(&self) -> f64 {
        (self.soc_target_departure_kwh - self.soc_kwh).max(0.0)
    }
}

/// Expected SoC at step `t`, linear between arrival and departure targets.
pub fn target_soc(session: &EvSession, t: usize) -> Result<f64, FleetError> {
    let (a, d) = (session.arrival_step, session.departure_step);
    if t < a || t > d {
        return Err(FleetError::OutsideWindow { t, arrival: a, departure: d });
    }
    if t == a {
        return Ok(session.soc_arrival_kwh);
    }
    if t == d {
        return Ok(session.soc_target_departure_kwh);
    }
    let frac = (t - a) as f64 / (d - a) as f64;
    Ok(session.soc_arrival_kwh + frac * session.demand_kwh())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargerState {
    pub p_ch_max_kw: f64,
    pub p_dis_max_kw: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    pub occupant: Option<EvSession>,
}

impl ChargerState {
    pub fn new(p_ch_max_kw: f64, p_dis_max_kw: f64, eta_ch: f64, eta_dis: f64) -> Result<Self, FleetError> {
        if !(p_ch_max_kw > 0.0 && p_dis_max_kw > 0.0) {
            return Err(FleetError::InvalidCharger(format!(
                "rate limits must be positive (ch {p_ch_max_kw}, dis {p_dis_max_kw})"
            )));
        }
        if !(eta_ch > 0.0 && eta_ch <= 1.0 && eta_dis > 0.0 && eta_dis <= 1.0) {
            return Err(FleetError::InvalidCharger(format!(
                "efficiencies must lie in (0, 1] (ch {eta_ch}, dis {eta_dis})"
            )));
        }
        Ok(Self { p_ch_max_kw, p_dis_max_kw, eta_ch, eta_dis, occupant: None })
    }

    pub fn is_free(&self) -> bool {
        self.occupant.is_none()
    }

    /// Largest charging power the occupant can absorb over `dt_hours`.
    fn charge_headroom_kw(&self, ev: &EvSession, dt_hours: f64) -> f64 {
        let room = (ev.soc_max_kwh - ev.soc_kwh).max(0.0);
        (room / (self.eta_ch * dt_hours)).min(self.p_ch_max_kw)
    }

    fn discharge_headroom_kw(&self, ev: &EvSession, dt_hours: f64) -> f64 {
        let room = (ev.soc_kwh - ev.soc_min_kwh).max(0.0);
        (room * self.eta_dis / dt_hours).min(self.p_dis_max_kw)
    }
}

/// Result of applying one signed power request to a charger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargerOutcome {
    pub requested_kw: f64,
    pub applied_kw: f64,
    pub delta_soc_kwh: f64,
    /// False when the charger was empty and the request was dropped.
    pub occupied: bool,
}

impl ChargerOutcome {
    pub fn clipped_kw(&self) -> f64 {
        self.requested_kw - self.applied_kw
    }

    pub fn was_clipped(&self) -> bool {
        self.occupied && self.clipped_kw() != 0.0
    }

    pub fn charge_kw(&self) -> f64 {
        self.applied_kw.max(0.0)
    }

    pub fn discharge_kw(&self) -> f64 {
        (-self.applied_kw).max(0.0)
    }
}

/// Projects `power_kw` onto the charger's feasible set and applies it.
///
/// The feasible set is the rate box `[-p_dis_max, p_ch_max]` intersected with
/// the powers that keep the occupant's SoC inside `[soc_min, soc_max]` over
/// `dt_hours`. A scalar signed action can never charge and discharge at once.
pub fn apply_charger_action(
    charger: &mut ChargerState,
    power_kw: f64,
    dt_hours: f64,
) -> Result<ChargerOutcome, FleetError> {
    if !(dt_hours > 0.0 && dt_hours.is_finite()) {
        return Err(FleetError::InvalidAction(format!("dt_hours must be positive, got {dt_hours}")));
    }
    if !power_kw.is_finite() {
        return Err(FleetError::InvalidAction(format!("non-finite power request {power_kw}")));
    }
    let (ch_room, dis_room) = match &charger.occupant {
        None => {
            return Ok(ChargerOutcome {
                requested_kw: power_kw,
                applied_kw: 0.0,
                delta_soc_kwh: 0.0,
                occupied: false,
            })
        }
        Some(ev) => (charger.charge_headroom_kw(ev, dt_hours), charger.discharge_headroom_kw(ev, dt_hours)),
    };
    let (eta_ch, eta_dis) = (charger.eta_ch, charger.eta_dis);
    let ev = charger.occupant.as_mut().expect("checked above");

    let applied = power_kw.clamp(-dis_room, ch_room);
    let raw_delta = if applied >= 0.0 {
        eta_ch * applied * dt_hours
    } else {
        applied * dt_hours / eta_dis
    };
    let before = ev.soc_kwh;
    ev.soc_kwh = (before + raw_delta).clamp(ev.soc_min_kwh, ev.soc_max_kwh);
    let delta = ev.soc_kwh - before;
    if delta >= 0.0 {
        ev.charged_kwh += delta;
    } else {
        ev.discharged_kwh -= delta;
    }
    Ok(ChargerOutcome { requested_kw: power_kw, applied_kw: applied, delta_soc_kwh: delta, occupied: true })
}

/// One charging station: its chargers, waiting queue, and current PV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvcsState {
    pub bus: BusId,
    pub chargers: Vec<ChargerState>,
    pub waiting_queue: VecDeque<EvSession>,
    pub pv_kw: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentReport {
    /// `(session id, charger index)` in assignment order.
    pub assigned: Vec<(usize, usize)>,
    pub queue_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Departure {
    pub session: EvSession,
    pub unmet_kwh: f64,
    /// Charger the session occupied, or `None` if it left from the queue.
    pub charger: Option<usize>,
}

impl EvcsState {
    pub fn new(bus: BusId, chargers: Vec<ChargerState>) -> Self {
        Self { bus, chargers, waiting_queue: VecDeque::new(), pv_kw: 0.0 }
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, &EvSession)> {
        self.chargers
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.occupant.as_ref().map(|ev| (i, ev)))
    }

    pub fn free_chargers(&self) -> usize {
        self.chargers.iter().filter(|c| c.is_free()).count()
    }

    /// Moves the queue head into free chargers, lowest charger index first.
    fn fill_from_queue(&mut self, report: &mut AssignmentReport) {
        for (idx, charger) in self.chargers.iter_mut().enumerate() {
            if !charger.is_free() {
                continue;
            }
            match self.waiting_queue.pop_front() {
                Some(ev) => {
                    report.assigned.push((ev.id, idx));
                    charger.occupant = Some(ev);
                }
                None => break,
            }
        }
        report.queue_len = self.waiting_queue.len();
    }

    /// Resets every charger and the queue.
    pub fn clear(&mut self) {
        for c in &mut self.chargers {
            c.occupant = None;
        }
        self.waiting_queue.clear();
        self.pv_kw = 0.0;
    }
}

/// Queues `arrivals` (already in arrival order) and fills free chargers FIFO.
pub fn assign_arrivals(evcs: &mut EvcsState, arrivals: Vec<EvSession>, _t: usize) -> AssignmentReport {
    evcs.waiting_queue.extend(arrivals);
    let mut report = AssignmentReport::default();
    evcs.fill_from_queue(&mut report);
    report
}

/// Removes sessions whose departure step has been reached.
///
/// Sessions still waiting in the queue at their departure step leave with
/// their whole demand unmet. Freed chargers immediately take the queue head;
/// those assignments are returned alongside the departures.
pub fn process_departures(evcs: &mut EvcsState, t: usize) -> (Vec<Departure>, AssignmentReport) {
    let mut out = Vec::new();
    for (idx, charger) in evcs.chargers.iter_mut().enumerate() {
        if charger.occupant.as_ref().is_some_and(|ev| ev.departure_step <= t) {
            let session = charger.occupant.take().expect("checked");
            out.push(Departure { unmet_kwh: session.unmet_kwh(), session, charger: Some(idx) });
        }
    }
    let mut kept = VecDeque::with_capacity(evcs.waiting_queue.len());
    for ev in evcs.waiting_queue.drain(..) {
        if ev.departure_step <= t {
            out.push(Departure { unmet_kwh: ev.unmet_kwh(), session: ev, charger: None });
        } else {
            kept.push_back(ev);
        }
    }
    evcs.waiting_queue = kept;
    let mut report = AssignmentReport::default();
    evcs.fill_from_queue(&mut report);
    (out, report)
}

/// Removes every remaining session as if departing now (episode end).
pub fn depart_all(evcs: &mut EvcsState) -> Vec<Departure> {
    let mut out = Vec::new();
    for (idx, charger) in evcs.chargers.iter_mut().enumerate() {
        if let Some(session) = charger.occupant.take() {
            out.push(Departure { unmet_kwh: session.unmet_kwh(), session, charger: Some(idx) });
        }
    }
    for session in evcs.waiting_queue.drain(..) {
        out.push(Departure { unmet_kwh: session.unmet_kwh(), session, charger: None });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn session(id: usize, arrival: usize, departure: usize, soc: f64, target: f64) -> EvSession {
        EvSession::new(id, 0, arrival, departure, soc, target, 80.0).unwrap()
    }

    fn charger() -> ChargerState {
        ChargerState::new(22.0, 22.0, 0.95, 0.95).unwrap()
    }

    fn station(n: usize) -> EvcsState {
        EvcsState::new(BusId(2), (0..n).map(|_| charger()).collect())
    }

    #[test]
    fn target_trajectory_endpoints_and_midpoint() {
        let s = session(0, 0, 100, 16.0, 64.0);
        assert_eq!(target_soc(&s, 0).unwrap(), 16.0);
        assert_eq!(target_soc(&s, 50).unwrap(), 40.0);
        assert_eq!(target_soc(&s, 100).unwrap(), 64.0);
        assert!(matches!(target_soc(&s, 101), Err(FleetError::OutsideWindow { .. })));
    }

    #[test]
    fn session_invariants_are_enforced() {
        assert!(EvSession::new(0, 0, 5, 5, 0.0, 1.0, 80.0).is_err());
        assert!(EvSession::new(0, 0, 0, 5, 30.0, 20.0, 80.0).is_err());
        assert!(EvSession::new(0, 0, 0, 5, 30.0, 90.0, 80.0).is_err());
    }

    #[test]
    fn charger_parameters_are_checked() {
        assert!(ChargerState::new(0.0, 22.0, 0.95, 0.95).is_err());
        assert!(ChargerState::new(22.0, 22.0, 1.2, 0.95).is_err());
    }

    #[test]
    fn charging_at_full_rate() {
        let mut c = charger();
        c.occupant = Some(session(0, 0, 100, 40.0, 64.0));
        let out = apply_charger_action(&mut c, 22.0, 1.0 / 12.0).unwrap();
        assert_eq!(out.applied_kw, 22.0);
        assert_abs_diff_eq!(out.delta_soc_kwh, 0.95 * 22.0 / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.delta_soc_kwh, 1.7417, epsilon = 1e-4);
    }

    #[test]
    fn discharging_at_full_rate() {
        let mut c = charger();
        c.occupant = Some(session(0, 0, 100, 40.0, 64.0));
        let out = apply_charger_action(&mut c, -22.0, 1.0 / 12.0).unwrap();
        assert_eq!(out.applied_kw, -22.0);
        assert_abs_diff_eq!(out.delta_soc_kwh, -(22.0 / 0.95) / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.delta_soc_kwh, -1.9298, epsilon = 1e-4);
    }

    #[test]
    fn full_battery_accepts_no_charge() {
        let mut c = charger();
        let mut s = session(0, 0, 100, 40.0, 64.0);
        s.soc_kwh = 80.0;
        c.occupant = Some(s);
        let out = apply_charger_action(&mut c, 22.0, 1.0 / 12.0).unwrap();
        assert_eq!(out.applied_kw, 0.0);
        assert_eq!(out.delta_soc_kwh, 0.0);
        assert!(out.was_clipped());
    }

    #[test]
    fn rate_limit_clips_request() {
        let mut c = charger();
        c.occupant = Some(session(0, 0, 100, 40.0, 64.0));
        let out = apply_charger_action(&mut c, 35.0, 1.0 / 12.0).unwrap();
        assert_eq!(out.applied_kw, 22.0);
        assert_eq!(out.clipped_kw(), 13.0);
    }

    #[test]
    fn empty_charger_drops_request() {
        let mut c = charger();
        let out = apply_charger_action(&mut c, 10.0, 1.0 / 12.0).unwrap();
        assert!(!out.occupied);
        assert_eq!(out.applied_kw, 0.0);
        assert!(apply_charger_action(&mut c, f64::NAN, 1.0 / 12.0).is_err());
        assert!(apply_charger_action(&mut c, 1.0, 0.0).is_err());
    }

    #[test]
    fn fifo_one_free_two_arrivals() {
        let mut st = station(1);
        let r = assign_arrivals(&mut st, vec![session(1, 0, 10, 0.0, 5.0), session(2, 0, 10, 0.0, 5.0)], 0);
        assert_eq!(r.assigned, vec![(1, 0)]);
        assert_eq!(r.queue_len, 1);
        assert_eq!(st.waiting_queue[0].id, 2);
    }

    #[test]
    fn no_free_charger_grows_queue() {
        let mut st = station(1);
        assign_arrivals(&mut st, vec![session(1, 0, 10, 0.0, 5.0)], 0);
        let r = assign_arrivals(&mut st, vec![session(2, 1, 10, 0.0, 5.0)], 1);
        assert!(r.assigned.is_empty());
        assert_eq!(r.queue_len, 1);
    }

    #[test]
    fn lowest_index_chargers_fill_first() {
        let mut st = station(3);
        let r = assign_arrivals(&mut st, vec![session(7, 0, 10, 0.0, 5.0), session(8, 0, 10, 0.0, 5.0)], 0);
        assert_eq!(r.assigned, vec![(7, 0), (8, 1)]);
        assert!(st.chargers[2].is_free());
    }

    #[test]
    fn departures_report_unmet_and_pull_queue() {
        let mut st = station(2);
        let mut a = session(1, 0, 5, 10.0, 64.0);
        a.soc_kwh = 64.0;
        let mut b = session(2, 0, 5, 10.0, 64.0);
        b.soc_kwh = 50.0;
        assign_arrivals(&mut st, vec![a, b, session(3, 0, 20, 0.0, 5.0)], 0);
        let (deps, pulled) = process_departures(&mut st, 5);
        assert_eq!(deps.len(), 2);
        assert_eq!(deps[0].unmet_kwh, 0.0);
        assert_eq!(deps[1].unmet_kwh, 14.0);
        assert_eq!(pulled.assigned, vec![(3, 0)]);
        assert!(st.waiting_queue.is_empty());
    }

    #[test]
    fn queued_session_can_time_out() {
        let mut st = station(1);
        assign_arrivals(&mut st, vec![session(1, 0, 50, 0.0, 5.0), session(2, 0, 3, 2.0, 6.0)], 0);
        let (deps, _) = process_departures(&mut st, 3);
        assert_eq!(deps.len(), 1);
        assert_eq!(deps[0].charger, None);
        assert_eq!(deps[0].unmet_kwh, 4.0);
    }
}
