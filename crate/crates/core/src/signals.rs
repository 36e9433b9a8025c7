//! Economic and safety signals.
//!
//! Per step and per station the trading cost `f_td`, degradation cost `f_dg`
//! and dissatisfaction `f_ds` are computed, plus the network-wide voltage
//! violation `f_vt`. They combine into two scalars:
//!
//! * `reward = -(beta1 * sum f_td + beta2 * sum f_dg)`
//! * `safety_cost = beta3 * sum f_ds + beta4 * f_vt`
//!
//! The reward carries a minus sign so that maximizing it minimizes the
//! economic cost; `-reward + safety_cost` is the per-step term of the overall
//! objective.

use crate::fleet::{target_soc, ChargerOutcome, EvcsState};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SignalError {
    #[error("price tables have different lengths ({buy} buy, {sell} sell)")]
    LengthMismatch { buy: usize, sell: usize },
    #[error("step {step}: sell price {sell} exceeds buy price {buy}")]
    Arbitrage { step: usize, buy: f64, sell: f64 },
    #[error("step {step}: non-finite price")]
    NonFinite { step: usize },
    #[error("negative weight {0}")]
    NegativeWeight(&'static str),
}

/// Buy and sell prices per step, $/kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSignal {
    pub buy: Vec<f64>,
    pub sell: Vec<f64>,
}

impl PriceSignal {
    /// Validates the table. `allow_arbitrage` skips the `sell <= buy` check.
    pub fn new(buy: Vec<f64>, sell: Vec<f64>, allow_arbitrage: bool) -> Result<Self, SignalError> {
        if buy.len() != sell.len() {
            return Err(SignalError::LengthMismatch { buy: buy.len(), sell: sell.len() });
        }
        for (step, (&b, &s)) in buy.iter().zip(&sell).enumerate() {
            if !(b.is_finite() && s.is_finite()) {
                return Err(SignalError::NonFinite { step });
            }
            if !allow_arbitrage && s > b {
                return Err(SignalError::Arbitrage { step, buy: b, sell: s });
            }
        }
        Ok(Self { buy, sell })
    }

    pub fn len(&self) -> usize {
        self.buy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buy.is_empty()
    }

    pub fn at(&self, t: usize) -> StepPrice {
        StepPrice { buy: self.buy[t], sell: self.sell[t] }
    }

    pub fn max_buy(&self) -> f64 {
        self.buy.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPrice {
    pub buy: f64,
    pub sell: f64,
}

/// Objective weights.
///
/// None of these are fixed by the underlying model; the defaults make a day of
/// voltage violations and dissatisfaction comparable in size to a day of
/// trading cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    /// Degradation coefficient, $/kW^2.
    pub alpha_e: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// `f_vt` charged for a step whose power flow did not converge, p.u.
    pub nonconvergence_penalty: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            beta4: 100.0,
            alpha_e: 1e-4,
            v_min: 0.95,
            v_max: 1.05,
            nonconvergence_penalty: 1.0,
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<(), SignalError> {
        let fields = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("beta4", self.beta4),
            ("alpha_e", self.alpha_e),
            ("nonconvergence_penalty", self.nonconvergence_penalty),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                return Err(SignalError::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

/// Net power exchanged with the grid, kW. Positive means importing.
pub fn trading_power(applied: &[ChargerOutcome], pv_kw: f64) -> f64 {
    applied.iter().map(|o| o.charge_kw() - o.discharge_kw()).sum::<f64>() - pv_kw
}

/// Trading cost in $: imports at the buy price, exports (negative) at the sell price.
pub fn trading_cost(p_td_kw: f64, price: StepPrice, dt_hours: f64) -> f64 {
    let rate = if p_td_kw > 0.0 { price.buy } else { price.sell };
    rate * p_td_kw * dt_hours
}

/// Quadratic battery degradation cost in $.
pub fn degradation_cost(applied: &[ChargerOutcome], alpha_e: f64) -> f64 {
    alpha_e
        * applied
            .iter()
            .map(|o| o.charge_kw().powi(2) + o.discharge_kw().powi(2))
            .sum::<f64>()
}

/// Total out-of-band voltage deviation over all buses, p.u.
pub fn voltage_violation(voltages: &[f64], v_min: f64, v_max: f64) -> f64 {
    voltages
        .iter()
        .map(|&v| (v - v_max).max(0.0) + (v_min - v).max(0.0))
        .sum()
}

/// Sum over occupied chargers of the shortfall against the target trajectory, kWh.
///
/// Sessions whose window does not contain `t` contribute nothing.
pub fn dissatisfaction_cost(evcs: &EvcsState, t: usize) -> f64 {
    evcs.occupied()
        .filter_map(|(_, ev)| target_soc(ev, t).ok().map(|target| (target - ev.soc_kwh).max(0.0)))
        .sum()
}

/// Component values for one step, before weighting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BreakdownInputs {
    pub f_td: Vec<f64>,
    pub f_dg: Vec<f64>,
    pub f_ds: Vec<f64>,
    pub f_vt: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub f_td: Vec<f64>,
    pub f_dg: Vec<f64>,
    pub f_ds: Vec<f64>,
    pub f_vt: f64,
    pub reward: f64,
    pub safety_cost: f64,
}

impl CostBreakdown {
    /// Per-step contribution to the overall objective.
    pub fn objective(&self) -> f64 {
        -self.reward + self.safety_cost
    }
}

/// Weights the components into the reward and safety-cost scalars.
pub fn step_signals(inputs: BreakdownInputs, weights: &Weights) -> CostBreakdown {
    let td: f64 = inputs.f_td.iter().sum();
    let dg: f64 = inputs.f_dg.iter().sum();
    let ds: f64 = inputs.f_ds.iter().sum();
    let reward = -(weights.beta1 * td + weights.beta2 * dg);
    let safety_cost = weights.beta3 * ds + weights.beta4 * inputs.f_vt;
    CostBreakdown {
        f_td: inputs.f_td,
        f_dg: inputs.f_dg,
        f_ds: inputs.f_ds,
        f_vt: inputs.f_vt,
        reward,
        safety_cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{ChargerState, EvSession};
    use crate::grid::BusId;
    use approx::assert_abs_diff_eq;

    fn out(kw: f64) -> ChargerOutcome {
        ChargerOutcome { requested_kw: kw, applied_kw: kw, delta_soc_kwh: 0.0, occupied: true }
    }

    #[test]
    fn trading_power_examples() {
        assert_eq!(trading_power(&[out(20.0), out(10.0)], 10.0), 20.0);
        assert_eq!(trading_power(&[out(0.0)], 10.0), -10.0);
        assert_eq!(trading_power(&[out(-5.0)], 5.0), -10.0);
    }

    #[test]
    fn trading_cost_examples() {
        let price = StepPrice { buy: 0.30, sell: 0.10 };
        assert_abs_diff_eq!(trading_cost(12.0, price, 1.0 / 12.0), 0.30, epsilon = 1e-15);
        assert_eq!(trading_cost(0.0, price, 1.0 / 12.0), 0.0);
        assert_abs_diff_eq!(trading_cost(-12.0, price, 1.0 / 12.0), -0.10, epsilon = 1e-15);
    }

    #[test]
    fn degradation_examples() {
        assert_eq!(degradation_cost(&[out(0.0), out(0.0)], 1e-4), 0.0);
        assert_abs_diff_eq!(degradation_cost(&[out(22.0)], 1e-4), 0.0484, epsilon = 1e-15);
        assert_eq!(degradation_cost(&[out(7.5)], 1e-4), degradation_cost(&[out(-7.5)], 1e-4));
    }

    #[test]
    fn voltage_violation_examples() {
        assert_eq!(voltage_violation(&[0.95, 1.0, 1.05], 0.95, 1.05), 0.0);
        assert_abs_diff_eq!(voltage_violation(&[0.94, 1.0], 0.95, 1.05), 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(voltage_violation(&[0.94, 1.06], 0.95, 1.05), 0.02, epsilon = 1e-12);
    }

    fn station_with(socs: &[(f64, f64)]) -> EvcsState {
        // Sessions over [0, 10] with arrival SoC 0 and target 10 * slope, so the
        // trajectory at t = 5 is half the target.
        let chargers = socs
            .iter()
            .enumerate()
            .map(|(i, &(target, soc))| {
                let mut c = ChargerState::new(22.0, 22.0, 0.95, 0.95).unwrap();
                let mut ev = EvSession::new(i, 0, 0, 10, 0.0, target, 80.0).unwrap();
                ev.soc_kwh = soc;
                c.occupant = Some(ev);
                c
            })
            .collect();
        EvcsState::new(BusId(2), chargers)
    }

    #[test]
    fn dissatisfaction_examples() {
        assert_eq!(dissatisfaction_cost(&station_with(&[(20.0, 10.0), (10.0, 6.0)]), 5), 0.0);
        assert_eq!(dissatisfaction_cost(&station_with(&[(20.0, 7.0)]), 5), 3.0);
        assert_eq!(dissatisfaction_cost(&station_with(&[(20.0, 12.0), (20.0, 5.0)]), 5), 5.0);
    }

    #[test]
    fn step_signal_examples() {
        let w = Weights::default();
        let zero = step_signals(BreakdownInputs { f_td: vec![0.0], f_dg: vec![0.0], f_ds: vec![0.0], f_vt: 0.0 }, &w);
        assert_eq!(zero.reward, 0.0);
        assert_eq!(zero.safety_cost, 0.0);

        let econ = step_signals(
            BreakdownInputs { f_td: vec![4.0, 6.0], f_dg: vec![1.5, 0.5], f_ds: vec![0.0; 2], f_vt: 0.0 },
            &w,
        );
        assert_eq!(econ.reward, -12.0);

        let safety = step_signals(
            BreakdownInputs { f_td: vec![0.0], f_dg: vec![0.0], f_ds: vec![5.0], f_vt: 0.02 },
            &w,
        );
        assert_abs_diff_eq!(safety.safety_cost, 7.0, epsilon = 1e-12);
    }

    #[test]
    fn arbitrage_is_rejected_unless_overridden() {
        assert!(matches!(
            PriceSignal::new(vec![0.1], vec![0.2], false),
            Err(SignalError::Arbitrage { step: 0, .. })
        ));
        assert!(PriceSignal::new(vec![0.1], vec![0.2], true).is_ok());
        assert!(PriceSignal::new(vec![0.1], vec![], false).is_err());
    }
}
