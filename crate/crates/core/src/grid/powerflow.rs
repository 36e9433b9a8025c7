use super::{GridError, Network};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Complex power injection at a bus, p.u. Generation positive, load negative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowOptions {
    /// Largest complex voltage update between sweeps at which the solve stops, p.u.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    /// Voltage magnitude per bus (dense index order), p.u.
    pub voltages: Vec<f64>,
    /// Voltage angle per bus, radians.
    pub angles: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest complex voltage change in the final sweep, p.u.
    pub max_mismatch: f64,
}

/// Backward-forward sweep (current summation) for a radial network.
///
/// Each iteration computes the current drawn at every bus from the latest
/// voltages, sums currents from the leaves towards the slack bus, then walks
/// back down the tree applying the line voltage drops. Convergence is declared
/// when no bus voltage moves by more than `opts.tolerance` in one sweep.
///
/// Injections are given for every bus; the slack entry is ignored. Failing to
/// converge is reported through [`PowerFlowResult::converged`], never as an
/// error.
pub fn solve_power_flow(
    network: &Network,
    injections: &[Injection],
    opts: &PowerFlowOptions,
) -> Result<PowerFlowResult, GridError> {
    let n = network.len();
    if injections.len() != n {
        return Err(GridError::InjectionLength { got: injections.len(), expected: n });
    }
    let slack = network.slack();
    let v0 = Complex64::new(network.v_slack, 0.0);
    let mut v = vec![v0; n];
    let mut next = vec![v0; n];
    let mut current = vec![Complex64::new(0.0, 0.0); n];
    let lines = network.lines();
    let z: Vec<Complex64> = lines.iter().map(|l| Complex64::new(l.r_pu, l.x_pu)).collect();

    let mut converged = false;
    let mut iterations = 0;
    let mut max_mismatch = f64::INFINITY;

    while iterations < opts.max_iterations {
        iterations += 1;

        // Current drawn by each bus: I = conj(S_load / V), S_load = -S_inj.
        for (i, (c, inj)) in current.iter_mut().zip(injections).enumerate() {
            *c = if i == slack {
                Complex64::new(0.0, 0.0)
            } else {
                (Complex64::new(-inj.p, -inj.q) / v[i]).conj()
            };
        }
        // Backward: line currents accumulate from the leaves.
        for l in lines.iter().rev() {
            let child = current[l.to];
            current[l.from] += child;
        }
        // Forward: apply voltage drops from the slack bus down.
        next[slack] = v0;
        for (l, zl) in lines.iter().zip(&z) {
            next[l.to] = next[l.from] - zl * current[l.to];
        }

        max_mismatch = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);

        if !max_mismatch.is_finite() {
            break;
        }
        if max_mismatch <= opts.tolerance {
            converged = true;
            break;
        }
    }

    let mut voltages: Vec<f64> = v.iter().map(|c| c.norm()).collect();
    voltages[slack] = network.v_slack;
    let angles = v.iter().map(|c| c.arg()).collect();
    Ok(PowerFlowResult { voltages, angles, converged, iterations, max_mismatch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ieee33, two_bus, BusId};

    #[test]
    fn zero_injection_is_flat_in_one_iteration() {
        for net in [two_bus(), ieee33()] {
            let inj = vec![Injection::default(); net.len()];
            let res = solve_power_flow(&net, &inj, &PowerFlowOptions::default()).unwrap();
            assert!(res.converged);
            assert_eq!(res.iterations, 1);
            assert!(res.voltages.iter().all(|&v| v == net.v_slack));
        }
    }

    #[test]
    fn injection_length_is_checked() {
        let net = two_bus();
        let err = solve_power_flow(&net, &[Injection::default()], &PowerFlowOptions::default());
        assert!(matches!(err, Err(GridError::InjectionLength { got: 1, expected: 2 })));
    }

    #[test]
    fn heavier_load_lowers_voltage() {
        let net = two_bus();
        let bus = net.index_of(BusId(2)).unwrap();
        let mut last = f64::INFINITY;
        for step in 1..20 {
            let mut inj = vec![Injection::default(); 2];
            inj[bus] = Injection { p: -0.05 * step as f64, q: -0.025 * step as f64 };
            let res = solve_power_flow(&net, &inj, &PowerFlowOptions::default()).unwrap();
            assert!(res.converged);
            assert!(res.voltages[bus] < last);
            last = res.voltages[bus];
        }
    }

    #[test]
    fn impossible_load_reports_non_convergence() {
        let net = two_bus();
        let mut inj = vec![Injection::default(); 2];
        inj[1] = Injection { p: -50.0, q: -50.0 };
        let res = solve_power_flow(&net, &inj, &PowerFlowOptions::default()).unwrap();
        assert!(!res.converged);
        assert_eq!(res.voltages[net.slack()], net.v_slack);
    }
}
