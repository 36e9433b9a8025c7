//! Checks shared by the area tests and the acceptance target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltgrid::cli::resolve_scenario;
use voltgrid::data::{load_scenario, ScenarioBundle};
use voltgrid::diffcore::{gradcheck_where, GradCheckOptions, GradCheckReport, Tensor};
use voltgrid::encoder::WindowBatch;
use voltgrid::learner::{CriticKind, Model, ModelConfig, ModelShape};
use voltgrid::env::{metrics, EvcsEnv};
use voltgrid::fleet::{apply_charger_action, ChargerOutcome, ChargerState, EvSession, EvcsState};
use voltgrid::grid::{load_network_file, solve_power_flow, BusId, PowerFlowOptions};
use voltgrid::signals::{
    degradation_cost, dissatisfaction_cost, step_signals, trading_cost, trading_power, voltage_violation,
    BreakdownInputs, StepPrice, Weights,
};

pub fn bundled(name: &str) -> ScenarioBundle {
    load_scenario(resolve_scenario(name, None)).expect("bundled scenario loads")
}

/// SoC after a projected action, recomputed from the applied power alone.
pub fn expected_soc(before: f64, applied_kw: f64, eta_ch: f64, eta_dis: f64, dt: f64) -> f64 {
    if applied_kw >= 0.0 {
        before + eta_ch * applied_kw * dt
    } else {
        before + applied_kw * dt / eta_dis
    }
}

/// Runs one episode of random (often out-of-bounds) actions and returns the
/// largest SoC bookkeeping error in kWh. Bound violations are errors.
pub fn soc_bookkeeping_episode(env: &mut EvcsEnv, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env.reset(seed).map_err(|e| e.to_string())?;
    let dt = env.dt_hours();
    let (dis, ch) = env.charger_limits();
    let mut worst: f64 = 0.0;
    let mut ledger_delta = 0.0;
    let mut env_delta = 0.0;
    while !env.is_done() {
        // Sessions seated before the step: id -> SoC.
        let before: Vec<Vec<Option<(usize, f64)>>> = env
            .stations()
            .iter()
            .map(|s| s.chargers.iter().map(|c| c.occupant.as_ref().map(|ev| (ev.id, ev.soc_kwh))).collect())
            .collect();
        for st in env.stations() {
            for c in &st.chargers {
                if let Some(ev) = &c.occupant {
                    let internal = ev.soc_arrival_kwh + ev.charged_kwh - ev.discharged_kwh;
                    worst = worst.max((ev.soc_kwh - internal).abs());
                }
            }
        }
        let actions: Vec<Vec<f64>> = (0..env.num_agents())
            .map(|k| (0..env.chargers(k)).map(|_| rng.random_range(-1.5 * dis..=1.5 * ch)).collect())
            .collect();
        let out = env.step(&actions).map_err(|e| e.to_string())?;
        let rec = env.trace().steps.last().expect("one record per step");
        env_delta += rec.charged_kwh - rec.discharged_kwh;
        for (k, st_before) in before.iter().enumerate() {
            let station = &env.stations()[k];
            for (j, slot) in st_before.iter().enumerate() {
                let o = out.info.outcomes[k][j];
                let charger = &station.chargers[j];
                if o.applied_kw < -charger.p_dis_max_kw - 1e-12 || o.applied_kw > charger.p_ch_max_kw + 1e-12 {
                    return Err(format!("applied {} kW outside the rate box", o.applied_kw));
                }
                let Some((id, soc0)) = *slot else {
                    if o.applied_kw != 0.0 {
                        return Err("empty charger applied power".into());
                    }
                    continue;
                };
                let soc1 = expected_soc(soc0, o.applied_kw, charger.eta_ch, charger.eta_dis, dt);
                worst = worst.max((soc1 - (soc0 + o.delta_soc_kwh)).abs());
                ledger_delta += soc1 - soc0;
                if let Some(ev) = charger.occupant.as_ref().filter(|ev| ev.id == id) {
                    worst = worst.max((ev.soc_kwh - soc1).abs());
                    if ev.soc_kwh < ev.soc_min_kwh - 1e-9 || ev.soc_kwh > ev.soc_max_kwh + 1e-9 {
                        return Err(format!("session {id} SoC {} outside its bounds", ev.soc_kwh));
                    }
                }
            }
        }
    }
    worst = worst.max((ledger_delta - env_delta).abs());
    Ok(worst)
}

/// Applies `n` random requests to random sessions and checks the projected
/// result against the rate box and SoC bounds.
pub fn projection_bounds(n: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let p_ch = rng.random_range(1.0..50.0);
        let p_dis = rng.random_range(0.0..50.0);
        let eta_ch = rng.random_range(0.8..1.0);
        let eta_dis = rng.random_range(0.8..1.0);
        let dt = [1.0 / 12.0, 0.25, 1.0][rng.random_range(0..3)];
        let cap = rng.random_range(10.0..120.0);
        let soc_min = rng.random_range(0.0..0.2) * cap;
        let soc_max = rng.random_range(0.8..=1.0) * cap;
        let soc0 = rng.random_range(soc_min..=soc_max);
        let target = rng.random_range(soc0..=soc_max);
        let request = rng.random_range(-3.0 * p_dis - 10.0..3.0 * p_ch + 10.0);
        let mut charger = ChargerState::new(p_ch, p_dis, eta_ch, eta_dis).map_err(|e| e.to_string())?;
        let ev = EvSession::with_bounds(i, 0, 0, 10, soc0, target, cap, soc_min, soc_max).map_err(|e| e.to_string())?;
        charger.occupant = Some(ev);
        let o = apply_charger_action(&mut charger, request, dt).map_err(|e| e.to_string())?;
        let soc = charger.occupant.as_ref().unwrap().soc_kwh;
        let ok = o.applied_kw >= -p_dis
            && o.applied_kw <= p_ch
            && soc >= soc_min - 1e-9
            && soc <= soc_max + 1e-9
            && (soc - expected_soc(soc0, o.applied_kw, eta_ch, eta_dis, dt)).abs() <= 1e-9
            && o.applied_kw * request >= 0.0
            && o.applied_kw.abs() <= request.abs();
        if !ok {
            return Err(format!(
                "request {request} kW on [{}, {p_ch}] with SoC {soc0} in [{soc_min}, {soc_max}] gave {} kW, SoC {soc}",
                -p_dis, o.applied_kw
            ));
        }
    }
    Ok(())
}

fn close(what: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() <= 1e-12 {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want}"))
    }
}

fn outcome(kw: f64) -> ChargerOutcome {
    ChargerOutcome { requested_kw: kw, applied_kw: kw, delta_soc_kwh: 0.0, occupied: true }
}

fn station_with(sessions: &[(f64, f64)]) -> EvcsState {
    let chargers = sessions
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

/// Every worked example of the cost and reward functions; returns how many ran.
pub fn signal_examples() -> Result<usize, String> {
    let mut n = 0;
    let mut check = |what: &str, got: f64, want: f64| {
        n += 1;
        close(what, got, want)
    };
    check("trading power import", trading_power(&[outcome(20.0), outcome(10.0)], 10.0), 20.0)?;
    check("trading power export", trading_power(&[outcome(0.0)], 10.0), -10.0)?;
    check("trading power discharge", trading_power(&[outcome(-5.0)], 5.0), -10.0)?;
    let price = StepPrice { buy: 0.30, sell: 0.10 };
    check("trading cost buy", trading_cost(12.0, price, 1.0 / 12.0), 0.30)?;
    check("trading cost zero", trading_cost(0.0, price, 1.0 / 12.0), 0.0)?;
    check("trading cost sell", trading_cost(-12.0, price, 1.0 / 12.0), -0.10)?;
    check("degradation zero", degradation_cost(&[outcome(0.0), outcome(0.0)], 1e-4), 0.0)?;
    check("degradation 22 kW", degradation_cost(&[outcome(22.0)], 1e-4), 0.0484)?;
    check(
        "degradation symmetry",
        degradation_cost(&[outcome(7.5), outcome(0.0)], 1e-4),
        degradation_cost(&[outcome(0.0), outcome(-7.5)], 1e-4),
    )?;
    check("violation inside band", voltage_violation(&[0.95, 1.0, 1.05], 0.95, 1.05), 0.0)?;
    check("violation one bus", voltage_violation(&[0.94, 1.0], 0.95, 1.05), 0.01)?;
    check("violation two buses", voltage_violation(&[0.94, 1.06], 0.95, 1.05), 0.02)?;
    // Sessions over [0, 10] from SoC 0: the trajectory at t = 5 is half the target.
    check("dissatisfaction on track", dissatisfaction_cost(&station_with(&[(20.0, 10.0), (10.0, 6.0)]), 5), 0.0)?;
    check("dissatisfaction 3 below", dissatisfaction_cost(&station_with(&[(20.0, 7.0)]), 5), 3.0)?;
    check("dissatisfaction hinge", dissatisfaction_cost(&station_with(&[(20.0, 12.0), (20.0, 5.0)]), 5), 5.0)?;
    let w = Weights::default();
    let zero = step_signals(BreakdownInputs { f_td: vec![0.0], f_dg: vec![0.0], f_ds: vec![0.0], f_vt: 0.0 }, &w);
    check("zero reward", zero.reward, 0.0)?;
    check("zero cost", zero.safety_cost, 0.0)?;
    let econ =
        step_signals(BreakdownInputs { f_td: vec![4.0, 6.0], f_dg: vec![1.5, 0.5], f_ds: vec![0.0; 2], f_vt: 0.0 }, &w);
    check("economic reward", econ.reward, -12.0)?;
    let safety = step_signals(BreakdownInputs { f_td: vec![0.0], f_dg: vec![0.0], f_ds: vec![5.0], f_vt: 0.02 }, &w);
    check("safety cost", safety.safety_cost, 7.0)?;
    Ok(n)
}

/// Runs a random episode and returns the largest gap between the weighted
/// component sum and `sum(-reward + cost)`, per step and over the episode.
pub fn decomposition_episode(env: &mut EvcsEnv, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env.reset(seed).map_err(|e| e.to_string())?;
    let (dis, ch) = env.charger_limits();
    let w = *env.weights();
    let mut worst: f64 = 0.0;
    let mut total = 0.0;
    while !env.is_done() {
        let actions: Vec<Vec<f64>> =
            (0..env.num_agents()).map(|k| (0..env.chargers(k)).map(|_| rng.random_range(-dis..=ch)).collect()).collect();
        let out = env.step(&actions).map_err(|e| e.to_string())?;
        let b = &out.info.breakdown;
        if b.f_dg.iter().chain(&b.f_ds).any(|&v| v < 0.0) || b.f_vt < 0.0 {
            return Err("negative hinge or degradation component".into());
        }
        let weighted = w.beta1 * b.f_td.iter().sum::<f64>()
            + w.beta2 * b.f_dg.iter().sum::<f64>()
            + w.beta3 * b.f_ds.iter().sum::<f64>()
            + w.beta4 * b.f_vt;
        let recomputed = step_signals(
            BreakdownInputs { f_td: b.f_td.clone(), f_dg: b.f_dg.clone(), f_ds: b.f_ds.clone(), f_vt: b.f_vt },
            &w,
        );
        worst = worst.max((weighted - (-out.reward + out.cost)).abs());
        worst = worst.max((recomputed.reward - out.reward).abs()).max((recomputed.safety_cost - out.cost).abs());
        total += weighted;
    }
    let m = metrics(env.trace());
    Ok(worst.max((total - m.objective).abs() / total.abs().max(1.0)))
}

/// Per-agent observation histories from a short greedy rollout, so windows
/// carry realistic occupancy.
/// `features[k][t]` and `masks[k][t]` per agent and step.
pub type Histories = (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<bool>>>);

pub fn greedy_histories(env: &mut EvcsEnv, steps: usize) -> Histories {
    let obs = env.reset(5).unwrap();
    let mut hist: Vec<Vec<Vec<f64>>> = obs.iter().map(|o| vec![o.features.clone()]).collect();
    let mut masks: Vec<Vec<Vec<bool>>> = obs.iter().map(|o| vec![o.charger_mask.clone()]).collect();
    let (_, ch) = env.charger_limits();
    for _ in 0..steps {
        let actions: Vec<Vec<f64>> = (0..env.num_agents()).map(|k| vec![ch; env.chargers(k)]).collect();
        let out = env.step(&actions).unwrap();
        for (k, o) in out.observations.iter().enumerate() {
            hist[k].push(o.features.clone());
            masks[k].push(o.charger_mask.clone());
        }
    }
    (hist, masks)
}

/// Central finite-difference checks of the desk encoder, one actor and both
/// critics on the desk scenario. Returns `(part, report)` pairs.
pub fn gradient_suite() -> Result<Vec<(&'static str, GradCheckReport)>, String> {
    let mut env = EvcsEnv::new(&bundled("desk_33bus")).map_err(|e| e.to_string())?;
    let (hist, masks) = greedy_histories(&mut env, 30);
    let model = Model::new(ModelConfig::default(), ModelShape::of_env(&env), 3).map_err(|e| e.to_string())?;
    let times = [4usize, 17, 29];
    let batches: Vec<WindowBatch> = hist
        .iter()
        .map(|h| {
            let mut b = WindowBatch::new(model.window(), model.obs_dim);
            for &t in &times {
                b.push_history(h, t).unwrap();
            }
            b
        })
        .collect();
    let opts = GradCheckOptions { h: 1e-5, max_per_tensor: Some(12), seed: 9, floor: 1e-6 };
    let mut params = model.params.clone();
    let mut out = Vec::new();
    let err = |e: voltgrid::diffcore::DiffError| e.to_string();

    let enc = gradcheck_where(
        &mut params,
        |g| {
            let e = model.embed_agent(g, 0, &batches[0])?;
            let t = g.tanh(e);
            let s = g.square(t);
            Ok(g.mean(s))
        },
        opts,
        |n| n.starts_with("enc"),
    )
    .map_err(err)?;
    out.push(("encoder", enc));

    let k = 1;
    let c = model.chargers[k];
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let u = Tensor::from_vec(times.len(), c, (0..times.len() * c).map(|_| r.random_range(-1.5..1.5)).collect())
        .map_err(err)?;
    let mask_rows: Vec<f64> =
        times.iter().flat_map(|&t| masks[k][t].iter().map(|&m| if m { 1.0 } else { 0.0 })).collect();
    let mask = Tensor::from_vec(times.len(), c, mask_rows).map_err(err)?;
    let actor = gradcheck_where(
        &mut params,
        |g| {
            let e = model.embed_agent(g, k, &batches[k])?;
            let mean = model.actor_mean(g, k, e, &batches[k]);
            let lp = model.actor(k).log_prob(g, mean, &u, &mask);
            let ent = model.actor(k).entropy(g, &mask);
            let l = g.mean(lp);
            let h = g.mean(ent);
            let h = g.scale(h, 0.01);
            Ok(g.add(l, h))
        },
        opts,
        |n| n.starts_with("actor"),
    )
    .map_err(err)?;
    out.push(("actor", actor));

    let target = Tensor::from_vec(times.len(), 1, vec![0.7, -0.2, 1.3]).map_err(err)?;
    for (name, kind, prefix) in
        [("reward critic", CriticKind::Reward, "critic_r"), ("cost critic", CriticKind::Cost, "critic_c")]
    {
        let rep = gradcheck_where(
            &mut params,
            |g| {
                let embs = model.embed(g, &batches)?;
                let v = model.value(g, kind, &embs)?;
                let t = g.input(target.clone());
                let d = g.sub(v, t);
                let s = g.square(d);
                Ok(g.mean(s))
            },
            opts,
            |n| n.starts_with(prefix),
        )
        .map_err(err)?;
        out.push((name, rep));
    }
    Ok(out)
}

/// Largest sweep-vs-Newton voltage gap and slowest 33-bus sweep over
/// `cases` random injection vectors per fixture feeder.
pub struct PowerFlowSweep {
    pub cases: usize,
    pub max_abs_err: f64,
    pub slowest_33bus_s: f64,
}

pub fn power_flow_sweep(cases: usize, seed: u64) -> Result<PowerFlowSweep, String> {
    let fixtures = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PowerFlowSweep { cases: 0, max_abs_err: 0.0, slowest_33bus_s: 0.0 };
    for name in ["two_bus.json", "ieee33.json"] {
        let net = load_network_file(fixtures.join(name)).map_err(|e| e.to_string())?;
        for _ in 0..cases {
            let scale = rng.random_range(0.0..1.3);
            let mut inj = net.base_injections(scale);
            for x in inj.iter_mut().skip(1) {
                let noise = rng.random_range(-0.5..0.5);
                x.p = x.p * (1.0 + noise) + rng.random_range(0.0..0.02);
                x.q *= 1.0 + noise;
            }
            let start = std::time::Instant::now();
            let bfs = solve_power_flow(&net, &inj, &PowerFlowOptions::default()).map_err(|e| e.to_string())?;
            let took = start.elapsed().as_secs_f64();
            if !bfs.converged {
                return Err(format!("{name}: sweep did not converge at load scale {scale}"));
            }
            if net.len() == 33 {
                out.slowest_33bus_s = out.slowest_33bus_s.max(took);
            }
            let nr = super::nr_oracle::newton_raphson(&net, &inj, 1e-12);
            for (a, b) in bfs.voltages.iter().zip(&nr.voltages) {
                out.max_abs_err = out.max_abs_err.max((a - b).abs());
            }
            out.cases += 1;
        }
    }
    Ok(out)
}
