//! Learner checks shared by the area tests and the acceptance target.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltgrid::data::{ScenarioBundle, SessionRecord};
use voltgrid::encoder::{build_window, EncoderKind, WindowBatch};
use voltgrid::env::EvcsEnv;
use voltgrid::learner::{
    dual_update, train, ActionMode, LagrangeState, LearnerConfig, LogRow, Model, ModelConfig, ModelShape,
    TrainOptions,
};
use voltgrid::signals::PriceSignal;

use super::checks::{bundled, greedy_histories};

/// The desk learner with a cheaper passthrough encoder.
pub fn passthrough_config(seed: u64) -> LearnerConfig {
    let mut c = LearnerConfig::desk();
    c.seed = seed;
    c.model.encoder.kind = EncoderKind::Passthrough;
    c
}

/// One EV parked all day on a single charger, constant prices, no voltage term.
///
/// Buying costs more than selling pays, so the reward-optimal policy sells
/// the battery down and a random policy loses money.
pub fn single_charger_bundle() -> ScenarioBundle {
    let mut b = bundled("smoke_2bus");
    let h = b.config.horizon_steps;
    b.config.chargers_per_evcs = vec![1];
    b.config.weights.beta4 = 0.0;
    b.config.load_profile = Some(vec![1.0; h]);
    b.config.jitter = Default::default();
    b.prices = PriceSignal::new(vec![0.3; h], vec![0.1; h], false).expect("valid prices");
    b.pv_kw = vec![vec![0.0; 1]; h];
    b.sessions = vec![SessionRecord {
        arrival_min: 0.0,
        departure_min: h as f64 * b.config.dt_hours * 60.0,
        energy_kwh: 20.0,
        capacity_kwh: 60.0,
        evcs_id: 0,
    }];
    b.validate().expect("single-charger bundle is valid");
    b
}

/// Fixed point, projection at zero and linear ascent of the dual update.
pub fn dual_examples() -> Result<(), String> {
    let fixed = dual_update(LagrangeState::new(0.7, 3.0, 0.5), 3.0).lambda;
    if fixed != 0.7 {
        return Err(format!("fixed point moved to {fixed}"));
    }
    let floor = dual_update(LagrangeState::new(0.0, 3.0, 0.5), 1.0).lambda;
    if floor != 0.0 {
        return Err(format!("projection gave {floor}"));
    }
    let up = dual_update(LagrangeState::new(1.0, 1.0, 0.25), 3.0).lambda;
    if up != 1.5 {
        return Err(format!("ascent gave {up}, expected 1.5"));
    }
    Ok(())
}

/// Trains on the smoke scenario with a threshold every cost exceeds and
/// returns the multiplier after each iteration.
pub fn lambda_trajectory(iterations: usize) -> Result<Vec<f64>, String> {
    let mut cfg = passthrough_config(11);
    cfg.lagrange.c_bar = Some(-1.0);
    cfg.lagrange.lambda_max = None;
    cfg.lagrange.eta = 0.01;
    let opts = TrainOptions { iterations, ..Default::default() };
    let out = train(&bundled("smoke_2bus"), cfg, &opts).map_err(|e| e.to_string())?;
    Ok(out.log.iter().map(|r| r.lambda).collect())
}

/// Every byte of every file under `a` equals the same file under `b`.
pub fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut n = 0;
    let mut stack = vec![a.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> =
            std::fs::read_dir(&dir).map_err(|e| e.to_string())?.filter_map(Result::ok).collect();
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(a).expect("walk stays under the root");
            let other = b.join(rel);
            let x = std::fs::read(&p).map_err(|e| e.to_string())?;
            let y = std::fs::read(&other).map_err(|e| format!("{}: {e}", other.display()))?;
            if x != y {
                return Err(format!("{} differs", rel.display()));
            }
            n += 1;
        }
    }
    Ok(n)
}

/// Log columns that only the reward channel and the environment determine.
pub fn reward_columns(rows: &[LogRow]) -> Vec<[u64; 6]> {
    rows.iter()
        .map(|r| {
            [r.mean_reward, r.mean_cost, r.actor_loss, r.critic_r_loss, r.volt_violation, r.dissatisfaction]
                .map(f64::to_bits)
        })
        .collect()
}

/// Perturbs every other agent's observations and masks and checks that
/// agent `k`'s action does not move by a single bit, both when acting
/// jointly and when acting from its own window alone. Returns the number of
/// comparisons made.
pub fn decentralization_check(trials: usize) -> Result<usize, String> {
    let mut env = EvcsEnv::new(&bundled("desk_33bus")).map_err(|e| e.to_string())?;
    let (hist, masks) = greedy_histories(&mut env, 40);
    let model = Model::new(ModelConfig::default(), ModelShape::of_env(&env), 21).map_err(|e| e.to_string())?;
    let n_agents = model.num_agents();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut compared = 0;
    for trial in 0..trials {
        let t = rng.random_range(0..hist[0].len());
        let k = trial % n_agents;
        let windows = |h: &[Vec<Vec<f64>>]| -> Vec<WindowBatch> {
            h.iter()
                .map(|hk| {
                    let mut b = WindowBatch::new(model.window(), model.obs_dim);
                    b.push_history(hk, t).expect("history covers t");
                    b
                })
                .collect()
        };
        let mask_t: Vec<Vec<bool>> = masks.iter().map(|m| m[t].clone()).collect();
        let mut noisy_hist = hist.clone();
        let mut noisy_mask = mask_t.clone();
        for j in (0..n_agents).filter(|&j| j != k) {
            for row in noisy_hist[j].iter_mut() {
                row.iter_mut().for_each(|v| *v += rng.random_range(-50.0..50.0));
            }
            noisy_mask[j].iter_mut().for_each(|m| *m = rng.random_bool(0.5));
        }
        let own = build_window(&hist[k], t, model.window()).map_err(|e| e.to_string())?;
        for mode in [ActionMode::Deterministic, ActionMode::Sample] {
            let seed = rng.random::<u64>();
            let base = model
                .act(&windows(&hist), &mask_t, mode, &mut ChaCha8Rng::seed_from_u64(seed))
                .map_err(|e| e.to_string())?;
            let moved = model
                .act(&windows(&noisy_hist), &noisy_mask, mode, &mut ChaCha8Rng::seed_from_u64(seed))
                .map_err(|e| e.to_string())?;
            if base[k] != moved[k] {
                return Err(format!("agent {k} at t={t} ({mode:?}) changed with other agents' inputs"));
            }
            if mode == ActionMode::Deterministic {
                let alone = model
                    .act_agent(k, &own, &mask_t[k], mode, &mut ChaCha8Rng::seed_from_u64(seed))
                    .map_err(|e| e.to_string())?;
                if alone != base[k] {
                    return Err(format!("agent {k} at t={t}: own-window action differs from the joint one"));
                }
                compared += 1;
            }
            compared += 1;
        }
    }
    Ok(compared)
}
