mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltgrid::diffcore::{Graph, Tensor};
use voltgrid::env::EvcsEnv;
use voltgrid::learner::{
    collect_rollout, compute_advantages, evaluate, eval_seeds, gae_advantages, lagrangian_advantage, mc_advantages,
    read_log, standardize, surrogate_loss, train, value_loss, vanilla_pg_loss, ActionMode, AdvantageConfig,
    AdvantageMode, CriticKind, InstanceSeeds, LearnerConfig, Model, ModelConfig, ModelShape, ParamGroup, PolicyRef,
    TrainOptions, CHECKPOINT_DIR, LOG_FILE,
};

use support::checks::bundled;
use support::learning::{
    dual_examples, lambda_trajectory, passthrough_config, reward_columns, same_tree, single_charger_bundle,
};

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}` written out term by term.
fn brute_gae(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> =
        (0..n).map(|t| r[t] + gamma * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t]).collect();
    (0..n).map(|t| (t..n).map(|i| (gamma * lambda).powi((i - t) as i32) * delta[i]).sum()).collect()
}

#[test]
fn gae_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (gamma, lambda) = (rng.random_range(0.8..1.0), rng.random_range(0.0..1.0));
        let (adv, ret) = gae_advantages(&r, &v, gamma, lambda);
        for (t, want) in brute_gae(&r, &v, gamma, lambda).iter().enumerate() {
            assert!((adv[t] - want).abs() < 1e-6, "t={t}: {} vs {want}", adv[t]);
            assert!((ret[t] - (want + v[t])).abs() < 1e-6);
        }
    }
}

#[test]
fn monte_carlo_returns_example() {
    let (adv, ret) = mc_advantages(&[1.0, 1.0, 1.0], &[0.0; 3], 1.0);
    assert_eq!(ret, vec![3.0, 2.0, 1.0]);
    assert_eq!(adv, vec![3.0, 2.0, 1.0]);
    let (adv, _) = mc_advantages(&[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5], 1.0);
    assert_eq!(adv, vec![2.5, 1.5, 0.5]);
}

#[test]
fn gae_with_unit_lambda_is_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (gae, _) = gae_advantages(&r, &v, 1.0, 1.0);
    let (mc, _) = mc_advantages(&r, &v, 1.0);
    for (a, b) in gae.iter().zip(&mc) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn lagrangian_advantage_examples() {
    assert_eq!(lagrangian_advantage(&[1.0, -2.0], &[0.5, 4.0], 2.0), vec![0.0, -10.0]);
    assert_eq!(lagrangian_advantage(&[1.0, -2.0], &[0.5, 4.0], 0.0), vec![1.0, -2.0]);
    let ret_r = [3.5, -1.25, 0.0];
    assert_eq!(lagrangian_advantage(&ret_r, &[9.0, 8.0, 7.0], 0.0), ret_r.to_vec());
}

#[test]
fn standardize_gives_zero_mean_unit_std() {
    let mut x = vec![1.0, 2.0, 3.0, 4.0];
    standardize(&mut x);
    let mean = x.iter().sum::<f64>() / 4.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    let mut c = vec![5.0; 3];
    standardize(&mut c);
    assert_eq!(c, vec![0.0; 3]);
}

#[test]
fn dual_update_examples() {
    dual_examples().unwrap();
}

fn smoke_setup() -> (EvcsEnv, Model) {
    let env = EvcsEnv::new(&bundled("smoke_2bus")).unwrap();
    let model = Model::new(ModelConfig::default(), ModelShape::of_env(&env), 4).unwrap();
    (env, model)
}

fn seeds(n: u64) -> Vec<InstanceSeeds> {
    (0..n).map(|i| InstanceSeeds { env: 100 + i, policy: 200 + i }).collect()
}

#[test]
fn rollout_covers_whole_episodes() {
    let (env, model) = smoke_setup();
    let buf = collect_rollout(&env, &model, &seeds(2), env.horizon(), ActionMode::Sample, 1).unwrap();
    assert_eq!(buf.len(), 2 * 288);
    let idx = buf.index();
    assert_eq!(idx[287], (0, 287));
    assert_eq!(idx[288], (1, 0));
    for ep in &buf.episodes {
        assert!(ep.complete);
        assert_eq!(ep.obs[0].len(), 289);
        assert!(ep.metrics.is_some());
    }
    let again = collect_rollout(&env, &model, &seeds(2), env.horizon(), ActionMode::Sample, 2).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn deterministic_actions_are_the_mean() {
    let (env, model) = smoke_setup();
    let buf = collect_rollout(&env, &model, &seeds(1), 20, ActionMode::Deterministic, 1).unwrap();
    let other = collect_rollout(&env, &model, &[InstanceSeeds { env: 100, policy: 999 }], 20, ActionMode::Deterministic, 1)
        .unwrap();
    assert_eq!(buf.episodes[0].u, other.episodes[0].u);
    let sampled = collect_rollout(&env, &model, &seeds(1), 20, ActionMode::Sample, 1).unwrap();
    assert_ne!(buf.episodes[0].u, sampled.episodes[0].u);
}

/// At theta = theta_old the clipped surrogate and the vanilla policy
/// gradient have the same gradient.
#[test]
fn first_update_matches_vanilla_policy_gradient() {
    let (env, model) = smoke_setup();
    let mut buf = collect_rollout(&env, &model, &seeds(1), env.horizon(), ActionMode::Sample, 1).unwrap();
    let cfg = AdvantageConfig { mode: AdvantageMode::Gae, gamma: 0.99, gae_lambda: 0.95, signal_scale: 1e-3, batch: 64 };
    compute_advantages(&mut buf, &model, &cfg).unwrap();
    let items: Vec<(usize, usize)> = buf.index().into_iter().step_by(5).collect();
    let batches = buf.window_batches(&items, model.window()).unwrap();
    let ep = &buf.episodes[0];
    let c = model.chargers[0];
    let mut u = Tensor::zeros(items.len(), c);
    let mut mask = Tensor::zeros(items.len(), c);
    let mut old = Vec::new();
    let mut adv = Vec::new();
    for (row, &(_, t)) in items.iter().enumerate() {
        u.data[row * c..(row + 1) * c].copy_from_slice(&ep.u[t][0]);
        for (j, &m) in ep.masks[t][0].iter().enumerate() {
            mask.data[row * c + j] = if m { 1.0 } else { 0.0 };
        }
        old.push(ep.logp[t][0]);
        adv.push(ep.adv_r[t]);
    }
    let grads = |ppo: bool| {
        let mut g = Graph::new(&model.params);
        let emb = model.embed_agent(&mut g, 0, &batches[0]).unwrap();
        let mean = model.actor_mean(&mut g, 0, emb, &batches[0]);
        let logp = model.actor(0).log_prob(&mut g, mean, &u, &mask);
        let loss = if ppo { surrogate_loss(&mut g, logp, &old, &adv, 0.2) } else { vanilla_pg_loss(&mut g, logp, &adv) };
        g.backward(loss).unwrap()
    };
    let (a, b) = (grads(true), grads(false));
    let scale = b.global_norm().max(1.0);
    assert!(scale > 0.0);
    for (ta, tb) in a.iter().zip(b.iter()) {
        for (x, y) in ta.data.iter().zip(&tb.data) {
            assert!((x - y).abs() <= 1e-6 * scale, "{x} vs {y}");
        }
    }
}

fn critic_inputs(model: &Model, rows: usize, seed: u64) -> Vec<Tensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..model.num_agents()).map(|_| Tensor::uniform(rows, model.embedding_dim(), 1.0, &mut r)).collect()
}

fn critic_loss(model: &Model, embs: &[Tensor], targets: &[f64]) -> (f64, voltgrid::diffcore::Grads) {
    let mut g = Graph::new(&model.params);
    let vars: Vec<_> = embs.iter().map(|e| g.input(e.clone())).collect();
    let v = model.value(&mut g, CriticKind::Reward, &vars).unwrap();
    let l = value_loss(&mut g, v, targets);
    (g.value(l).item(), g.backward(l).unwrap())
}

#[test]
fn perfect_critic_has_zero_loss_and_gradient() {
    let (_, model) = smoke_setup();
    let embs = critic_inputs(&model, 8, 3);
    let mut g = Graph::new(&model.params);
    let vars: Vec<_> = embs.iter().map(|e| g.input(e.clone())).collect();
    let v = model.value(&mut g, CriticKind::Reward, &vars).unwrap();
    let targets = g.value(v).data.clone();
    let (loss, grads) = critic_loss(&model, &embs, &targets);
    assert_eq!(loss, 0.0);
    assert_eq!(grads.global_norm(), 0.0);
}

#[test]
fn critic_descent_on_constant_targets_is_monotone() {
    let (_, mut model) = smoke_setup();
    let embs = critic_inputs(&model, 16, 5);
    let targets = vec![0.8; 16];
    let ids: Vec<_> = model.params.ids().filter(|&id| model.group(id) == ParamGroup::RewardCritic).collect();
    let mut prev = f64::INFINITY;
    for _ in 0..60 {
        let (loss, grads) = critic_loss(&model, &embs, &targets);
        assert!(loss <= prev, "loss rose from {prev} to {loss}");
        prev = loss;
        for &id in &ids {
            let step: Vec<f64> = grads.get(id).data.iter().map(|d| 0.01 * d).collect();
            model.params.get_mut(id).data.iter_mut().zip(step).for_each(|(p, s)| *p -= s);
        }
    }
    assert!(prev < 0.1 * critic_loss(&smoke_setup().1, &embs, &targets).0);
}

#[test]
fn one_smoke_iteration_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { iterations: 1, out_dir: Some(dir.path().into()), ..Default::default() };
    let out = train(&bundled("smoke_2bus"), passthrough_config(0), &opts).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(read_log(dir.path().join(LOG_FILE)).unwrap().len(), 1);
    assert!(dir.path().join(CHECKPOINT_DIR).join("iter_000001.ckpt").exists());
}

#[test]
fn reward_only_learning_improves_single_charger() {
    let bundle = single_charger_bundle();
    let mut cfg = passthrough_config(3);
    cfg.cost_channel = false;
    cfg.actor_lr = 3e-3;
    let opts = TrainOptions { iterations: 40, ..Default::default() };
    let out = train(&bundle, cfg, &opts).unwrap();
    let first = out.log[0].mean_reward;
    let tail = out.log[35..].iter().map(|r| r.mean_reward).sum::<f64>() / 5.0;
    assert!(tail > first + 0.5 * first.abs(), "reward went from {first} to {tail}");
    let env = EvcsEnv::new(&bundle).unwrap();
    let s = eval_seeds(5, 4);
    let trained = evaluate(&env, PolicyRef::Model(&out.trainer.model), &s, 1, true).unwrap();
    let fresh = Model::new(cfg.model, ModelShape::of_env(&env), 1).unwrap();
    let before = evaluate(&env, PolicyRef::Model(&fresh), &s, 1, true).unwrap();
    assert!(trained.summary.total_reward.mean > before.summary.total_reward.mean);
}

#[test]
fn frozen_zero_multiplier_matches_reward_only_training() {
    let bundle = bundled("smoke_2bus");
    let mut frozen = passthrough_config(6);
    frozen.lagrange.frozen = true;
    frozen.lagrange.lambda_init = 0.0;
    frozen.lagrange.c_bar = Some(0.0);
    let mut off = frozen;
    off.cost_channel = false;
    let opts = TrainOptions { iterations: 3, ..Default::default() };
    let a = train(&bundle, frozen, &opts).unwrap();
    let b = train(&bundle, off, &opts).unwrap();
    assert_eq!(reward_columns(&a.log), reward_columns(&b.log));
    assert!(a.log.iter().all(|r| r.lambda == 0.0));
}

#[test]
fn multiplier_rises_while_cost_exceeds_threshold() {
    let lambdas = lambda_trajectory(50).unwrap();
    assert_eq!(lambdas.len(), 50);
    assert!(lambdas[0] > 0.0);
    for w in lambdas.windows(2) {
        assert!(w[1] > w[0], "{} then {}", w[0], w[1]);
    }
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let bundle = bundled("smoke_2bus");
    let cfg = passthrough_config(8);
    let straight = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let opts = |dir: &std::path::Path, iterations, resume| TrainOptions {
        iterations,
        resume,
        checkpoint_every: 1,
        out_dir: Some(dir.into()),
        wall_clock: false,
        ..Default::default()
    };
    let a = train(&bundle, cfg, &opts(straight.path(), 4, false)).unwrap();
    train(&bundle, cfg, &opts(split.path(), 2, false)).unwrap();
    let b = train(&bundle, cfg, &opts(split.path(), 4, true)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.trainer.model.params, b.trainer.model.params);
    assert_eq!(same_tree(straight.path(), split.path()).unwrap(), 6);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let bundle = bundled("smoke_2bus");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let opts = TrainOptions { iterations: 2, out_dir: Some(d.path().into()), wall_clock: false, ..Default::default() };
        train(&bundle, LearnerConfig { seed: 4, ..LearnerConfig::desk() }, &opts).unwrap();
    }
    assert!(same_tree(dirs[0].path(), dirs[1].path()).unwrap() >= 3);
}

#[test]
fn evaluation_is_repeatable_and_worker_independent() {
    let (env, model) = smoke_setup();
    let s = eval_seeds(3, 4);
    let a = evaluate(&env, PolicyRef::Model(&model), &s, 1, true).unwrap();
    let b = evaluate(&env, PolicyRef::Model(&model), &s, 3, true).unwrap();
    assert_eq!(a.episodes, b.episodes);
}
