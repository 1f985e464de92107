use cts_core::bench::{mean, standard_error};
use cts_core::rl_agent::{train, Checkpoint, DqnPolicy, QNetwork, TrainConfig};
use cts_core::simulator::{run_episode, ScenarioConfig};

fn short_scenario() -> ScenarioConfig {
    ScenarioConfig { episode_length: 10, replenishment_period: 10, seed: 500, ..ScenarioConfig::default() }
}

#[test]
fn pinned_exploration_matches_uniform_masked_policy() {
    let scenario = short_scenario();
    let episodes = 300;
    let cfg = TrainConfig {
        episodes,
        epsilon_start: 1.0,
        epsilon_end: 1.0,
        // acting only; no gradient updates needed
        train_every: 1_000_000,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &scenario).unwrap();
    let trained: Vec<f64> = out.curve.iter().map(|s| s.total_cost).collect();

    let net = QNetwork::for_world(4, 10, 0.001, 77);
    let random: Vec<f64> = (0..episodes as u64)
        .map(|e| {
            let mut p = DqnPolicy::with_epsilon(net.clone(), 1.0, 1_000 + e);
            run_episode(&scenario.with_seed(scenario.seed + e), &mut p).unwrap().totals.total
        })
        .collect();

    let diff = (mean(&trained) - mean(&random)).abs();
    let se = (standard_error(&trained).powi(2) + standard_error(&random).powi(2)).sqrt();
    assert!(diff <= 4.0 * se, "means {} vs {}, se {se}", mean(&trained), mean(&random));
}

#[test]
fn checkpoint_reproduces_policy_decisions() {
    let scenario = short_scenario();
    let cfg = TrainConfig { episodes: 5, batch_size: 32, replay_capacity: 1_000, ..TrainConfig::default() };
    let out = train(&cfg, &scenario).unwrap();
    let json = out.net.to_checkpoint(4, 10).to_json().unwrap();
    let restored = QNetwork::from_checkpoint(&Checkpoint::from_json(&json).unwrap(), 0.001).unwrap();

    let eval = scenario.with_customers(3).with_seed(9);
    let a = run_episode(&eval, &mut DqnPolicy::new(out.net.clone())).unwrap();
    let b = run_episode(&eval, &mut DqnPolicy::new(restored)).unwrap();
    assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
}

#[test]
fn training_curve_has_one_entry_per_episode_and_counts_penalties() {
    let scenario = short_scenario();
    let cfg = TrainConfig { episodes: 7, batch_size: 16, replay_capacity: 500, ..TrainConfig::default() };
    let out = train(&cfg, &scenario).unwrap();
    assert_eq!(out.curve.len(), 7);
    for (e, s) in out.curve.iter().enumerate() {
        assert_eq!(s.episode, e);
        assert!(s.total_cost >= 100.0 * s.unfulfilled as f64);
        assert!((0.0..=1.0).contains(&s.epsilon));
    }
    assert!(out.curve.windows(2).all(|w| w[1].epsilon <= w[0].epsilon));
}

#[test]
fn invalid_training_config_is_rejected() {
    let scenario = short_scenario();
    for cfg in [
        TrainConfig { gamma: 1.5, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { replay_capacity: 10, batch_size: 128, ..TrainConfig::default() },
        TrainConfig { epsilon_end: -0.1, ..TrainConfig::default() },
    ] {
        assert!(train(&cfg, &scenario).is_err());
    }
}
