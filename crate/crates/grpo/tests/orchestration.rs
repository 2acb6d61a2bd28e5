use minitune_core::autograd::{ops, Tape};
use minitune_core::model::{build_decoder, NamedTensor};
use minitune_core::objectives::grpo_objective;
use minitune_core::optimizers::{AdamW, Precision};
use minitune_grpo::{
    bandit_task, generate_rollout, postprocess, rollout_rng, run_threaded, run_virtual, score_logprobs, CostModel,
    Event, GrpoError, GrpoTask, OrchestratorConfig, Regime, RunOutput, RunReport, StepMetrics, TraceEvent,
};

fn small(regime: Regime, steps: u64) -> OrchestratorConfig {
    OrchestratorConfig { total_steps: steps, ..OrchestratorConfig::bandit(regime) }
}

/// Straight-line generate, score, train loop with no workers or queues.
fn sequential_oracle(cfg: &OrchestratorConfig, task: &GrpoTask) -> (Vec<NamedTensor>, Vec<f32>) {
    let policy = build_decoder(&task.model).unwrap();
    let mut opt = AdamW::new(&policy.trainable_parameters(), cfg.optimizer, Precision::F32).unwrap();
    let b = cfg.rollouts_per_step as u64;
    let temperature = cfg.sampling.scoring_temperature();
    let mut losses = Vec::new();
    for step in 0..cfg.total_steps {
        let mut trajs = Vec::new();
        for id in step * b..(step + 1) * b {
            let mut rng = rollout_rng(cfg.seed, id);
            let r = generate_rollout(&policy, step, task.prompt_for(id), cfg.group_size, &cfg.sampling, &mut rng)
                .unwrap()
                .stamped(id, 0);
            trajs.push(postprocess(r, task.reward.as_ref(), cfg.sampling.eos_token));
        }
        let mut total = 0.0;
        for t in &trajs {
            let tape = Tape::new();
            let lp = score_logprobs(&policy, &tape, &t.rollout.prompt, &t.rollout.responses, temperature).unwrap();
            let loss =
                grpo_objective(&lp, &t.rollout.behavior_logprobs.concat(), &t.advantages, &t.masks.concat(), &cfg.loss)
                    .unwrap();
            total += loss.item().unwrap();
            tape.backward(&ops::mul_scalar(&loss, 1.0 / b as f32).unwrap()).unwrap();
        }
        opt.step().unwrap();
        opt.zero_grad();
        losses.push(total / b as f32);
    }
    (policy.state(), losses)
}

fn bits_equal(a: &[NamedTensor], b: &[NamedTensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bits_eq(y))
}

fn all_lags(out: &RunOutput) -> Vec<u64> {
    out.steps.iter().flat_map(|s| s.lags.iter().copied()).collect()
}

fn consume_events(trace: &[TraceEvent]) -> Vec<(u64, u64)> {
    trace
        .iter()
        .filter_map(|e| match e.event {
            Event::Consume { id, lag, .. } => Some((id, lag)),
            _ => None,
        })
        .collect()
}

fn decile_means(steps: &[StepMetrics]) -> (f32, f32) {
    let d = (steps.len() / 10).max(1);
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.reward_mean).sum::<f32>() / s.len() as f32;
    (mean(&steps[..d]), mean(&steps[steps.len() - d..]))
}

#[test]
fn sync_run_matches_the_sequential_oracle_bitwise() {
    let task = bandit_task(7);
    let cfg = OrchestratorConfig {
        seed: 7,
        sampling: minitune_grpo::SamplingConfig { max_new_tokens: 3, ..Default::default() },
        ..small(Regime::Sync, 8)
    };
    let out = run_virtual(&cfg, &task).unwrap();
    let (weights, losses) = sequential_oracle(&cfg, &task);
    assert!(bits_equal(&out.final_weights, &weights));
    let run_losses: Vec<f32> = out.steps.iter().map(|s| s.loss).collect();
    assert_eq!(
        run_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
        losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    );
    for (n, s) in out.steps.iter().enumerate() {
        let b = cfg.rollouts_per_step as u64;
        assert_eq!(s.ids, (n as u64 * b..(n as u64 + 1) * b).collect::<Vec<_>>());
    }
}

#[test]
fn virtual_clock_runs_are_byte_for_byte_reproducible() {
    let task = bandit_task(3);
    for regime in [Regime::Sync, Regime::OnPolicy, Regime::OffPolicy { max_lag: 2 }] {
        let cfg = small(regime, 12);
        let a = run_virtual(&cfg, &task).unwrap();
        let b = run_virtual(&cfg, &task).unwrap();
        assert_eq!(a.trace_jsonl(), b.trace_jsonl(), "{regime:?}");
        assert!(bits_equal(&a.final_weights, &b.final_weights));
    }
}

#[test]
fn sync_alternates_generation_and_training() {
    let task = bandit_task(1);
    let cfg = small(Regime::Sync, 5);
    let out = run_virtual(&cfg, &task).unwrap();
    let b = cfg.rollouts_per_step as u64;
    let mut publish_time = vec![0u64];
    let mut train_windows = Vec::new();
    let mut start = 0;
    for e in &out.trace {
        match e.event {
            Event::Publish { .. } => publish_time.push(e.time),
            Event::TrainStart { .. } => start = e.time,
            Event::TrainEnd { .. } => train_windows.push((start, e.time)),
            _ => {}
        }
    }
    for e in &out.trace {
        if let Event::RolloutStart { id, policy_version } = e.event {
            let batch = id / b;
            assert_eq!(policy_version, batch);
            assert!(e.time >= publish_time[batch as usize], "rollout {id} started before update {batch} was published");
            assert!(train_windows.iter().all(|&(s, t)| e.time < s || e.time >= t), "generation overlapped training");
        }
    }
    assert!(all_lags(&out).iter().all(|&l| l == 0));
}

#[test]
fn on_policy_has_zero_lag_and_streams_within_a_batch() {
    let task = bandit_task(2);
    let cfg = OrchestratorConfig { num_generators: 1, ..small(Regime::OnPolicy, 20) };
    let out = run_virtual(&cfg, &task).unwrap();
    assert_eq!(out.consumed(), 80);
    assert!(consume_events(&out.trace).iter().all(|&(_, lag)| lag == 0));
    assert!(all_lags(&out).iter().all(|&l| l == 0));
    // the trainer starts on batch n before batch n is fully generated
    let b = cfg.rollouts_per_step as u64;
    let first_consume =
        out.trace.iter().find(|e| matches!(e.event, Event::Consume { id, .. } if id / b == 0)).unwrap().time;
    let last_rollout = out
        .trace
        .iter()
        .filter(|e| matches!(e.event, Event::RolloutEnd { id, .. } if id / b == 0))
        .map(|e| e.time)
        .max()
        .unwrap();
    assert!(first_consume < last_rollout);
    // batch n+1 never starts before update n is published
    let mut published = 0u64;
    for e in &out.trace {
        match e.event {
            Event::Publish { policy_version, .. } => published = policy_version,
            Event::RolloutStart { id, policy_version } => {
                assert_eq!(policy_version, id / b);
                assert!(published >= id / b);
            }
            _ => {}
        }
    }
}

#[test]
fn off_policy_lag_stays_within_the_bound_over_many_trajectories() {
    let task = bandit_task(4);
    let cfg = OrchestratorConfig { num_generators: 3, ..small(Regime::OffPolicy { max_lag: 2 }, 150) };
    let out = run_virtual(&cfg, &task).unwrap();
    let lags = all_lags(&out);
    assert!(lags.len() >= 500, "only {} trajectories consumed", lags.len());
    assert!(lags.iter().all(|&l| l <= 2));
    assert!(lags.iter().any(|&l| l > 0), "off-policy run never lagged; the bound is untested");
    let report = out.report();
    assert!(report.lag_distribution.keys().all(|&l| l <= 2));
}

#[test]
fn off_policy_trainer_never_idles_with_a_full_eligible_batch() {
    let task = bandit_task(5);
    let cfg = small(Regime::OffPolicy { max_lag: 1 }, 60);
    let out = run_virtual(&cfg, &task).unwrap();
    let b = cfg.rollouts_per_step;
    let mut windows = Vec::new();
    let mut start = None;
    for e in &out.trace {
        match e.event {
            Event::TrainStart { .. } => start = Some(e.time),
            Event::TrainEnd { .. } => windows.push((start.take().unwrap(), e.time)),
            _ => {}
        }
    }
    let end = windows.last().unwrap().1;
    let mut checked = 0;
    for e in &out.trace {
        if let Event::BufferInsert { eligible, .. } = e.event {
            if eligible >= b && e.time < end {
                checked += 1;
                assert!(
                    windows.iter().any(|&(s, t)| s <= e.time && e.time < t),
                    "trainer idle at t={} with {eligible} eligible",
                    e.time
                );
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn sync_cadence_publishes_every_k_steps() {
    let task = bandit_task(5);
    let cfg = OrchestratorConfig { sync_cadence: 3, ..small(Regime::OffPolicy { max_lag: 4 }, 12) };
    let out = run_virtual(&cfg, &task).unwrap();
    let published: Vec<u64> = out
        .trace
        .iter()
        .filter_map(|e| match e.event {
            Event::Publish { version, policy_version } => Some(version * 100 + policy_version),
            _ => None,
        })
        .collect();
    assert_eq!(published, vec![103, 206, 309, 412]);
    assert_eq!(out.server_version, 4);
    assert!(all_lags(&out).iter().all(|&l| l <= 4));
}

#[test]
fn ids_are_conserved_in_every_regime() {
    let task = bandit_task(6);
    for regime in [Regime::Sync, Regime::OnPolicy, Regime::OffPolicy { max_lag: 1 }] {
        let cfg = OrchestratorConfig { buffer_capacity: 6, num_generators: 3, ..small(regime, 25) };
        let out = run_virtual(&cfg, &task).unwrap();
        out.ledger.check_conservation().unwrap();
        let consumed: Vec<u64> = out.steps.iter().flat_map(|s| s.ids.iter().copied()).collect();
        assert_eq!(consumed, out.ledger.consumed);
        let mut dedup = consumed.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), consumed.len(), "{regime:?} consumed a trajectory twice");
    }
}

#[test]
fn off_policy_with_a_small_buffer_evicts_and_drops_but_loses_nothing() {
    let task = bandit_task(6);
    let cfg = OrchestratorConfig {
        buffer_capacity: 5,
        num_generators: 4,
        costs: CostModel { train_per_trajectory: 9, ..CostModel::default() },
        ..small(Regime::OffPolicy { max_lag: 1 }, 30)
    };
    let out = run_virtual(&cfg, &task).unwrap();
    assert!(!out.ledger.evicted.is_empty());
    out.ledger.check_conservation().unwrap();
    let report = out.report();
    assert_eq!(report.evicted, out.ledger.evicted.len());
    assert_eq!(report.dropped_stale, out.ledger.dropped_stale.len());
}

#[test]
fn slow_postprocessing_with_capacity_one_blocks_generators() {
    let task = bandit_task(8);
    let cfg = OrchestratorConfig {
        queue_capacity: 1,
        num_generators: 3,
        costs: CostModel { postprocess: 40, ..CostModel::default() },
        ..small(Regime::OffPolicy { max_lag: 3 }, 10)
    };
    let out = run_virtual(&cfg, &task).unwrap();
    let report = out.report();
    assert!(report.generator_blocked_time > 0);
    assert!(report.counts.get("blocked").copied().unwrap_or(0) > 0);
    assert!(report.queue_occupancy.iter().all(|&(_, occ)| occ <= 1));
    assert_eq!(report.max_queue_occupancy, 1);
}

#[test]
fn queue_occupancy_never_exceeds_capacity() {
    let task = bandit_task(9);
    for cap in [1, 2, 5] {
        let cfg = OrchestratorConfig {
            queue_capacity: cap,
            num_generators: 4,
            ..small(Regime::OffPolicy { max_lag: 2 }, 15)
        };
        let out = run_virtual(&cfg, &task).unwrap();
        assert!(out.report().queue_occupancy.iter().all(|&(_, occ)| occ <= cap));
    }
}

#[test]
fn lost_batch_is_reported_as_a_deadlock_with_state() {
    let task = bandit_task(1);
    let cfg = OrchestratorConfig { buffer_capacity: 2, ..small(Regime::Sync, 3) };
    match run_virtual(&cfg, &task) {
        Err(GrpoError::Deadlock { dump, .. }) => {
            assert!(dump.contains("buffer: 2/2"), "{dump}");
            assert!(dump.contains("generator-0"), "{dump}");
            assert!(dump.contains("evicted="), "{dump}");
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected a deadlock"),
    }
}

#[test]
fn invalid_configs_fail_fast() {
    let task = bandit_task(1);
    let bad = [
        OrchestratorConfig { queue_capacity: 0, ..small(Regime::Sync, 1) },
        OrchestratorConfig { buffer_capacity: 0, ..small(Regime::Sync, 1) },
        OrchestratorConfig { group_size: 1, ..small(Regime::Sync, 1) },
        OrchestratorConfig { sync_cadence: 2, ..small(Regime::OnPolicy, 1) },
        OrchestratorConfig { sync_cadence: 0, ..small(Regime::OffPolicy { max_lag: 1 }, 1) },
        small(Regime::OffPolicy { max_lag: 0 }, 1),
    ];
    for cfg in bad {
        assert!(run_virtual(&cfg, &task).is_err(), "{cfg:?}");
    }
}

#[test]
fn bandit_reward_improves_in_every_regime() {
    let task = bandit_task(0);
    for regime in [Regime::Sync, Regime::OnPolicy, Regime::OffPolicy { max_lag: 2 }] {
        let out = run_virtual(&OrchestratorConfig::bandit(regime), &task).unwrap();
        assert_eq!(out.steps.len(), 200);
        let (first, last) = decile_means(&out.steps);
        assert!(last > first, "{regime:?}: first decile {first}, last decile {last}");
    }
}

#[test]
fn report_of_an_empty_run_is_zeroed() {
    let r = RunReport::from_events(&[]);
    assert_eq!(r, RunReport::default());
    assert_eq!(r.events, 0);
    assert_eq!(r.buffer_throughput(), 0.0);
    let csv = r.to_csv_string();
    assert!(csv.starts_with("section,key,field,value\n"));
    assert!(csv.contains("summary,consumed,value,0"));
}

#[test]
fn report_counts_match_the_trace() {
    let task = bandit_task(2);
    let out = run_virtual(&small(Regime::OffPolicy { max_lag: 2 }, 20), &task).unwrap();
    let r = out.report();
    assert_eq!(r.events, out.trace.len());
    assert_eq!(r.counts.values().sum::<usize>(), out.trace.len());
    assert_eq!(r.consumed, out.consumed());
    assert_eq!(r.lag_distribution.values().sum::<usize>(), out.consumed());
    assert_eq!(r.steps.len(), 20);
    assert_eq!(r.latency_histogram.values().sum::<usize>(), r.counts["rollout_end"]);
    let csv = r.to_csv_string();
    assert!(csv.contains("step,19,reward_mean,"));
    assert!(csv.contains("latency_histogram,"));
    assert!(csv.contains("queue_occupancy,"));
    assert!(csv.contains("lag,0,count,"));
}

#[test]
fn trace_lines_are_self_describing_json() {
    let task = bandit_task(2);
    let out = run_virtual(&small(Regime::Sync, 2), &task).unwrap();
    for line in out.trace_jsonl().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["time", "role", "kind", "payload"] {
            assert!(v.get(key).is_some(), "{line} lacks {key}");
        }
        let back: TraceEvent = serde_json::from_str(line).unwrap();
        assert_eq!(back.to_json(), line);
    }
}

#[test]
fn threaded_mode_keeps_the_contracts() {
    let task = bandit_task(3);
    for regime in [Regime::Sync, Regime::OnPolicy, Regime::OffPolicy { max_lag: 2 }] {
        let cfg = OrchestratorConfig { num_generators: 2, num_postprocessors: 2, ..small(regime, 15) };
        let out = run_threaded(&cfg, &task).unwrap();
        assert_eq!(out.steps.len(), 15);
        out.ledger.check_conservation().unwrap();
        let bound = regime.lag_bound();
        assert!(all_lags(&out).iter().all(|&l| l <= bound), "{regime:?}");
        assert!(out.report().queue_occupancy.iter().all(|&(_, occ)| occ <= cfg.queue_capacity));
    }
}

#[test]
fn threaded_sync_matches_the_oracle() {
    // the sync schedule leaves no room for timing to matter
    let task = bandit_task(7);
    let cfg = OrchestratorConfig { seed: 7, num_generators: 3, num_postprocessors: 2, ..small(Regime::Sync, 6) };
    let out = run_threaded(&cfg, &task).unwrap();
    let (weights, _) = sequential_oracle(&cfg, &task);
    assert!(bits_equal(&out.final_weights, &weights));
}
