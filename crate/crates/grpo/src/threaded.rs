//! The same workers on OS threads with a wall clock. Not deterministic; the
//! invariants are still checked per consumed trajectory.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use minitune_core::model::{build_decoder, NamedTensor};

use crate::buffer::ReplayBuffer;
use crate::config::{rollout_rng, GrpoTask, OrchestratorConfig, Regime};
use crate::postprocess::{Postprocessor, ProcessedTrajectory};
use crate::queue::{BoundedQueue, PushError};
use crate::rollout::{generate_rollout, Rollout};
use crate::server::ParameterServer;
use crate::sim::{IdLedger, RunOutput};
use crate::trace::{Event, TraceEvent};
use crate::trainer::{GrpoTrainer, StepMetrics};
use crate::GrpoError;

const POLL: Duration = Duration::from_millis(20);

struct Gate {
    gen_batch: u64,
    claimed: usize,
    next_id: u64,
}

struct Shared<'a> {
    cfg: &'a OrchestratorConfig,
    task: &'a GrpoTask,
    start: Instant,
    server: ParameterServer,
    queue: BoundedQueue<Rollout>,
    buffer: Mutex<ReplayBuffer<ProcessedTrajectory>>,
    inserted: Condvar,
    trace: Mutex<Vec<TraceEvent>>,
    ledger: Mutex<IdLedger>,
    gate: Mutex<Gate>,
    stop: AtomicBool,
    trainer_version: AtomicU64,
    train_batch: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared<'_> {
    fn emit(&self, role: &str, event: Event) {
        let time = self.start.elapsed().as_micros() as u64;
        lock(&self.trace).push(TraceEvent { time, role: role.to_string(), event });
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn shut_down(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.queue.close();
        self.server.notify_all();
        self.inserted.notify_all();
    }

    fn batch_of(&self, id: u64) -> u64 {
        id / self.cfg.rollouts_per_step as u64
    }

    fn eligible(&self, traj: &ProcessedTrajectory) -> bool {
        match self.cfg.regime {
            Regime::OffPolicy { max_lag } => {
                let v = self.trainer_version.load(Ordering::SeqCst);
                traj.policy_version() <= v && v - traj.policy_version() <= max_lag
            }
            Regime::Sync | Regime::OnPolicy => self.batch_of(traj.id()) == self.train_batch.load(Ordering::SeqCst),
        }
    }

    /// Next rollout id, waiting on the parameter server while the regime
    /// holds generation back. `None` once the run is over.
    fn claim(&self) -> Option<u64> {
        let b = self.cfg.rollouts_per_step;
        loop {
            if self.stopped() {
                return None;
            }
            let mut gate = lock(&self.gate);
            if let Regime::OffPolicy { .. } = self.cfg.regime {
                gate.next_id += 1;
                return Some(gate.next_id - 1);
            }
            if gate.claimed == b && self.server.policy_version() > gate.gen_batch {
                gate.gen_batch += 1;
                gate.claimed = 0;
            }
            if gate.gen_batch >= self.cfg.total_steps {
                return None;
            }
            if gate.claimed < b {
                gate.claimed += 1;
                return Some(gate.gen_batch * b as u64 + gate.claimed as u64 - 1);
            }
            let target = gate.gen_batch + 1;
            drop(gate);
            self.server.wait_for_policy(target, POLL);
        }
    }
}

fn generator(sh: &Shared<'_>, role: String) -> Result<(), GrpoError> {
    let policy = build_decoder(&sh.task.model)?;
    let mut held: Option<u64> = None;
    let mut policy_version = 0;
    while let Some(id) = sh.claim() {
        let snap = sh.server.fetch_for(&role);
        if held != Some(snap.version) {
            policy.load_state(&snap.tensors)?;
            held = Some(snap.version);
            policy_version = snap.policy_version;
            sh.emit(&role, Event::Fetch { version: snap.version, policy_version });
        }
        let created = sh.start.elapsed().as_micros() as u64;
        sh.emit(&role, Event::RolloutStart { id, policy_version });
        let mut rng = rollout_rng(sh.cfg.seed, id);
        let rollout = generate_rollout(
            &policy,
            policy_version,
            sh.task.prompt_for(id),
            sh.cfg.group_size,
            &sh.cfg.sampling,
            &mut rng,
        )?
        .stamped(id, created);
        lock(&sh.ledger).generated.push(id);
        sh.emit(&role, Event::RolloutEnd { id, latency: sh.start.elapsed().as_micros() as u64 - created });
        let pushed = match sh.queue.try_push(rollout) {
            Ok(occupancy) => Ok(occupancy),
            Err(PushError::Closed(r)) => Err(r),
            Err(PushError::Full(r)) => {
                sh.emit(&role, Event::Blocked { id });
                let since = Instant::now();
                let res = sh.queue.push(r);
                if res.is_ok() {
                    sh.emit(&role, Event::Unblocked { id, waited: since.elapsed().as_micros() as u64 });
                }
                res
            }
        };
        match pushed {
            Ok(occupancy) => sh.emit(&role, Event::QueuePush { id, occupancy }),
            Err(r) => {
                lock(&sh.ledger).in_flight.push(r.id);
                return Ok(());
            }
        }
    }
    Ok(())
}

fn postprocessor(sh: &Shared<'_>, role: String) -> Result<(), GrpoError> {
    let mut processor = Postprocessor::new(sh.task.reward.clone(), sh.cfg.sampling.eos_token);
    if sh.cfg.reference_logprobs {
        processor = processor.with_reference(build_decoder(&sh.task.model)?, sh.cfg.sampling.scoring_temperature());
    }
    loop {
        let Some((rollout, occupancy)) = sh.queue.pop_timeout(POLL) else {
            if sh.queue.is_closed() && sh.queue.is_empty() {
                return Ok(());
            }
            continue;
        };
        sh.emit(&role, Event::QueuePop { id: rollout.id, occupancy });
        let traj = processor.process(rollout)?;
        let id = traj.id();
        let mut buf = lock(&sh.buffer);
        if let Some(old) = buf.push(traj) {
            lock(&sh.ledger).evicted.push(old.id());
            sh.emit(&role, Event::Evict { id: old.id() });
        }
        let eligible = buf.count_where(|t| sh.eligible(t));
        sh.emit(&role, Event::BufferInsert { id, size: buf.len(), eligible });
        drop(buf);
        sh.inserted.notify_all();
    }
}

fn trainer_loop(sh: &Shared<'_>) -> Result<(Vec<StepMetrics>, Vec<NamedTensor>), GrpoError> {
    const ROLE: &str = "trainer";
    let cfg = sh.cfg;
    let b = cfg.rollouts_per_step;
    let policy = build_decoder(&sh.task.model)?;
    let mut trainer =
        GrpoTrainer::new(policy, cfg.optimizer, cfg.loss, cfg.sampling.scoring_temperature(), cfg.regime.lag_bound())?;
    let stall = Duration::from_millis(cfg.stall_timeout_ms);
    let mut steps = Vec::new();
    let mut last_progress = Instant::now();
    while (steps.len() as u64) < cfg.total_steps {
        if sh.stopped() {
            return Err(GrpoError::WorkerPanic("a worker stopped the run".into()));
        }
        let step = trainer.version();
        let tb = sh.train_batch.load(Ordering::SeqCst);
        let mut buf = lock(&sh.buffer);
        let batch = match cfg.regime {
            Regime::Sync => (buf.count_where(|t| sh.batch_of(t.id()) == tb) >= b).then(|| {
                let mut batch = buf.take_where(|t| sh.batch_of(t.id()) == tb);
                batch.sort_by_key(ProcessedTrajectory::id);
                batch
            }),
            Regime::OnPolicy => buf.take_first(|t| sh.batch_of(t.id()) == tb).map(|t| vec![t]),
            Regime::OffPolicy { max_lag } => {
                for t in buf.take_where(|t| step - t.policy_version() > max_lag) {
                    lock(&sh.ledger).dropped_stale.push(t.id());
                    sh.emit(ROLE, Event::DropStale { id: t.id(), lag: step - t.policy_version() });
                }
                buf.sample_where(b, |_| true)
            }
        };
        let Some(batch) = batch else {
            if last_progress.elapsed() > stall {
                let dump = format!(
                    "regime={} steps_done={} buffer={}/{} queue={}/{} pending={}",
                    cfg.regime.name(),
                    steps.len(),
                    buf.len(),
                    buf.capacity(),
                    sh.queue.len(),
                    sh.queue.capacity(),
                    trainer.pending()
                );
                return Err(GrpoError::Deadlock { time: sh.start.elapsed().as_micros() as u64, dump });
            }
            let _ = sh.inserted.wait_timeout(buf, POLL).unwrap_or_else(|e| e.into_inner());
            continue;
        };
        drop(buf);
        last_progress = Instant::now();
        if trainer.pending() == 0 {
            sh.emit(ROLE, Event::TrainStart { step, trainer_version: step });
        }
        for traj in &batch {
            let lag = trainer.lag_of(traj)?;
            lock(&sh.ledger).consumed.push(traj.id());
            sh.emit(ROLE, Event::Consume { id: traj.id(), lag, step });
        }
        let finished = match cfg.regime {
            Regime::OnPolicy => {
                trainer.accumulate(&batch[0], b)?;
                if trainer.pending() == b {
                    Some(trainer.apply_update()?)
                } else {
                    None
                }
            }
            _ => Some(trainer.train_step(&batch)?),
        };
        let Some(m) = finished else { continue };
        sh.emit(
            ROLE,
            Event::TrainEnd { step: m.step, loss: m.loss, reward_mean: m.reward_mean, reward_std: m.reward_std },
        );
        steps.push(m);
        let policy_version = trainer.version();
        sh.trainer_version.store(policy_version, Ordering::SeqCst);
        sh.train_batch.fetch_add(1, Ordering::SeqCst);
        let publish = match cfg.regime {
            Regime::OffPolicy { .. } => cfg.publishes_after(policy_version),
            _ => true,
        };
        if publish {
            let version = sh.server.publish(policy_version, trainer.snapshot())?;
            sh.emit(ROLE, Event::Publish { version, policy_version });
        }
    }
    Ok((steps, trainer.snapshot()))
}

/// Runs generators, post-processors and the trainer on real threads.
pub fn run_threaded(cfg: &OrchestratorConfig, task: &GrpoTask) -> Result<RunOutput, GrpoError> {
    cfg.validate()?;
    if task.prompts.is_empty() {
        return Err(GrpoError::EmptyPrompt);
    }
    let initial = build_decoder(&task.model)?.state();
    let sh = Shared {
        cfg,
        task,
        start: Instant::now(),
        server: ParameterServer::new(initial),
        queue: BoundedQueue::new(cfg.queue_capacity)?,
        buffer: Mutex::new(ReplayBuffer::new(cfg.buffer_capacity, cfg.seed ^ 0x5eed_b0ff)?),
        inserted: Condvar::new(),
        trace: Mutex::new(Vec::new()),
        ledger: Mutex::new(IdLedger::default()),
        gate: Mutex::new(Gate { gen_batch: 0, claimed: 0, next_id: 0 }),
        stop: AtomicBool::new(false),
        trainer_version: AtomicU64::new(0),
        train_batch: AtomicU64::new(0),
    };
    let (steps, worker_errors) = std::thread::scope(|s| {
        let mut handles = Vec::new();
        for i in 0..cfg.num_generators {
            let sh = &sh;
            handles
                .push((format!("generator-{i}"), s.spawn(move || guard(sh, generator(sh, format!("generator-{i}"))))));
        }
        for i in 0..cfg.num_postprocessors {
            let sh = &sh;
            let role = format!("postprocessor-{i}");
            handles.push((role.clone(), s.spawn(move || guard(sh, postprocessor(sh, role)))));
        }
        let steps = trainer_loop(&sh);
        sh.shut_down();
        let errors: Vec<GrpoError> = handles
            .into_iter()
            .filter_map(|(role, h)| match h.join() {
                Ok(res) => res.err(),
                Err(_) => Some(GrpoError::WorkerPanic(role)),
            })
            .collect();
        (steps, errors)
    });
    if let Some(e) = worker_errors.into_iter().next() {
        return Err(e);
    }
    let (steps, final_weights) = steps?;
    let mut ledger = sh.ledger.into_inner().unwrap_or_else(|e| e.into_inner());
    ledger.in_flight.extend(sh.queue.drain().iter().map(|r| r.id));
    let buffer = sh.buffer.into_inner().unwrap_or_else(|e| e.into_inner());
    ledger.in_flight.extend(buffer.iter().map(ProcessedTrajectory::id));
    Ok(RunOutput {
        server_version: sh.server.version(),
        trace: sh.trace.into_inner().unwrap_or_else(|e| e.into_inner()),
        final_weights,
        steps,
        ledger,
    })
}

/// Stops everyone when a worker fails so nobody waits forever.
fn guard(sh: &Shared<'_>, res: Result<(), GrpoError>) -> Result<(), GrpoError> {
    if res.is_err() {
        sh.shut_down();
    }
    res
}
