//! Discrete-event scheduler on a virtual clock. Work is computed when it
//! starts and its result becomes visible when its virtual duration ends, so a
//! run is a pure function of the config and seed.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use minitune_core::model::{build_decoder, NamedTensor, TransformerDecoder};

use crate::buffer::ReplayBuffer;
use crate::config::{rollout_rng, GrpoTask, OrchestratorConfig, Regime};
use crate::postprocess::{Postprocessor, ProcessedTrajectory};
use crate::queue::{BoundedQueue, PushError};
use crate::rollout::{generate_rollout, Rollout};
use crate::server::ParameterServer;
use crate::trace::{to_jsonl, Event, RunReport, TraceEvent};
use crate::trainer::{GrpoTrainer, StepMetrics};
use crate::GrpoError;

/// Where every generated rollout id ended up.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdLedger {
    pub generated: Vec<u64>,
    pub consumed: Vec<u64>,
    pub evicted: Vec<u64>,
    pub dropped_stale: Vec<u64>,
    /// Still in a worker, the queue or the buffer when the run stopped.
    pub in_flight: Vec<u64>,
}

impl IdLedger {
    /// Each generated id is accounted for exactly once, and nothing else is.
    pub fn check_conservation(&self) -> Result<(), String> {
        let mut generated = BTreeSet::new();
        for &id in &self.generated {
            if !generated.insert(id) {
                return Err(format!("id {id} generated twice"));
            }
        }
        let mut seen = BTreeSet::new();
        let sinks = [&self.consumed, &self.evicted, &self.dropped_stale, &self.in_flight];
        for &id in sinks.into_iter().flatten() {
            if !seen.insert(id) {
                return Err(format!("id {id} accounted for twice"));
            }
            if !generated.contains(&id) {
                return Err(format!("id {id} appeared without being generated"));
            }
        }
        if let Some(lost) = generated.difference(&seen).next() {
            return Err(format!("id {lost} was lost"));
        }
        Ok(())
    }
}

pub struct RunOutput {
    pub trace: Vec<TraceEvent>,
    pub steps: Vec<StepMetrics>,
    pub final_weights: Vec<NamedTensor>,
    pub ledger: IdLedger,
    pub server_version: u64,
}

impl RunOutput {
    pub fn report(&self) -> RunReport {
        RunReport::from_events(&self.trace)
    }

    pub fn trace_jsonl(&self) -> String {
        to_jsonl(&self.trace)
    }

    pub fn max_lag(&self) -> Option<u64> {
        self.steps.iter().flat_map(|s| s.lags.iter().copied()).max()
    }

    pub fn consumed(&self) -> usize {
        self.steps.iter().map(|s| s.ids.len()).sum()
    }
}

enum GenState {
    Idle,
    Busy { rollout: Rollout, until: u64 },
    Blocked { rollout: Rollout, since: u64 },
}

struct Generator {
    role: String,
    policy: TransformerDecoder,
    version: u64,
    policy_version: u64,
    state: GenState,
}

enum PostState {
    Idle,
    Busy { traj: Box<ProcessedTrajectory>, until: u64 },
}

struct PostWorker {
    role: String,
    processor: Postprocessor,
    state: PostState,
}

enum TrainState {
    Idle,
    Busy { until: u64, finished: Option<StepMetrics> },
}

struct Sim<'a> {
    cfg: &'a OrchestratorConfig,
    task: &'a GrpoTask,
    batch: usize,
    now: u64,
    server: ParameterServer,
    queue: BoundedQueue<Rollout>,
    buffer: ReplayBuffer<ProcessedTrajectory>,
    generators: Vec<Generator>,
    posts: Vec<PostWorker>,
    trainer: GrpoTrainer,
    train_state: TrainState,
    /// Batch the trainer is on (sync and on-policy).
    train_batch: u64,
    steps: Vec<StepMetrics>,
    /// Batch being generated and how many of its ids are handed out.
    gen_batch: u64,
    claimed: usize,
    next_id: u64,
    trace: Vec<TraceEvent>,
    ledger: IdLedger,
}

const TRAINER: &str = "trainer";

/// Runs the orchestrator on the virtual clock.
pub fn run_virtual(cfg: &OrchestratorConfig, task: &GrpoTask) -> Result<RunOutput, GrpoError> {
    cfg.validate()?;
    if cfg.costs.generate_per_token == 0 || cfg.costs.train_per_trajectory == 0 {
        return Err(GrpoError::Config("generation and training costs must be positive on the virtual clock".into()));
    }
    if task.prompts.is_empty() {
        return Err(GrpoError::EmptyPrompt);
    }
    let mut sim = Sim::new(cfg, task)?;
    sim.run()?;
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a OrchestratorConfig, task: &'a GrpoTask) -> Result<Self, GrpoError> {
        let policy = build_decoder(&task.model)?;
        let initial = policy.state();
        let temperature = cfg.sampling.scoring_temperature();
        let generators = (0..cfg.num_generators)
            .map(|i| {
                Ok(Generator {
                    role: format!("generator-{i}"),
                    policy: policy.deep_copy()?,
                    version: 0,
                    policy_version: 0,
                    state: GenState::Idle,
                })
            })
            .collect::<Result<Vec<_>, GrpoError>>()?;
        let posts = (0..cfg.num_postprocessors)
            .map(|i| {
                let mut processor = Postprocessor::new(task.reward.clone(), cfg.sampling.eos_token);
                if cfg.reference_logprobs {
                    processor = processor.with_reference(policy.deep_copy()?, temperature);
                }
                Ok(PostWorker { role: format!("postprocessor-{i}"), processor, state: PostState::Idle })
            })
            .collect::<Result<Vec<_>, GrpoError>>()?;
        let trainer = GrpoTrainer::new(policy, cfg.optimizer, cfg.loss, temperature, cfg.regime.lag_bound())?;
        Ok(Sim {
            cfg,
            task,
            batch: cfg.rollouts_per_step,
            now: 0,
            server: ParameterServer::new(initial),
            queue: BoundedQueue::new(cfg.queue_capacity)?,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, cfg.seed ^ 0x5eed_b0ff)?,
            generators,
            posts,
            trainer,
            train_state: TrainState::Idle,
            train_batch: 0,
            steps: Vec::new(),
            gen_batch: 0,
            claimed: 0,
            next_id: 0,
            trace: Vec::new(),
            ledger: IdLedger::default(),
        })
    }

    fn emit(&mut self, role: &str, event: Event) {
        self.trace.push(TraceEvent { time: self.now, role: role.to_string(), event });
    }

    fn done(&self) -> bool {
        self.steps.len() as u64 >= self.cfg.total_steps && matches!(self.train_state, TrainState::Idle)
    }

    fn batch_of(&self, id: u64) -> u64 {
        id / self.batch as u64
    }

    fn eligible(&self, traj: &ProcessedTrajectory) -> bool {
        match self.cfg.regime {
            Regime::OffPolicy { max_lag } => {
                traj.policy_version() <= self.trainer.version()
                    && self.trainer.version() - traj.policy_version() <= max_lag
            }
            Regime::Sync | Regime::OnPolicy => self.batch_of(traj.id()) == self.train_batch,
        }
    }

    fn run(&mut self) -> Result<(), GrpoError> {
        loop {
            while self.step_all()? {}
            if self.done() {
                return Ok(());
            }
            match self.next_wakeup() {
                Some(t) => self.now = t,
                None => return Err(GrpoError::Deadlock { time: self.now, dump: self.dump() }),
            }
        }
    }

    /// One pass over every worker; true if anything changed.
    fn step_all(&mut self) -> Result<bool, GrpoError> {
        let mut progressed = self.advance_trainer()?;
        for i in 0..self.posts.len() {
            progressed |= self.advance_post(i)?;
        }
        for i in 0..self.generators.len() {
            progressed |= self.advance_generator(i)?;
        }
        Ok(progressed)
    }

    fn next_wakeup(&self) -> Option<u64> {
        let gens = self.generators.iter().filter_map(|g| match g.state {
            GenState::Busy { until, .. } => Some(until),
            _ => None,
        });
        let posts = self.posts.iter().filter_map(|p| match p.state {
            PostState::Busy { until, .. } => Some(until),
            PostState::Idle => None,
        });
        let trainer = match self.train_state {
            TrainState::Busy { until, .. } => Some(until),
            TrainState::Idle => None,
        };
        gens.chain(posts).chain(trainer).filter(|&t| t > self.now).min()
    }

    fn claim(&mut self) -> Option<u64> {
        if self.done() {
            return None;
        }
        match self.cfg.regime {
            Regime::OffPolicy { .. } => {
                self.next_id += 1;
                Some(self.next_id - 1)
            }
            Regime::Sync | Regime::OnPolicy => {
                if self.claimed == self.batch {
                    // the next batch waits for the update trained on this one
                    if self.server.policy_version() <= self.gen_batch {
                        return None;
                    }
                    self.gen_batch += 1;
                    self.claimed = 0;
                }
                if self.gen_batch >= self.cfg.total_steps {
                    return None;
                }
                self.claimed += 1;
                Some(self.gen_batch * self.batch as u64 + self.claimed as u64 - 1)
            }
        }
    }

    fn advance_generator(&mut self, i: usize) -> Result<bool, GrpoError> {
        let now = self.now;
        let state = std::mem::replace(&mut self.generators[i].state, GenState::Idle);
        let role = self.generators[i].role.clone();
        let (next, progressed) = match state {
            GenState::Idle => {
                let Some(id) = self.claim() else {
                    return Ok(false);
                };
                let g = &mut self.generators[i];
                if let Some(snap) = self.server.fetch_newer(&g.role, g.version) {
                    g.policy.load_state(&snap.tensors)?;
                    g.version = snap.version;
                    g.policy_version = snap.policy_version;
                    self.emit(&role, Event::Fetch { version: snap.version, policy_version: snap.policy_version });
                }
                let g = &self.generators[i];
                let mut rng = rollout_rng(self.cfg.seed, id);
                let rollout = generate_rollout(
                    &g.policy,
                    g.policy_version,
                    self.task.prompt_for(id),
                    self.cfg.group_size,
                    &self.cfg.sampling,
                    &mut rng,
                )?
                .stamped(id, now);
                self.ledger.generated.push(id);
                self.emit(&role, Event::RolloutStart { id, policy_version: rollout.policy_version });
                (GenState::Busy { rollout, until: now + self.cfg.generation_cost() }, true)
            }
            GenState::Busy { rollout, until } if until <= now => {
                let id = rollout.id;
                self.emit(&role, Event::RolloutEnd { id, latency: now - rollout.creation_time });
                match self.queue.try_push(rollout) {
                    Ok(occupancy) => {
                        self.emit(&role, Event::QueuePush { id, occupancy });
                        (GenState::Idle, true)
                    }
                    Err(PushError::Full(rollout) | PushError::Closed(rollout)) => {
                        self.emit(&role, Event::Blocked { id });
                        (GenState::Blocked { rollout, since: now }, true)
                    }
                }
            }
            GenState::Blocked { rollout, since } => {
                let id = rollout.id;
                match self.queue.try_push(rollout) {
                    Ok(occupancy) => {
                        self.emit(&role, Event::Unblocked { id, waited: now - since });
                        self.emit(&role, Event::QueuePush { id, occupancy });
                        (GenState::Idle, true)
                    }
                    Err(e) => (GenState::Blocked { rollout: e.into_inner(), since }, false),
                }
            }
            busy => (busy, false),
        };
        self.generators[i].state = next;
        Ok(progressed)
    }

    fn advance_post(&mut self, i: usize) -> Result<bool, GrpoError> {
        let now = self.now;
        let state = std::mem::replace(&mut self.posts[i].state, PostState::Idle);
        let role = self.posts[i].role.clone();
        let (next, progressed) = match state {
            PostState::Idle => {
                let Some((rollout, occupancy)) = self.queue.try_pop() else {
                    return Ok(false);
                };
                self.emit(&role, Event::QueuePop { id: rollout.id, occupancy });
                let traj = Box::new(self.posts[i].processor.process(rollout)?);
                (PostState::Busy { traj, until: now + self.cfg.costs.postprocess }, true)
            }
            PostState::Busy { traj, until } if until <= now => {
                let id = traj.id();
                if let Some(old) = self.buffer.push(*traj) {
                    self.ledger.evicted.push(old.id());
                    self.emit(&role, Event::Evict { id: old.id() });
                }
                let eligible = self.buffer.count_where(|t| self.eligible(t));
                self.emit(&role, Event::BufferInsert { id, size: self.buffer.len(), eligible });
                (PostState::Idle, true)
            }
            busy => (busy, false),
        };
        self.posts[i].state = next;
        Ok(progressed)
    }

    fn advance_trainer(&mut self) -> Result<bool, GrpoError> {
        match std::mem::replace(&mut self.train_state, TrainState::Idle) {
            TrainState::Busy { until, finished } if until <= self.now => {
                if let Some(m) = finished {
                    self.finish_step(m)?;
                }
                Ok(true)
            }
            busy @ TrainState::Busy { .. } => {
                self.train_state = busy;
                Ok(false)
            }
            TrainState::Idle if self.steps.len() as u64 >= self.cfg.total_steps => Ok(false),
            TrainState::Idle => self.start_training(),
        }
    }

    fn consume(&mut self, traj: &ProcessedTrajectory) -> Result<(), GrpoError> {
        let lag = self.trainer.lag_of(traj)?;
        self.ledger.consumed.push(traj.id());
        self.emit(TRAINER, Event::Consume { id: traj.id(), lag, step: self.trainer.version() });
        Ok(())
    }

    fn start_training(&mut self) -> Result<bool, GrpoError> {
        let costs = self.cfg.costs;
        let b = self.batch;
        let step = self.trainer.version();
        let batch: Vec<ProcessedTrajectory> = match self.cfg.regime {
            Regime::Sync => {
                let tb = self.train_batch;
                if self.buffer.count_where(|t| t.id() / b as u64 == tb) < b {
                    return Ok(false);
                }
                let mut batch = self.buffer.take_where(|t| t.id() / b as u64 == tb);
                batch.sort_by_key(ProcessedTrajectory::id);
                batch
            }
            Regime::OnPolicy => {
                let tb = self.train_batch;
                let Some(traj) = self.buffer.take_first(|t| t.id() / b as u64 == tb) else {
                    return Ok(false);
                };
                if self.trainer.pending() == 0 {
                    self.emit(TRAINER, Event::TrainStart { step, trainer_version: step });
                }
                self.consume(&traj)?;
                self.trainer.accumulate(&traj, b)?;
                let (until, finished) = if self.trainer.pending() == b {
                    let m = self.trainer.apply_update()?;
                    (costs.train_per_trajectory + costs.optimizer_step + costs.publish, Some(m))
                } else {
                    (costs.train_per_trajectory, None)
                };
                self.train_state = TrainState::Busy { until: self.now + until, finished };
                return Ok(true);
            }
            Regime::OffPolicy { max_lag } => {
                let version = self.trainer.version();
                let stale = self.buffer.take_where(|t| version - t.policy_version() > max_lag);
                for t in &stale {
                    self.ledger.dropped_stale.push(t.id());
                    self.emit(TRAINER, Event::DropStale { id: t.id(), lag: version - t.policy_version() });
                }
                match self.buffer.sample_where(b, |_| true) {
                    Some(batch) => batch,
                    None => return Ok(!stale.is_empty()),
                }
            }
        };
        self.emit(TRAINER, Event::TrainStart { step, trainer_version: step });
        for traj in &batch {
            self.consume(traj)?;
        }
        let m = self.trainer.train_step(&batch)?;
        let publish = self.publishes_after(step + 1);
        let busy =
            costs.train_per_trajectory * b as u64 + costs.optimizer_step + if publish { costs.publish } else { 0 };
        self.train_state = TrainState::Busy { until: self.now + busy, finished: Some(m) };
        Ok(true)
    }

    fn publishes_after(&self, steps_done: u64) -> bool {
        match self.cfg.regime {
            Regime::OffPolicy { .. } => self.cfg.publishes_after(steps_done),
            Regime::Sync | Regime::OnPolicy => true,
        }
    }

    fn finish_step(&mut self, m: StepMetrics) -> Result<(), GrpoError> {
        self.emit(
            TRAINER,
            Event::TrainEnd { step: m.step, loss: m.loss, reward_mean: m.reward_mean, reward_std: m.reward_std },
        );
        self.steps.push(m);
        self.train_batch += 1;
        let policy_version = self.trainer.version();
        if self.publishes_after(policy_version) {
            let version = self.server.publish(policy_version, self.trainer.snapshot())?;
            self.emit(TRAINER, Event::Publish { version, policy_version });
        }
        Ok(())
    }

    fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "regime={} steps_done={}/{} trainer_version={} server_version={}",
            self.cfg.regime.name(),
            self.steps.len(),
            self.cfg.total_steps,
            self.trainer.version(),
            self.server.version()
        );
        let _ = writeln!(s, "queue: {}/{}", self.queue.len(), self.queue.capacity());
        let ids: Vec<u64> = self.buffer.iter().map(ProcessedTrajectory::id).collect();
        let _ = writeln!(s, "buffer: {}/{} ids={ids:?}", self.buffer.len(), self.buffer.capacity());
        let _ = writeln!(s, "trainer: batch={} pending={}", self.train_batch, self.trainer.pending());
        let _ = writeln!(s, "generation: batch={} claimed={} next_id={}", self.gen_batch, self.claimed, self.next_id);
        for g in &self.generators {
            let state = match &g.state {
                GenState::Idle => "idle".to_string(),
                GenState::Busy { rollout, until } => {
                    format!("generating {} until {until}", rollout.id)
                }
                GenState::Blocked { rollout, since } => {
                    format!("blocked on {} since {since}", rollout.id)
                }
            };
            let _ = writeln!(s, "{}: {state} (weights v{})", g.role, g.version);
        }
        for p in &self.posts {
            let state = match &p.state {
                PostState::Idle => "idle".to_string(),
                PostState::Busy { traj, until } => {
                    format!("processing {} until {until}", traj.id())
                }
            };
            let _ = writeln!(s, "{}: {state}", p.role);
        }
        let _ = write!(s, "evicted={:?}", self.ledger.evicted);
        s
    }

    fn finish(mut self) -> RunOutput {
        let mut in_flight: Vec<u64> = Vec::new();
        for g in &self.generators {
            if let GenState::Busy { rollout, .. } | GenState::Blocked { rollout, .. } = &g.state {
                in_flight.push(rollout.id);
            }
        }
        for p in &self.posts {
            if let PostState::Busy { traj, .. } = &p.state {
                in_flight.push(traj.id());
            }
        }
        in_flight.extend(self.queue.drain().iter().map(|r| r.id));
        in_flight.extend(self.buffer.iter().map(ProcessedTrajectory::id));
        self.ledger.in_flight = in_flight;
        RunOutput {
            final_weights: self.trainer.snapshot(),
            server_version: self.server.version(),
            trace: self.trace,
            steps: self.steps,
            ledger: self.ledger,
        }
    }
}
