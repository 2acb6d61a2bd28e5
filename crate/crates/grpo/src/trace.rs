use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::GrpoError;

/// What happened. Serialized as `"kind"` plus a `"payload"` object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    Fetch {
        version: u64,
        policy_version: u64,
    },
    RolloutStart {
        id: u64,
        policy_version: u64,
    },
    RolloutEnd {
        id: u64,
        latency: u64,
    },
    /// Queue full; the generator holds the rollout until there is room.
    Blocked {
        id: u64,
    },
    Unblocked {
        id: u64,
        waited: u64,
    },
    QueuePush {
        id: u64,
        occupancy: usize,
    },
    QueuePop {
        id: u64,
        occupancy: usize,
    },
    BufferInsert {
        id: u64,
        size: usize,
        eligible: usize,
    },
    Evict {
        id: u64,
    },
    DropStale {
        id: u64,
        lag: u64,
    },
    Consume {
        id: u64,
        lag: u64,
        step: u64,
    },
    TrainStart {
        step: u64,
        trainer_version: u64,
    },
    TrainEnd {
        step: u64,
        loss: f32,
        reward_mean: f32,
        reward_std: f32,
    },
    Publish {
        version: u64,
        policy_version: u64,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::Fetch { .. } => "fetch",
            Event::RolloutStart { .. } => "rollout_start",
            Event::RolloutEnd { .. } => "rollout_end",
            Event::Blocked { .. } => "blocked",
            Event::Unblocked { .. } => "unblocked",
            Event::QueuePush { .. } => "queue_push",
            Event::QueuePop { .. } => "queue_pop",
            Event::BufferInsert { .. } => "buffer_insert",
            Event::Evict { .. } => "evict",
            Event::DropStale { .. } => "drop_stale",
            Event::Consume { .. } => "consume",
            Event::TrainStart { .. } => "train_start",
            Event::TrainEnd { .. } => "train_end",
            Event::Publish { .. } => "publish",
        }
    }
}

/// One line of the JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Virtual ticks, or microseconds since start in threaded mode.
    pub time: u64,
    pub role: String,
    #[serde(flatten)]
    pub event: Event,
}

impl TraceEvent {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace events always serialize")
    }
}

pub fn write_jsonl(events: &[TraceEvent], mut out: impl Write) -> Result<(), GrpoError> {
    for e in events {
        writeln!(out, "{}", e.to_json()).map_err(|e| GrpoError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    events.iter().map(|e| e.to_json() + "\n").collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub time: u64,
    pub loss: f32,
    pub reward_mean: f32,
    pub reward_std: f32,
}

/// Aggregates of a trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub events: usize,
    pub counts: BTreeMap<String, usize>,
    /// Power-of-two upper bound -> rollouts whose latency is at most that
    /// (and above the previous bound).
    pub latency_histogram: BTreeMap<u64, usize>,
    /// (time, occupancy) after every push and pop.
    pub queue_occupancy: Vec<(u64, usize)>,
    pub max_queue_occupancy: usize,
    pub generator_blocked_time: u64,
    pub inserted: usize,
    pub consumed: usize,
    pub evicted: usize,
    pub dropped_stale: usize,
    pub duration: u64,
    pub steps: Vec<StepRow>,
    pub lag_distribution: BTreeMap<u64, usize>,
}

impl RunReport {
    pub fn from_events(events: &[TraceEvent]) -> Self {
        let mut r = RunReport { events: events.len(), ..RunReport::default() };
        for e in events {
            *r.counts.entry(e.event.kind().to_string()).or_default() += 1;
            r.duration = r.duration.max(e.time);
            match e.event {
                Event::RolloutEnd { latency, .. } => {
                    *r.latency_histogram.entry(latency.max(1).next_power_of_two()).or_default() += 1;
                }
                Event::QueuePush { occupancy, .. } | Event::QueuePop { occupancy, .. } => {
                    r.queue_occupancy.push((e.time, occupancy));
                    r.max_queue_occupancy = r.max_queue_occupancy.max(occupancy);
                }
                Event::Unblocked { waited, .. } => r.generator_blocked_time += waited,
                Event::BufferInsert { .. } => r.inserted += 1,
                Event::Evict { .. } => r.evicted += 1,
                Event::DropStale { .. } => r.dropped_stale += 1,
                Event::Consume { lag, .. } => {
                    r.consumed += 1;
                    *r.lag_distribution.entry(lag).or_default() += 1;
                }
                Event::TrainEnd { step, loss, reward_mean, reward_std } => {
                    r.steps.push(StepRow { step, time: e.time, loss, reward_mean, reward_std });
                }
                _ => {}
            }
        }
        r
    }

    /// Consumed trajectories per 1000 time units.
    pub fn buffer_throughput(&self) -> f64 {
        if self.duration == 0 {
            0.0
        } else {
            self.consumed as f64 * 1000.0 / self.duration as f64
        }
    }

    /// Long-format CSV: `section,key,field,value`.
    pub fn write_csv(&self, out: impl Write) -> Result<(), GrpoError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| GrpoError::Io(e.to_string());
        w.write_record(["section", "key", "field", "value"]).map_err(io)?;
        let mut row = |section: &str, key: &str, field: &str, value: String| {
            w.write_record([section, key, field, value.as_str()]).map_err(io)
        };
        let totals = [
            ("events", self.events as u64),
            ("duration", self.duration),
            ("inserted", self.inserted as u64),
            ("consumed", self.consumed as u64),
            ("evicted", self.evicted as u64),
            ("dropped_stale", self.dropped_stale as u64),
            ("max_queue_occupancy", self.max_queue_occupancy as u64),
            ("generator_blocked_time", self.generator_blocked_time),
        ];
        for (k, v) in totals {
            row("summary", k, "value", v.to_string())?;
        }
        row("summary", "buffer_throughput_per_1000", "value", format!("{:.6}", self.buffer_throughput()))?;
        for (k, v) in &self.counts {
            row("event_count", k, "count", v.to_string())?;
        }
        for (bound, n) in &self.latency_histogram {
            row("latency_histogram", &bound.to_string(), "count", n.to_string())?;
        }
        for (t, occ) in &self.queue_occupancy {
            row("queue_occupancy", &t.to_string(), "occupancy", occ.to_string())?;
        }
        for s in &self.steps {
            let key = s.step.to_string();
            row("step", &key, "time", s.time.to_string())?;
            row("step", &key, "loss", s.loss.to_string())?;
            row("step", &key, "reward_mean", s.reward_mean.to_string())?;
            row("step", &key, "reward_std", s.reward_std.to_string())?;
        }
        for (lag, n) in &self.lag_distribution {
            row("lag", &lag.to_string(), "count", n.to_string())?;
        }
        w.flush().map_err(|e| GrpoError::Io(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}
