//! Config front end for the asynchronous GRPO orchestrator.

use std::path::PathBuf;

use minitune_grpo::{run_threaded, run_virtual, GrpoTask, OrchestratorConfig, RunOutput};

use crate::config::ConfigNode;
use crate::registry::{Component, ComponentRegistry};
use crate::sft::SEED_ENV;
use crate::{nearest, RecipeError};

pub const GRPO_KEYS: &[&str] = &["task", "clock", "orchestrator", "seed", "output_dir"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// Deterministic discrete-event scheduler; traces are reproducible.
    Virtual,
    Threaded,
}

pub struct GrpoRecipe {
    pub task: GrpoTask,
    pub clock: Clock,
    pub orchestrator: OrchestratorConfig,
    pub output_dir: Option<PathBuf>,
}

impl GrpoRecipe {
    pub fn setup(cfg: &ConfigNode, registry: &ComponentRegistry) -> Result<Self, RecipeError> {
        let map = cfg.as_map().ok_or_else(|| RecipeError::config("<root>", "config must be a map"))?;
        for key in map.keys() {
            if !GRPO_KEYS.contains(&key.as_str()) {
                let hint = nearest(key, GRPO_KEYS.iter().copied());
                return Err(RecipeError::config(key, format!("unknown key; did you mean {}?", hint.join(" or "))));
            }
        }
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(raw) => Some(
                raw.trim()
                    .parse::<u64>()
                    .map_err(|_| RecipeError::config(SEED_ENV, format!("not an unsigned integer: {raw:?}")))?,
            ),
            Err(_) => None,
        };
        let cfg_seed = match cfg.get("seed").filter(|n| !n.is_null()) {
            Some(n) => Some(
                n.as_i64()
                    .and_then(|v| u64::try_from(v).ok())
                    .ok_or_else(|| RecipeError::config("seed", format!("expected a non-negative integer, got {n}")))?,
            ),
            None => None,
        };
        let seed = env_seed.or(cfg_seed);

        let task_node =
            cfg.get("task").filter(|n| !n.is_null()).ok_or_else(|| RecipeError::config("task", "is required"))?;
        let task_spec = match registry.instantiate(task_node)?.into_component() {
            Some(Component::GrpoTask(t)) => t,
            Some(other) => {
                return Err(RecipeError::config(
                    "task",
                    format!("expected a task component, got a {} component", other.kind()),
                ))
            }
            None => return Err(RecipeError::config("task", "expected a map with a _component_ path")),
        };
        let task_seed = if env_seed.is_some() { seed.unwrap_or(task_spec.seed) } else { task_spec.seed };
        let task = crate::registry::BanditTaskSpec { seed: task_seed }.build();

        let clock = match cfg.get("clock").map(|n| n.as_str()) {
            None | Some(Some("virtual")) => Clock::Virtual,
            Some(Some("threaded")) => Clock::Threaded,
            Some(other) => {
                return Err(RecipeError::config("clock", format!("expected virtual or threaded, got {other:?}")))
            }
        };
        let mut orchestrator: OrchestratorConfig = match cfg.get("orchestrator").filter(|n| !n.is_null()) {
            Some(node) => node.deserialize("orchestrator")?,
            None => OrchestratorConfig::default(),
        };
        if let Some(s) = seed {
            orchestrator.seed = s;
        }
        orchestrator.validate()?;
        let output_dir = match cfg.get("output_dir").filter(|n| !n.is_null()) {
            Some(n) => {
                Some(PathBuf::from(n.as_str().ok_or_else(|| RecipeError::config("output_dir", "expected a string"))?))
            }
            None => None,
        };
        Ok(GrpoRecipe { task, clock, orchestrator, output_dir })
    }

    /// Runs the orchestrator and writes `trace.jsonl` and `report.csv` when
    /// an output directory is set.
    pub fn run(&self) -> Result<RunOutput, RecipeError> {
        let out = match self.clock {
            Clock::Virtual => run_virtual(&self.orchestrator, &self.task)?,
            Clock::Threaded => run_threaded(&self.orchestrator, &self.task)?,
        };
        if let Some(dir) = &self.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| RecipeError::io(dir, e))?;
            let trace = dir.join("trace.jsonl");
            std::fs::write(&trace, out.trace_jsonl()).map_err(|e| RecipeError::io(&trace, e))?;
            let csv = dir.join("report.csv");
            let file = std::fs::File::create(&csv).map_err(|e| RecipeError::io(&csv, e))?;
            out.report().write_csv(file)?;
        }
        Ok(out)
    }
}
