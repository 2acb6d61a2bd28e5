//! Supervised fine-tuning: batch, forward, loss, backward, step, log.

use std::path::PathBuf;
use std::time::Instant;

use minitune_core::autograd::meter::{phase_scope, reset_peaks, Watermark};
use minitune_core::autograd::{memory_report, ops, Category, Parameter, Phase, Tape, Tensor};
use minitune_core::data::{
    collate_batch, epoch_order, pack_sequences, pad_sequences, Batch, PackedSequence, PAD_ID, TOKENIZER_VOCAB,
};
use minitune_core::model::TransformerDecoder;
use minitune_core::objectives::{cross_entropy, linear_cross_entropy, LossResult, IGNORE_INDEX};
use minitune_core::optimizers::{
    attach_in_backward, clip_grad_norm, AdamW, InBackwardOptimizer, LrSchedule, OptimizerStateDict, Precision,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint, step_dir, Checkpoint, CheckpointMode, TrainingMetadata};
use crate::config::ConfigNode;
use crate::registry::{
    ByteTokenizer, CheckpointerSpec, Component, ComponentRegistry, LossSpec, ModelComponent, OptimizerSpec,
};
use crate::report::{CsvLogger, RecipeRunReport, StepRecord};
use crate::{nearest, RecipeError};

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "MINITUNE_SEED";

/// Top-level keys the SFT recipe understands.
pub const SFT_KEYS: &[&str] = &[
    "model",
    "tokenizer",
    "dataset",
    "dataset_val",
    "seed",
    "shuffle",
    "batch_size",
    "batch_size_val",
    "epochs",
    "max_steps_per_epoch",
    "max_steps",
    "gradient_accumulation_steps",
    "clip_grad_norm",
    "compile",
    "optimizer_in_bwd",
    "optimizer",
    "lr_scheduler",
    "loss",
    "device",
    "dtype",
    "enable_activation_checkpointing",
    "enable_activation_offloading",
    "metric_logger",
    "log_every_n_steps",
    "log_peak_memory_stats",
    "log_level",
    "profiler",
    "checkpointer",
    "resume_from_checkpoint",
    "run_val_every_n_steps",
    "output_dir",
];

/// The memory and throughput levers a run was configured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SftFlags {
    pub activation_checkpointing: bool,
    pub linear_cross_entropy: bool,
    pub optimizer_in_bwd: bool,
    pub int8_optimizer: bool,
    pub packed: bool,
}

enum Stepper {
    Standard(AdamW),
    Fused(InBackwardOptimizer),
}

impl Stepper {
    fn set_lr(&mut self, lr: f32) {
        match self {
            Stepper::Standard(o) => o.set_lr(lr),
            Stepper::Fused(o) => o.set_lr(lr),
        }
    }

    fn state_dict(&self) -> OptimizerStateDict {
        match self {
            Stepper::Standard(o) => o.state_dict(),
            Stepper::Fused(o) => o.state_dict(),
        }
    }

    fn load_state_dict(&mut self, dict: &OptimizerStateDict) -> Result<(), RecipeError> {
        match self {
            Stepper::Standard(o) => o.load_state_dict(dict)?,
            Stepper::Fused(o) => o.load_state_dict(dict)?,
        }
        Ok(())
    }

    fn payload_bytes(&self) -> usize {
        match self {
            Stepper::Standard(o) => o.state_payload_bytes(),
            Stepper::Fused(o) => o.state_payload_bytes(),
        }
    }
}

// Typed reads of top-level keys; null reads as absent.
struct TopLevel<'a>(&'a ConfigNode);

impl TopLevel<'_> {
    fn node(&self, key: &str) -> Option<&ConfigNode> {
        self.0.get(key).filter(|n| !n.is_null())
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool, RecipeError> {
        self.node(key).map_or(Ok(default), |n| {
            n.as_bool().ok_or_else(|| RecipeError::config(key, format!("expected a bool, got {}", n.type_name())))
        })
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, RecipeError> {
        self.node(key)
            .map(|n| {
                n.as_i64()
                    .and_then(|v| u64::try_from(v).ok())
                    .ok_or_else(|| RecipeError::config(key, format!("expected a non-negative integer, got {n}")))
            })
            .transpose()
    }

    fn positive(&self, key: &str, default: usize) -> Result<usize, RecipeError> {
        match self.u64(key)? {
            Some(0) => Err(RecipeError::config(key, "must be positive")),
            Some(v) => Ok(v as usize),
            None => Ok(default),
        }
    }

    fn f32(&self, key: &str) -> Result<Option<f32>, RecipeError> {
        self.node(key)
            .map(|n| {
                n.as_f64()
                    .map(|v| v as f32)
                    .ok_or_else(|| RecipeError::config(key, format!("expected a number, got {n}")))
            })
            .transpose()
    }

    fn str(&self, key: &str) -> Result<Option<&str>, RecipeError> {
        self.node(key)
            .map(|n| n.as_str().ok_or_else(|| RecipeError::config(key, format!("expected a string, got {n}"))))
            .transpose()
    }
}

fn component(registry: &ComponentRegistry, cfg: &ConfigNode, key: &str) -> Result<Option<Component>, RecipeError> {
    let Some(node) = cfg.get(key).filter(|n| !n.is_null()) else { return Ok(None) };
    if node.component().is_none() {
        return Err(RecipeError::config(key, "expected a map with a _component_ path"));
    }
    Ok(registry.instantiate(node)?.into_component())
}

// Builds `cfg[key]` and unwraps the expected component variant.
macro_rules! take {
    ($registry:expr, $cfg:expr, $key:literal, $variant:ident) => {
        match component($registry, $cfg, $key)? {
            Some(Component::$variant(v)) => Some(v),
            Some(other) => {
                return Err(RecipeError::config(
                    $key,
                    format!("expected a {} component, got a {} component", $key, other.kind()),
                ))
            }
            None => None,
        }
    };
}

/// Seed from the environment override, else the config, else 0.
pub fn resolve_seed(cfg: &ConfigNode) -> Result<u64, RecipeError> {
    if let Ok(raw) = std::env::var(SEED_ENV) {
        return raw
            .trim()
            .parse()
            .map_err(|_| RecipeError::config(SEED_ENV, format!("not an unsigned integer: {raw:?}")));
    }
    Ok(TopLevel(cfg).u64("seed")?.unwrap_or(0))
}

/// Rejects settings that have no effect here rather than ignoring them.
fn check_inert(top: &TopLevel<'_>) -> Result<(), RecipeError> {
    if top.bool("compile", false)? {
        return Err(RecipeError::Incompatible(
            "compile=True: there is no graph compiler here; set compile=False".into(),
        ));
    }
    if top.bool("enable_activation_offloading", false)? {
        return Err(RecipeError::Incompatible("enable_activation_offloading=True: there is no second device".into()));
    }
    if let Some(d) = top.str("device")? {
        if d != "cpu" {
            return Err(RecipeError::Incompatible(format!("device={d}: only cpu is available")));
        }
    }
    if let Some(d) = top.str("dtype")? {
        if !matches!(d, "fp32" | "float32") {
            return Err(RecipeError::Incompatible(format!("dtype={d}: training runs in fp32")));
        }
    }
    if let Some(p) = top.node("profiler") {
        if p.get("enabled").and_then(ConfigNode::as_bool).unwrap_or(false) {
            return Err(RecipeError::Incompatible("profiler.enabled=True: profiling is not supported".into()));
        }
    }
    top.bool("log_peak_memory_stats", true)?;
    top.str("log_level")?;
    Ok(())
}

pub struct SftRecipe {
    model: ModelComponent,
    rows: Vec<PackedSequence>,
    val_rows: Vec<PackedSequence>,
    batch_size: usize,
    batch_size_val: usize,
    grad_accum: usize,
    steps_per_epoch: u64,
    total_steps: u64,
    seed: u64,
    shuffle: bool,
    loss: LossSpec,
    optimizer: Stepper,
    base_lr: f32,
    schedule: LrSchedule,
    clip: Option<f32>,
    global_step: u64,
    val_every: Option<u64>,
    checkpointer: Option<CheckpointerSpec>,
    logger: Option<CsvLogger>,
    log_every: u64,
    output_dir: Option<PathBuf>,
    flags: SftFlags,
    order: Option<(u64, Vec<usize>)>,
    report: RecipeRunReport,
}

impl SftRecipe {
    /// Validates the whole config and builds every component. Incompatible
    /// settings fail here, before any training.
    pub fn setup(cfg: &ConfigNode, registry: &ComponentRegistry) -> Result<Self, RecipeError> {
        let map = cfg.as_map().ok_or_else(|| RecipeError::config("<root>", "config must be a map"))?;
        for key in map.keys() {
            if !SFT_KEYS.contains(&key.as_str()) {
                let hint = nearest(key, SFT_KEYS.iter().copied());
                return Err(RecipeError::config(key, format!("unknown key; did you mean {}?", hint.join(" or "))));
            }
        }
        let top = TopLevel(cfg);
        check_inert(&top)?;
        let seed = resolve_seed(cfg)?;

        // the model takes the run seed unless its node sets one
        let mut model_cfg = cfg.clone();
        if let Some(m) = model_cfg.as_map_mut().and_then(|m| m.get_mut("model")).and_then(ConfigNode::as_map_mut) {
            m.entry("seed".to_string()).or_insert(ConfigNode::Int(seed as i64));
        }
        let mut model =
            take!(registry, &model_cfg, "model", Model).ok_or_else(|| RecipeError::config("model", "is required"))?;
        let ac = top.bool("enable_activation_checkpointing", true)?;
        model.decoder.set_activation_checkpointing(ac);

        let tokenizer = take!(registry, cfg, "tokenizer", Tokenizer).unwrap_or(ByteTokenizer { max_seq_len: None });
        let model_max = model.decoder.max_seq_len();
        let max_len = tokenizer.max_seq_len.unwrap_or(model_max);
        if max_len > model_max || max_len == 0 {
            return Err(RecipeError::config(
                "tokenizer",
                format!("max_seq_len {max_len} must be in 1..={model_max} (the model's max_seq_len)"),
            ));
        }
        if model.decoder.vocab_size() < TOKENIZER_VOCAB {
            return Err(RecipeError::config(
                "model",
                format!("vocab_size {} is smaller than the tokenizer's {TOKENIZER_VOCAB}", model.decoder.vocab_size()),
            ));
        }

        let dataset =
            take!(registry, cfg, "dataset", Dataset).ok_or_else(|| RecipeError::config("dataset", "is required"))?;
        let rows = build_rows(&dataset, &tokenizer, max_len)?;

        let batch_size = top.positive("batch_size", 2)?;
        let grad_accum = top.positive("gradient_accumulation_steps", 1)?;
        let per_step = batch_size * grad_accum;
        let mut steps_per_epoch = (rows.len() / per_step) as u64;
        if steps_per_epoch == 0 {
            return Err(RecipeError::config(
                "dataset",
                format!(
                    "{} rows cannot fill one step of batch_size {batch_size} x {grad_accum} accumulation",
                    rows.len()
                ),
            ));
        }
        if let Some(cap) = top.u64("max_steps_per_epoch")? {
            steps_per_epoch = steps_per_epoch.min(cap.max(1));
        }
        let epochs = top.positive("epochs", 1)? as u64;
        let mut total_steps = epochs * steps_per_epoch;
        if let Some(cap) = top.u64("max_steps")? {
            total_steps = total_steps.min(cap);
        }

        let opt_spec: OptimizerSpec = take!(registry, cfg, "optimizer", Optimizer)
            .ok_or_else(|| RecipeError::config("optimizer", "is required"))?;
        let loss = take!(registry, cfg, "loss", Loss).ok_or_else(|| RecipeError::config("loss", "is required"))?;
        let schedule = take!(registry, cfg, "lr_scheduler", Scheduler).unwrap_or_default();

        let fused = top.bool("optimizer_in_bwd", false)?;
        let clip = top.f32("clip_grad_norm")?;
        if fused && clip.is_some() {
            return Err(RecipeError::Incompatible(
                "optimizer_in_bwd=True with clip_grad_norm: each parameter is stepped before the global norm is known"
                    .into(),
            ));
        }
        let params = model.decoder.trainable_parameters();
        let optimizer = if fused {
            Stepper::Fused(attach_in_backward(&params, opt_spec.hyper, opt_spec.precision, grad_accum)?)
        } else {
            Stepper::Standard(AdamW::new(&params, opt_spec.hyper, opt_spec.precision)?)
        };

        let val_every = top.u64("run_val_every_n_steps")?;
        if val_every == Some(0) {
            return Err(RecipeError::config("run_val_every_n_steps", "must be positive"));
        }
        let val_dataset = take!(registry, cfg, "dataset_val", Dataset);
        let val_rows = match &val_dataset {
            Some(d) => build_rows(d, &tokenizer, max_len)?,
            None if val_every.is_some() => {
                return Err(RecipeError::config("run_val_every_n_steps", "is set but dataset_val is missing"))
            }
            None => Vec::new(),
        };

        let checkpointer = take!(registry, cfg, "checkpointer", Checkpointer);
        if let Some(c) = &checkpointer {
            if c.mode == CheckpointMode::Adapter && model.lora.is_none() {
                return Err(RecipeError::Incompatible("an adapter checkpointer needs a LoRA model".into()));
            }
        }
        let logger = match take!(registry, cfg, "metric_logger", Logger) {
            Some(spec) => Some(CsvLogger::create(&spec.log_dir)?),
            None => None,
        };

        let flags = SftFlags {
            activation_checkpointing: ac,
            linear_cross_entropy: matches!(loss, LossSpec::LinearCrossEntropy { .. }),
            optimizer_in_bwd: fused,
            int8_optimizer: opt_spec.precision == Precision::Int8,
            packed: dataset.packed,
        };
        let recipe_name = if model.lora.is_some() { "sft_lora" } else { "sft_full" };
        let mut recipe = SftRecipe {
            model,
            rows,
            batch_size_val: top.positive("batch_size_val", batch_size)?,
            val_rows,
            batch_size,
            grad_accum,
            steps_per_epoch,
            total_steps,
            seed,
            shuffle: top.bool("shuffle", true)?,
            loss,
            optimizer,
            base_lr: opt_spec.hyper.lr,
            schedule,
            clip,
            global_step: 0,
            val_every,
            checkpointer,
            logger,
            log_every: top.positive("log_every_n_steps", 1)? as u64,
            output_dir: top.str("output_dir")?.map(PathBuf::from),
            flags,
            order: None,
            report: RecipeRunReport::new(recipe_name),
        };
        if top.bool("resume_from_checkpoint", false)? {
            recipe.resume()?;
        }
        Ok(recipe)
    }

    fn resume(&mut self) -> Result<(), RecipeError> {
        let dir = self
            .checkpointer
            .as_ref()
            .and_then(|c| c.checkpoint_dir.clone())
            .ok_or_else(|| RecipeError::config("resume_from_checkpoint", "needs checkpointer.checkpoint_dir"))?;
        let ckpt = load_checkpoint(&dir)?;
        let fail = |message: String| RecipeError::Checkpoint { path: dir.display().to_string(), message };
        let expected = self.checkpointer.as_ref().map(|c| c.mode);
        if Some(ckpt.mode) != expected {
            return Err(fail(format!("checkpoint mode {:?} does not match the checkpointer", ckpt.mode)));
        }
        if ckpt.metadata.seed != self.seed {
            return Err(fail(format!(
                "saved with seed {} but this run uses seed {}; the data order would differ",
                ckpt.metadata.seed, self.seed
            )));
        }
        ckpt.restore_model(&self.model.decoder).map_err(|e| fail(e.to_string()))?;
        let dict = ckpt.optimizer.as_ref().ok_or_else(|| fail("no optimizer state to resume from".into()))?;
        self.optimizer.load_state_dict(dict)?;
        self.global_step = ckpt.metadata.step;
        Ok(())
    }

    pub fn model(&self) -> &TransformerDecoder {
        &self.model.decoder
    }

    pub fn model_component(&self) -> &ModelComponent {
        &self.model
    }

    pub fn flags(&self) -> SftFlags {
        self.flags
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn rows(&self) -> &[PackedSequence] {
        &self.rows
    }

    pub fn output_dir(&self) -> Option<&std::path::Path> {
        self.output_dir.as_deref()
    }

    pub fn report(&self) -> &RecipeRunReport {
        &self.report
    }

    pub fn optimizer_state_bytes(&self) -> usize {
        self.optimizer.payload_bytes()
    }

    fn epoch_rows(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let n = self.rows.len();
            let order = if self.shuffle { epoch_order(n, self.seed, epoch) } else { (0..n).collect() };
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("set above").1
    }

    fn batch(&mut self, epoch: u64, first: usize) -> Result<Batch, RecipeError> {
        let b = self.batch_size;
        let idx: Vec<usize> = self.epoch_rows(epoch)[first..first + b].to_vec();
        let items: Vec<PackedSequence> = idx.iter().map(|&i| self.rows[i].clone()).collect();
        Ok(collate_batch(&items, PAD_ID)?)
    }

    fn labels(&self, batch: &Batch) -> Vec<i64> {
        let ignore = match self.loss {
            LossSpec::CrossEntropy { ignore_index } | LossSpec::LinearCrossEntropy { ignore_index, .. } => ignore_index,
        };
        batch.labels.iter().map(|&l| if l == IGNORE_INDEX { ignore } else { l }).collect()
    }

    fn forward_loss(
        &self,
        decoder: &TransformerDecoder,
        tape: &Tape,
        batch: &Batch,
    ) -> Result<LossResult, RecipeError> {
        let tokens = batch.to_token_batch()?;
        let labels = self.labels(batch);
        let rows = batch.batch * batch.seq_len;
        let lce = matches!(self.loss, LossSpec::LinearCrossEntropy { .. });
        let out = {
            let _phase = phase_scope(Phase::Forward);
            decoder.forward(tape, &tokens, lce)?
        };
        let _phase = phase_scope(Phase::Loss);
        let result = match self.loss {
            LossSpec::CrossEntropy { ignore_index } => {
                let logits = ops::reshape(&out, &[rows, decoder.vocab_size()])?;
                drop(out);
                cross_entropy(&logits, &labels, ignore_index)?
            }
            LossSpec::LinearCrossEntropy { chunk_size, ignore_index } => {
                let hidden = ops::reshape(&out, &[rows, decoder.embed_dim()])?;
                drop(out);
                let weight = decoder.output_weight().var(tape);
                linear_cross_entropy(&hidden, &weight, &labels, ignore_index, chunk_size)?
            }
        };
        Ok(result)
    }

    /// Runs one optimizer step. `None` once the configured steps are done.
    pub fn train_step(&mut self) -> Result<Option<StepRecord>, RecipeError> {
        if self.global_step >= self.total_steps {
            return Ok(None);
        }
        let step = self.global_step;
        let epoch = step / self.steps_per_epoch;
        let in_epoch = (step % self.steps_per_epoch) as usize;
        let lr = self.schedule.lr_at(self.base_lr, step as usize);
        self.optimizer.set_lr(lr);

        reset_peaks();
        let start_live = memory_report().live_bytes;
        let grad_mark = Watermark::for_category(Category::Gradient);
        let started = Instant::now();
        let mut loss_sum = 0.0f32;
        let mut tokens = 0;
        for micro in 0..self.grad_accum {
            let batch = self.batch(epoch, (in_epoch * self.grad_accum + micro) * self.batch_size)?;
            tokens += batch.non_pad_tokens;
            let tape = Tape::new();
            let result = self.forward_loss(&self.model.decoder, &tape, &batch)?;
            let loss = result.loss;
            loss_sum += loss.item()?;
            let scaled = if self.grad_accum > 1 { ops::mul_scalar(&loss, 1.0 / self.grad_accum as f32)? } else { loss };
            let _phase = phase_scope(Phase::Backward);
            if scaled.requires_grad() {
                tape.backward(&scaled)?;
            }
        }
        {
            let _phase = phase_scope(Phase::Optimizer);
            match &mut self.optimizer {
                Stepper::Standard(opt) => {
                    if let Some(max_norm) = self.clip {
                        clip_grad_norm(opt.parameters(), max_norm);
                    }
                    opt.step()?;
                    opt.zero_grad();
                }
                Stepper::Fused(opt) => opt.take_error()?,
            }
        }
        let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
        let peak_grad_bytes = grad_mark.growth();
        drop(grad_mark);
        let mem = memory_report();
        self.global_step += 1;

        let val_loss = match self.val_every {
            Some(n) if self.global_step.is_multiple_of(n) => self.evaluate()?,
            _ => None,
        };
        let record = StepRecord {
            step: self.global_step,
            epoch,
            loss: loss_sum / self.grad_accum as f32,
            lr,
            tokens,
            wall_ms,
            peak_forward_bytes: mem.phase_peak(Phase::Forward),
            peak_loss_bytes: mem.phase_peak(Phase::Loss),
            peak_backward_bytes: mem.phase_peak(Phase::Backward),
            peak_optimizer_bytes: mem.phase_peak(Phase::Optimizer),
            peak_grad_bytes,
            forward_activation_bytes: mem.phase_peak(Phase::Forward).saturating_sub(start_live),
            val_loss,
        };
        if let Some(c) = &self.checkpointer {
            let due = c.save_every_n_steps.is_some_and(|n| self.global_step.is_multiple_of(n as u64));
            if due || self.global_step == self.total_steps {
                let meta = TrainingMetadata { step: self.global_step, epoch, seed: self.seed };
                let ckpt = Checkpoint::capture(c.mode, &self.model.decoder, Some(self.optimizer.state_dict()), meta);
                save_checkpoint(step_dir(&c.output_dir, self.global_step), &ckpt)?;
            }
        }
        if let Some(logger) = &mut self.logger {
            if self.global_step.is_multiple_of(self.log_every) {
                logger.log(&record)?;
            }
        }
        self.report.steps.push(record.clone());
        Ok(Some(record))
    }

    /// Mean token loss over the validation rows, computed on a frozen copy
    /// of the current weights.
    pub fn evaluate(&self) -> Result<Option<f32>, RecipeError> {
        if self.val_rows.is_empty() {
            return Ok(None);
        }
        let frozen = self.model.decoder.deep_copy()?;
        for p in frozen.parameters() {
            p.set_requires_grad(false);
        }
        let (mut sum, mut count) = (0.0f64, 0usize);
        for chunk in self.val_rows.chunks(self.batch_size_val) {
            let batch = collate_batch(chunk, PAD_ID)?;
            let tape = Tape::no_grad();
            let r = self.forward_loss(&frozen, &tape, &batch)?;
            sum += f64::from(r.loss.item()?) * r.num_valid_tokens as f64;
            count += r.num_valid_tokens;
        }
        Ok((count > 0).then(|| (sum / count as f64) as f32))
    }

    /// Trains to the end and returns the report.
    pub fn run(mut self) -> Result<RecipeRunReport, RecipeError> {
        while self.train_step()?.is_some() {}
        Ok(self.report)
    }

    /// Current parameter values.
    pub fn parameter_values(&self) -> Vec<Tensor> {
        self.model.decoder.parameters().iter().map(Parameter::value).collect()
    }
}

fn build_rows(
    dataset: &crate::registry::DatasetComponent,
    tokenizer: &ByteTokenizer,
    max_len: usize,
) -> Result<Vec<PackedSequence>, RecipeError> {
    let seqs = dataset.sequences(tokenizer, max_len)?;
    Ok(if dataset.packed {
        pack_sequences(&seqs, max_len)?
    } else if dataset.pad_to_max_seq_len {
        pad_sequences(&seqs, max_len)?
    } else {
        seqs.iter().map(|s| PackedSequence::padded(s, s.len())).collect::<Result<_, _>>()?
    })
}
