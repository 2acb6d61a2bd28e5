//! Dotted component paths mapped to builders with declared argument schemas.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use minitune_core::data::{
    apply_instruct_template, load_jsonl_dataset, synthetic_corpus, truncate_prompt, InstructSample, SplitSpec,
    TokenSequence, BOS_ID, EOS_ID, TOKENIZER_VOCAB,
};
use minitune_core::model::{
    build_decoder, build_lora_decoder, DecoderConfig, LoraConfig, LoraTarget, TransformerDecoder,
};
use minitune_core::objectives::{DEFAULT_CHUNK_SIZE, IGNORE_INDEX};
use minitune_core::optimizers::{AdamWHyper, LrSchedule, Precision};
use minitune_grpo::{bandit_task, GrpoTask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::CheckpointMode;
use crate::config::{ConfigNode, COMPONENT_KEY};
use crate::{nearest, RecipeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Int,
    /// Ints are accepted too.
    Float,
    Bool,
    Str,
    StrList,
    FloatList,
    Component,
    Any,
}

impl ArgKind {
    fn accepts(self, value: &Instance) -> bool {
        use ConfigNode as N;
        match (self, value) {
            (ArgKind::Any, _) => true,
            (ArgKind::Component, Instance::Component(_)) => true,
            (ArgKind::Int, Instance::Value(N::Int(_))) => true,
            (ArgKind::Float, Instance::Value(N::Int(_) | N::Float(_))) => true,
            (ArgKind::Bool, Instance::Value(N::Bool(_))) => true,
            (ArgKind::Str, Instance::Value(N::Str(_))) => true,
            (ArgKind::StrList, Instance::List(items)) => items.iter().all(|i| matches!(i, Instance::Value(N::Str(_)))),
            (ArgKind::FloatList, Instance::List(items)) => {
                items.iter().all(|i| matches!(i, Instance::Value(N::Int(_) | N::Float(_))))
            }
            _ => false,
        }
    }

    fn describe(self) -> &'static str {
        match self {
            ArgKind::Int => "an integer",
            ArgKind::Float => "a number",
            ArgKind::Bool => "a bool",
            ArgKind::Str => "a string",
            ArgKind::StrList => "a list of strings",
            ArgKind::FloatList => "a list of numbers",
            ArgKind::Component => "a component",
            ArgKind::Any => "any value",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ArgSpec {
    pub name: &'static str,
    pub kind: ArgKind,
    pub required: bool,
}

impl ArgSpec {
    pub const fn required(name: &'static str, kind: ArgKind) -> Self {
        ArgSpec { name, kind, required: true }
    }

    pub const fn optional(name: &'static str, kind: ArgKind) -> Self {
        ArgSpec { name, kind, required: false }
    }
}

/// Result of instantiating a config node.
#[derive(Debug, PartialEq)]
pub enum Instance {
    Value(ConfigNode),
    Component(Box<Component>),
    List(Vec<Instance>),
    Map(IndexMap<String, Instance>),
}

impl Instance {
    pub fn into_component(self) -> Option<Component> {
        match self {
            Instance::Component(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_value(&self) -> Option<&ConfigNode> {
        match self {
            Instance::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// Validated constructor arguments.
pub struct Args {
    component: String,
    values: IndexMap<String, Instance>,
}

impl Args {
    pub fn component_path(&self) -> &str {
        &self.component
    }

    pub fn error(&self, argument: &str, message: impl Into<String>) -> RecipeError {
        RecipeError::Argument { component: self.component.clone(), argument: argument.into(), message: message.into() }
    }

    pub fn get(&self, name: &str) -> Option<&Instance> {
        self.values.get(name)
    }

    fn value(&self, name: &str) -> Option<&ConfigNode> {
        self.values.get(name).and_then(Instance::as_value)
    }

    pub fn u64(&self, name: &str) -> Result<Option<u64>, RecipeError> {
        self.value(name)
            .and_then(ConfigNode::as_i64)
            .map(|v| u64::try_from(v).map_err(|_| self.error(name, format!("must be non-negative, got {v}"))))
            .transpose()
    }

    pub fn usize(&self, name: &str) -> Result<Option<usize>, RecipeError> {
        Ok(self.u64(name)?.map(|v| v as usize))
    }

    pub fn req_usize(&self, name: &str) -> Result<usize, RecipeError> {
        self.usize(name)?.ok_or_else(|| self.error(name, "is required"))
    }

    pub fn f32(&self, name: &str) -> Result<Option<f32>, RecipeError> {
        Ok(self.value(name).and_then(ConfigNode::as_f64).map(|v| v as f32))
    }

    pub fn bool(&self, name: &str) -> Option<bool> {
        self.value(name).and_then(ConfigNode::as_bool)
    }

    pub fn str(&self, name: &str) -> Option<&str> {
        self.value(name).and_then(ConfigNode::as_str)
    }

    pub fn str_list(&self, name: &str) -> Option<Vec<String>> {
        match self.values.get(name)? {
            Instance::List(items) => items.iter().map(|i| i.as_value()?.as_str().map(String::from)).collect(),
            _ => None,
        }
    }

    pub fn f32_list(&self, name: &str) -> Option<Vec<f32>> {
        match self.values.get(name)? {
            Instance::List(items) => items.iter().map(|i| i.as_value()?.as_f64().map(|v| v as f32)).collect(),
            _ => None,
        }
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        match self.values.get(name)? {
            Instance::Component(c) => Some(c),
            _ => None,
        }
    }
}

pub type Builder = Box<dyn Fn(&Args) -> Result<Component, RecipeError>>;

struct Entry {
    args: Vec<ArgSpec>,
    build: Builder,
}

pub struct ComponentRegistry {
    entries: BTreeMap<String, Entry>,
}

impl Default for ComponentRegistry {
    fn default() -> Self {
        ComponentRegistry::builtin()
    }
}

impl ComponentRegistry {
    pub fn empty() -> Self {
        ComponentRegistry { entries: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        path: &str,
        args: Vec<ArgSpec>,
        build: impl Fn(&Args) -> Result<Component, RecipeError> + 'static,
    ) -> Result<(), RecipeError> {
        if self.entries.contains_key(path) {
            return Err(RecipeError::DuplicateComponent(path.to_string()));
        }
        self.entries.insert(path.to_string(), Entry { args, build: Box::new(build) });
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn schema(&self, path: &str) -> Option<&[ArgSpec]> {
        self.entries.get(path).map(|e| e.args.as_slice())
    }

    /// Children first, then the parent. Maps without `_component_` and
    /// scalars come back as plain values.
    pub fn instantiate(&self, node: &ConfigNode) -> Result<Instance, RecipeError> {
        match node {
            ConfigNode::Map(map) => match map.get(COMPONENT_KEY) {
                Some(path) => self.build_component(path, map),
                None => map
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), self.instantiate(v)?)))
                    .collect::<Result<_, _>>()
                    .map(Instance::Map),
            },
            ConfigNode::List(items) => {
                items.iter().map(|v| self.instantiate(v)).collect::<Result<_, _>>().map(Instance::List)
            }
            scalar => Ok(Instance::Value(scalar.clone())),
        }
    }

    fn build_component(&self, path: &ConfigNode, map: &IndexMap<String, ConfigNode>) -> Result<Instance, RecipeError> {
        let path = path.as_str().ok_or_else(|| RecipeError::Argument {
            component: path.to_string(),
            argument: COMPONENT_KEY.into(),
            message: format!("must be a string, got a {}", path.type_name()),
        })?;
        let entry = self.entries.get(path).ok_or_else(|| RecipeError::UnknownComponent {
            path: path.to_string(),
            nearest: nearest(path, self.paths()),
        })?;
        let err = |argument: &str, message: String| RecipeError::Argument {
            component: path.to_string(),
            argument: argument.to_string(),
            message,
        };
        let mut values = IndexMap::new();
        for (key, child) in map.iter().filter(|(k, _)| *k != COMPONENT_KEY) {
            let Some(spec) = entry.args.iter().find(|a| a.name == key.as_str()) else {
                let names: Vec<&str> = entry.args.iter().map(|a| a.name).collect();
                let hint = nearest(key, names.iter().copied());
                return Err(err(
                    key,
                    format!("unknown argument; did you mean {}? accepted: {}", hint.join(" or "), names.join(", ")),
                ));
            };
            if child.is_null() {
                continue;
            }
            let value = self.instantiate(child)?;
            if !spec.kind.accepts(&value) {
                return Err(err(key, format!("expected {}, got {}", spec.kind.describe(), describe_instance(&value))));
            }
            values.insert(key.clone(), value);
        }
        if let Some(missing) = entry.args.iter().find(|a| a.required && !values.contains_key(a.name)) {
            return Err(err(missing.name, "is required".into()));
        }
        let args = Args { component: path.to_string(), values };
        Ok(Instance::Component(Box::new((entry.build)(&args)?)))
    }

    pub fn builtin() -> Self {
        let mut r = ComponentRegistry::empty();
        register_builtins(&mut r).expect("builtin paths are unique");
        r
    }
}

fn describe_instance(i: &Instance) -> String {
    match i {
        Instance::Value(v) => format!("a {} ({v})", v.type_name()),
        Instance::Component(c) => format!("component {}", c.kind()),
        Instance::List(_) => "a list".into(),
        Instance::Map(_) => "a map".into(),
    }
}

/// Free-function form of [`ComponentRegistry::instantiate`].
pub fn instantiate(node: &ConfigNode, registry: &ComponentRegistry) -> Result<Instance, RecipeError> {
    registry.instantiate(node)
}

/// Built decoder plus the settings it came from.
pub struct ModelComponent {
    pub config: DecoderConfig,
    pub lora: Option<LoraConfig>,
    pub decoder: TransformerDecoder,
}

impl fmt::Debug for ModelComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelComponent")
            .field("config", &self.config)
            .field("lora", &self.lora)
            .field("parameters", &self.decoder.num_parameters())
            .finish()
    }
}

/// Equal when built from the same settings and holding the same parameter bits.
impl PartialEq for ModelComponent {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (self.decoder.state(), other.decoder.state());
        self.config == other.config
            && self.lora == other.lora
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.bits_eq(y))
    }
}

/// Byte-level tokenizer: UTF-8 bytes plus BOS, EOS and PAD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ByteTokenizer {
    pub max_seq_len: Option<usize>,
}

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        TOKENIZER_VOCAB
    }

    /// Templated sample, prompt-truncated to `max_len`.
    pub fn encode(&self, sample: &InstructSample, max_len: usize) -> Result<TokenSequence, RecipeError> {
        Ok(truncate_prompt(&apply_instruct_template(sample), max_len)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Instruct(Vec<InstructSample>),
    /// Pre-tokenized sequences.
    Tokens(Vec<TokenSequence>),
}

impl DatasetSource {
    pub fn len(&self) -> usize {
        match self {
            DatasetSource::Instruct(v) => v.len(),
            DatasetSource::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetComponent {
    pub source: DatasetSource,
    pub split: SplitSpec,
    pub packed: bool,
    /// Pad every unpacked row to the full sequence length instead of the
    /// longest row in its batch.
    pub pad_to_max_seq_len: bool,
}

impl DatasetComponent {
    /// Tokenized sequences of the selected split, in corpus order.
    pub fn sequences(&self, tokenizer: &ByteTokenizer, max_len: usize) -> Result<Vec<TokenSequence>, RecipeError> {
        let range = self.split.range(self.source.len());
        match &self.source {
            DatasetSource::Instruct(samples) => samples[range].iter().map(|s| tokenizer.encode(s, max_len)).collect(),
            DatasetSource::Tokens(seqs) => seqs[range]
                .iter()
                .map(|s| {
                    if s.len() > max_len {
                        Err(RecipeError::config("dataset", format!("sequence of {} tokens exceeds {max_len}", s.len())))
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub hyper: AdamWHyper,
    pub precision: Precision,
    /// Accepted for config compatibility; every step is a single pass already.
    pub fused: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    CrossEntropy { ignore_index: i64 },
    LinearCrossEntropy { chunk_size: usize, ignore_index: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggerSpec {
    pub log_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointerSpec {
    pub mode: CheckpointMode,
    pub output_dir: PathBuf,
    /// Where `resume_from_checkpoint` loads from.
    pub checkpoint_dir: Option<PathBuf>,
    /// Save cadence in optimizer steps; the final step is always saved.
    pub save_every_n_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BanditTaskSpec {
    pub seed: u64,
}

impl BanditTaskSpec {
    pub fn build(&self) -> GrpoTask {
        bandit_task(self.seed)
    }
}

#[derive(Debug, PartialEq)]
pub enum Component {
    Model(ModelComponent),
    Tokenizer(ByteTokenizer),
    Dataset(DatasetComponent),
    Optimizer(OptimizerSpec),
    Loss(LossSpec),
    Scheduler(LrSchedule),
    Logger(LoggerSpec),
    Checkpointer(CheckpointerSpec),
    GrpoTask(BanditTaskSpec),
}

impl Component {
    pub fn kind(&self) -> &'static str {
        match self {
            Component::Model(_) => "model",
            Component::Tokenizer(_) => "tokenizer",
            Component::Dataset(_) => "dataset",
            Component::Optimizer(_) => "optimizer",
            Component::Loss(_) => "loss",
            Component::Scheduler(_) => "lr_scheduler",
            Component::Logger(_) => "metric_logger",
            Component::Checkpointer(_) => "checkpointer",
            Component::GrpoTask(_) => "task",
        }
    }
}

fn decoder_config(a: &Args) -> Result<DecoderConfig, RecipeError> {
    let num_heads = a.req_usize("num_heads")?;
    let mut cfg = DecoderConfig::new(
        a.req_usize("vocab_size")?,
        a.req_usize("num_layers")?,
        num_heads,
        a.usize("num_kv_heads")?.unwrap_or(num_heads),
        a.req_usize("embed_dim")?,
        a.req_usize("max_seq_len")?,
    );
    cfg.intermediate_dim = a.usize("intermediate_dim")?;
    if let Some(v) = a.f32("rope_base")? {
        cfg.rope_base = v;
    }
    if let Some(v) = a.f32("norm_eps")? {
        cfg.norm_eps = v;
    }
    cfg.attn_dropout = a.f32("attn_dropout")?.unwrap_or(0.0);
    cfg.tie_word_embeddings = a.bool("tie_word_embeddings").unwrap_or(false);
    cfg.seed = a.u64("seed")?.unwrap_or(0);
    cfg.validate()?;
    Ok(cfg)
}

const DECODER_ARGS: [ArgSpec; 11] = [
    ArgSpec::required("vocab_size", ArgKind::Int),
    ArgSpec::required("num_layers", ArgKind::Int),
    ArgSpec::required("num_heads", ArgKind::Int),
    ArgSpec::optional("num_kv_heads", ArgKind::Int),
    ArgSpec::required("embed_dim", ArgKind::Int),
    ArgSpec::required("max_seq_len", ArgKind::Int),
    ArgSpec::optional("intermediate_dim", ArgKind::Int),
    ArgSpec::optional("rope_base", ArgKind::Float),
    ArgSpec::optional("norm_eps", ArgKind::Float),
    ArgSpec::optional("attn_dropout", ArgKind::Float),
    ArgSpec::optional("tie_word_embeddings", ArgKind::Bool),
];

fn dataset_flags(a: &Args, source: DatasetSource) -> Result<Component, RecipeError> {
    let split = SplitSpec::parse(a.str("split").unwrap_or("train"))?;
    Ok(Component::Dataset(DatasetComponent {
        source,
        split,
        packed: a.bool("packed").unwrap_or(false),
        pad_to_max_seq_len: a.bool("pad_to_max_seq_len").unwrap_or(false),
    }))
}

const DATASET_FLAGS: [ArgSpec; 3] = [
    ArgSpec::optional("split", ArgKind::Str),
    ArgSpec::optional("packed", ArgKind::Bool),
    ArgSpec::optional("pad_to_max_seq_len", ArgKind::Bool),
];

/// Random byte sequences of uniform length in `min_len..=max_len`, framed by
/// BOS and EOS; every token after BOS is a training target.
pub fn random_sequences(num_samples: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_samples)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let mut tokens = Vec::with_capacity(len);
            tokens.push(BOS_ID);
            tokens.extend((0..len.saturating_sub(2)).map(|_| rng.random_range(0..256u32)));
            tokens.push(EOS_ID);
            tokens.truncate(len);
            let label_mask = (0..tokens.len()).map(|i| i > 0).collect();
            TokenSequence { tokens, label_mask }
        })
        .collect()
}

fn optimizer(a: &Args, precision: Precision) -> Result<Component, RecipeError> {
    let mut hyper = AdamWHyper::default();
    if let Some(lr) = a.f32("lr")? {
        hyper.lr = lr;
    }
    if let Some(betas) = a.f32_list("betas") {
        let [b1, b2] = betas[..] else {
            return Err(a.error("betas", format!("expected two values, got {}", betas.len())));
        };
        (hyper.beta1, hyper.beta2) = (b1, b2);
    }
    if let Some(eps) = a.f32("eps")? {
        hyper.eps = eps;
    }
    if let Some(wd) = a.f32("weight_decay")? {
        hyper.weight_decay = wd;
    }
    hyper.validate().map_err(|e| a.error("lr", e.to_string()))?;
    Ok(Component::Optimizer(OptimizerSpec { hyper, precision, fused: a.bool("fused").unwrap_or(false) }))
}

fn path_arg(a: &Args, name: &str) -> Option<PathBuf> {
    a.str(name).map(PathBuf::from)
}

fn checkpointer(a: &Args, mode: CheckpointMode) -> Result<Component, RecipeError> {
    let save_every_n_steps = a.usize("save_every_n_steps")?;
    if save_every_n_steps == Some(0) {
        return Err(a.error("save_every_n_steps", "must be positive"));
    }
    Ok(Component::Checkpointer(CheckpointerSpec {
        mode,
        output_dir: path_arg(a, "output_dir").expect("required by schema"),
        checkpoint_dir: path_arg(a, "checkpoint_dir"),
        save_every_n_steps,
    }))
}

fn register_builtins(r: &mut ComponentRegistry) -> Result<(), RecipeError> {
    use ArgKind::{Bool, Float, FloatList, Int, Str, StrList};

    let mut decoder_args = DECODER_ARGS.to_vec();
    decoder_args.push(ArgSpec::optional("seed", Int));
    r.register("minitune.models.decoder", decoder_args.clone(), |a| {
        let config = decoder_config(a)?;
        let decoder = build_decoder(&config)?;
        Ok(Component::Model(ModelComponent { config, lora: None, decoder }))
    })?;

    let mut lora_args = decoder_args;
    lora_args.extend([
        ArgSpec::required("lora_rank", Int),
        ArgSpec::required("lora_alpha", Float),
        ArgSpec::optional("lora_attn_modules", StrList),
    ]);
    r.register("minitune.models.lora_decoder", lora_args, |a| {
        let config = decoder_config(a)?;
        let targets = match a.str_list("lora_attn_modules") {
            Some(names) => names
                .iter()
                .map(|n| n.parse::<LoraTarget>().map_err(|e| a.error("lora_attn_modules", e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
            None => vec![LoraTarget::QProj, LoraTarget::VProj],
        };
        let lora = LoraConfig::new(a.req_usize("lora_rank")?, a.f32("lora_alpha")?.expect("required"), targets);
        let decoder = build_lora_decoder(&config, &lora)?;
        Ok(Component::Model(ModelComponent { config, lora: Some(lora), decoder }))
    })?;

    r.register("minitune.data.byte_tokenizer", vec![ArgSpec::optional("max_seq_len", Int)], |a| {
        Ok(Component::Tokenizer(ByteTokenizer { max_seq_len: a.usize("max_seq_len")? }))
    })?;

    let mut args = DATASET_FLAGS.to_vec();
    args.extend([ArgSpec::required("num_samples", Int), ArgSpec::optional("seed", Int)]);
    r.register("minitune.data.synthetic_instruct", args, |a| {
        let samples = synthetic_corpus(a.req_usize("num_samples")?, a.u64("seed")?.unwrap_or(0));
        dataset_flags(a, DatasetSource::Instruct(samples))
    })?;

    let mut args = DATASET_FLAGS.to_vec();
    args.push(ArgSpec::required("source", Str));
    r.register("minitune.data.instruct_dataset", args, |a| {
        let samples = load_jsonl_dataset(a.str("source").expect("required"))?;
        dataset_flags(a, DatasetSource::Instruct(samples))
    })?;

    let mut args = DATASET_FLAGS.to_vec();
    args.extend([
        ArgSpec::required("num_samples", Int),
        ArgSpec::required("min_len", Int),
        ArgSpec::required("max_len", Int),
        ArgSpec::optional("seed", Int),
    ]);
    r.register("minitune.data.random_sequences", args, |a| {
        let (lo, hi) = (a.req_usize("min_len")?, a.req_usize("max_len")?);
        if lo < 2 || lo > hi {
            return Err(a.error("min_len", format!("need 2 <= min_len <= max_len, got {lo} and {hi}")));
        }
        let seqs = random_sequences(a.req_usize("num_samples")?, lo, hi, a.u64("seed")?.unwrap_or(0));
        dataset_flags(a, DatasetSource::Tokens(seqs))
    })?;

    let adamw_args = vec![
        ArgSpec::optional("lr", Float),
        ArgSpec::optional("betas", FloatList),
        ArgSpec::optional("eps", Float),
        ArgSpec::optional("weight_decay", Float),
        ArgSpec::optional("fused", Bool),
    ];
    for path in ["torch.optim.AdamW", "minitune.optim.AdamW"] {
        r.register(path, adamw_args.clone(), |a| optimizer(a, Precision::F32))?;
    }
    for path in ["minitune.optim.AdamW8bit", "bitsandbytes.optim.AdamW8bit"] {
        r.register(path, adamw_args.clone(), |a| optimizer(a, Precision::Int8))?;
    }

    let ignore = ArgSpec::optional("ignore_index", Int);
    r.register("minitune.loss.CrossEntropyLoss", vec![ignore], |a| {
        let ignore_index = a.value("ignore_index").and_then(ConfigNode::as_i64).unwrap_or(IGNORE_INDEX);
        Ok(Component::Loss(LossSpec::CrossEntropy { ignore_index }))
    })?;
    r.register("minitune.loss.LinearCrossEntropyLoss", vec![ignore, ArgSpec::optional("chunk_size", Int)], |a| {
        let chunk_size = a.usize("chunk_size")?.unwrap_or(DEFAULT_CHUNK_SIZE);
        if chunk_size == 0 {
            return Err(a.error("chunk_size", "must be at least 1"));
        }
        let ignore_index = a.value("ignore_index").and_then(ConfigNode::as_i64).unwrap_or(IGNORE_INDEX);
        Ok(Component::Loss(LossSpec::LinearCrossEntropy { chunk_size, ignore_index }))
    })?;

    r.register(
        "minitune.training.warmup_cosine_schedule",
        vec![ArgSpec::required("num_warmup_steps", Int), ArgSpec::required("num_training_steps", Int)],
        |a| {
            Ok(Component::Scheduler(LrSchedule::WarmupCosine {
                warmup_steps: a.req_usize("num_warmup_steps")?,
                total_steps: a.req_usize("num_training_steps")?,
            }))
        },
    )?;
    r.register("minitune.training.constant_schedule", vec![], |_| Ok(Component::Scheduler(LrSchedule::Constant)))?;

    r.register("minitune.logging.CsvLogger", vec![ArgSpec::required("log_dir", Str)], |a| {
        Ok(Component::Logger(LoggerSpec { log_dir: path_arg(a, "log_dir").expect("required") }))
    })?;

    let ckpt_args = vec![
        ArgSpec::required("output_dir", Str),
        ArgSpec::optional("checkpoint_dir", Str),
        ArgSpec::optional("save_every_n_steps", Int),
    ];
    r.register("minitune.checkpoint.FullCheckpointer", ckpt_args.clone(), |a| checkpointer(a, CheckpointMode::Full))?;
    r.register("minitune.checkpoint.AdapterCheckpointer", ckpt_args, |a| checkpointer(a, CheckpointMode::Adapter))?;

    r.register("minitune.grpo.bandit_task", vec![ArgSpec::optional("seed", Int)], |a| {
        Ok(Component::GrpoTask(BanditTaskSpec { seed: a.u64("seed")?.unwrap_or(0) }))
    })?;
    Ok(())
}
