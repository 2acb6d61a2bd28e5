//! Checkpoints as one little-endian tensor blob plus a JSON manifest.
//!
//! ```text
//! step_N/
//!   manifest.json   format version, mode, tensor index, training metadata
//!   tensors.bin     raw f32 / u8 payloads at the indexed offsets
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use minitune_core::model::{NamedTensor, TransformerDecoder};
use minitune_core::optimizers::{MomentRecord, OptimizerStateDict, StateRecord};
use serde::{Deserialize, Serialize};

use crate::RecipeError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// Every model parameter.
    Full,
    /// LoRA adapter weights only; the base is rebuilt from its config.
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    /// Optimizer steps completed.
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPrecision {
    F32,
    Int8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub precision: MomentPrecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub mode: CheckpointMode,
    /// Model tensors in parameter order.
    pub model_tensors: Vec<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub metadata: TrainingMetadata,
    pub optimizer_state: bool,
    pub optimizer: BTreeMap<String, OptimizerEntry>,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: CheckpointMode,
    pub model: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerStateDict>,
    pub metadata: TrainingMetadata,
}

pub fn is_adapter_tensor(name: &str) -> bool {
    name.contains(".lora_a.") || name.contains(".lora_b.")
}

impl Checkpoint {
    /// Model tensors to save for `mode`: all of them, or the adapters only.
    pub fn capture(
        mode: CheckpointMode,
        decoder: &TransformerDecoder,
        optimizer: Option<OptimizerStateDict>,
        metadata: TrainingMetadata,
    ) -> Self {
        let model = decoder
            .state()
            .into_iter()
            .filter(|t| mode == CheckpointMode::Full || is_adapter_tensor(&t.name))
            .collect();
        Checkpoint { mode, model, optimizer, metadata }
    }

    /// Writes the saved values into `decoder`. Full checkpoints must cover
    /// every parameter; adapter checkpoints every adapter parameter, with
    /// shapes matching the base they are applied to.
    pub fn restore_model(&self, decoder: &TransformerDecoder) -> Result<(), RecipeError> {
        let err = |message: String| RecipeError::Checkpoint { path: "<model>".into(), message };
        match self.mode {
            CheckpointMode::Full => decoder.load_state(&self.model).map_err(|e| err(e.to_string())),
            CheckpointMode::Adapter => {
                let params = decoder.named_parameters();
                let expected: HashSet<&str> =
                    params.keys().map(String::as_str).filter(|n| is_adapter_tensor(n)).collect();
                let saved: HashSet<&str> = self.model.iter().map(|t| t.name.as_str()).collect();
                if expected != saved {
                    let mut missing: Vec<_> = expected.difference(&saved).collect();
                    let mut extra: Vec<_> = saved.difference(&expected).collect();
                    missing.sort();
                    extra.sort();
                    return Err(err(format!(
                        "adapter does not match the model (missing {missing:?}, unexpected {extra:?})"
                    )));
                }
                for t in &self.model {
                    let p = &params[&t.name];
                    if p.shape() != t.shape {
                        return Err(err(format!(
                            "adapter {} has shape {:?} but the base expects {:?}",
                            t.name,
                            t.shape,
                            p.shape()
                        )));
                    }
                }
                for t in &self.model {
                    params[&t.name].set_value(&t.data)?;
                }
                Ok(())
            }
        }
    }
}

struct BlobWriter {
    bytes: Vec<u8>,
    index: BTreeMap<String, TensorEntry>,
}

impl BlobWriter {
    fn push_f32(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        let offset = self.bytes.len() as u64;
        self.bytes.extend(data.iter().flat_map(|x| x.to_le_bytes()));
        self.index.insert(name, TensorEntry { dtype: DType::F32, shape, offset, length: data.len() as u64 * 4 });
    }

    fn push_u8(&mut self, name: String, data: &[u8]) {
        let offset = self.bytes.len() as u64;
        self.bytes.extend_from_slice(data);
        self.index
            .insert(name, TensorEntry { dtype: DType::U8, shape: vec![data.len()], offset, length: data.len() as u64 });
    }
}

fn model_key(name: &str) -> String {
    format!("model/{name}")
}

fn optim_key(param: &str, field: &str) -> String {
    format!("optimizer/{param}/{field}")
}

/// Writes `dir/manifest.json` and `dir/tensors.bin`.
pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<CheckpointManifest, RecipeError> {
    let dir = dir.as_ref();
    let fail = |message: String| RecipeError::Checkpoint { path: dir.display().to_string(), message };
    if ckpt.mode == CheckpointMode::Adapter {
        if let Some(t) = ckpt.model.iter().find(|t| !is_adapter_tensor(&t.name)) {
            return Err(fail(format!("adapter checkpoint cannot hold non-adapter tensor {}", t.name)));
        }
        if ckpt.model.is_empty() {
            return Err(fail("adapter checkpoint has no adapter tensors".into()));
        }
    }
    let mut seen = HashSet::new();
    if let Some(t) = ckpt.model.iter().find(|t| !seen.insert(t.name.as_str())) {
        return Err(fail(format!("duplicate tensor name {}", t.name)));
    }

    let mut blob = BlobWriter { bytes: Vec::new(), index: BTreeMap::new() };
    for t in &ckpt.model {
        blob.push_f32(model_key(&t.name), t.shape.clone(), &t.data);
    }
    let mut optimizer = BTreeMap::new();
    if let Some(dict) = &ckpt.optimizer {
        for (name, rec) in &dict.states {
            let precision = match &rec.moments {
                MomentRecord::F32 { m, v } => {
                    blob.push_f32(optim_key(name, "m"), vec![m.len()], m);
                    blob.push_f32(optim_key(name, "v"), vec![v.len()], v);
                    MomentPrecision::F32
                }
                MomentRecord::Int8 { m_codes, m_scales, v_codes, v_scales } => {
                    blob.push_u8(optim_key(name, "m_codes"), m_codes);
                    blob.push_f32(optim_key(name, "m_scales"), vec![m_scales.len()], m_scales);
                    blob.push_u8(optim_key(name, "v_codes"), v_codes);
                    blob.push_f32(optim_key(name, "v_scales"), vec![v_scales.len()], v_scales);
                    MomentPrecision::Int8
                }
            };
            optimizer.insert(name.clone(), OptimizerEntry { step: rec.step, precision });
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        mode: ckpt.mode,
        model_tensors: ckpt.model.iter().map(|t| t.name.clone()).collect(),
        tensors: blob.index,
        metadata: ckpt.metadata,
        optimizer_state: ckpt.optimizer.is_some(),
        optimizer,
    };
    fs::create_dir_all(dir).map_err(|e| RecipeError::io(dir, e))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob.bytes).map_err(|e| RecipeError::io(&blob_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, json + "\n").map_err(|e| RecipeError::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Checks that offsets do not overlap, lie inside the blob and match dtype
/// times element count, and that adapter manifests hold adapters only.
pub fn validate_manifest(manifest: &CheckpointManifest, blob_len: u64) -> Result<(), String> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(format!("format version {} is not supported (expected {FORMAT_VERSION})", manifest.format_version));
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    for (name, e) in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.length != numel as u64 * e.dtype.size() {
            return Err(format!("{name}: length {} does not match shape {:?} of {:?}", e.length, e.shape, e.dtype));
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| format!("{name}: offset overflows"))?;
        if end > blob_len {
            return Err(format!("{name}: bytes {}..{end} lie outside the {blob_len}-byte blob", e.offset));
        }
        spans.push((e.offset, end, name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format!("{} and {} overlap", w[0].2, w[1].2));
        }
    }
    for name in &manifest.model_tensors {
        if !manifest.tensors.contains_key(&model_key(name)) {
            return Err(format!("model tensor {name} is not indexed"));
        }
        if manifest.mode == CheckpointMode::Adapter && !is_adapter_tensor(name) {
            return Err(format!("adapter checkpoint holds non-adapter tensor {name}"));
        }
    }
    if !manifest.optimizer_state && !manifest.optimizer.is_empty() {
        return Err("optimizer entries are present but optimizer_state is false".into());
    }
    Ok(())
}

fn read_f32(blob: &[u8], e: &TensorEntry) -> Vec<f32> {
    blob[e.offset as usize..(e.offset + e.length) as usize]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("chunks of four")))
        .collect()
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint, RecipeError> {
    let dir = dir.as_ref();
    let fail = |message: String| RecipeError::Checkpoint { path: dir.display().to_string(), message };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| RecipeError::io(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| fail(format!("manifest does not parse: {e}")))?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| RecipeError::io(&blob_path, e))?;
    validate_manifest(&manifest, blob.len() as u64).map_err(fail)?;

    let entry = |key: &str, dtype: DType| -> Result<&TensorEntry, RecipeError> {
        let e = manifest.tensors.get(key).ok_or_else(|| fail(format!("{key} is missing from the index")))?;
        if e.dtype != dtype {
            return Err(fail(format!("{key} has dtype {:?}, expected {dtype:?}", e.dtype)));
        }
        Ok(e)
    };
    let model = manifest
        .model_tensors
        .iter()
        .map(|name| {
            let e = entry(&model_key(name), DType::F32)?;
            Ok(NamedTensor { name: name.clone(), shape: e.shape.clone(), data: read_f32(&blob, e) })
        })
        .collect::<Result<Vec<_>, RecipeError>>()?;

    let optimizer = if manifest.optimizer_state {
        let mut states = BTreeMap::new();
        for (name, o) in &manifest.optimizer {
            let f32s = |field: &str| entry(&optim_key(name, field), DType::F32).map(|e| read_f32(&blob, e));
            let u8s = |field: &str| {
                entry(&optim_key(name, field), DType::U8)
                    .map(|e| blob[e.offset as usize..(e.offset + e.length) as usize].to_vec())
            };
            let moments = match o.precision {
                MomentPrecision::F32 => MomentRecord::F32 { m: f32s("m")?, v: f32s("v")? },
                MomentPrecision::Int8 => MomentRecord::Int8 {
                    m_codes: u8s("m_codes")?,
                    m_scales: f32s("m_scales")?,
                    v_codes: u8s("v_codes")?,
                    v_scales: f32s("v_scales")?,
                },
            };
            states.insert(name.clone(), StateRecord { step: o.step, moments });
        }
        Some(OptimizerStateDict { states })
    } else {
        None
    };
    Ok(Checkpoint { mode: manifest.mode, model, optimizer, metadata: manifest.metadata })
}

/// `root/step_{step}`.
pub fn step_dir(root: impl AsRef<Path>, step: u64) -> PathBuf {
    root.as_ref().join(format!("step_{step}"))
}

/// Bytes on disk for a saved checkpoint directory.
pub fn checkpoint_size(dir: impl AsRef<Path>) -> Result<u64, RecipeError> {
    let dir = dir.as_ref();
    [MANIFEST_FILE, BLOB_FILE].iter().try_fold(0, |acc, f| {
        let p = dir.join(f);
        Ok(acc + fs::metadata(&p).map_err(|e| RecipeError::io(&p, e))?.len())
    })
}
